use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spiking::LifParams;

/// How Q, K or V is computed from the block's input spikes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Tdc,
    Conv3d,
    None,
}

/// Whether a stage runs as a conventional (real-valued) or spiking network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Ann,
    Snn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub t_s: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub tdc_theta: f64,
    pub q_proj: Projection,
    pub k_proj: Projection,
    pub v_proj: Projection,
    pub parallel: bool,
    /// Skip gain of the parallel block.
    pub alpha_comb: f64,
    pub beta_ff: f64,
    pub beta_sa: f64,
    /// Skip gains of the sequential block.
    pub alpha_ff: f64,
    pub alpha_sa: f64,
    pub pe: Component,
    pub head: Component,
    /// Input clip `(T, H, W)`.
    pub input_geometry: [usize; 3],
    pub lif: LifParams,
    /// Threshold of the neuron between the attention mask and its output
    /// projection. Its input is binary, and with `tau = 2` a unit threshold
    /// is never reached.
    pub attn_out_v_th: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 96,
            n_blocks: 4,
            t_s: 4,
            n_heads: 4,
            mlp_ratio: 3,
            tdc_theta: 0.7,
            q_proj: Projection::Tdc,
            k_proj: Projection::Conv3d,
            v_proj: Projection::None,
            parallel: true,
            alpha_comb: 1.0,
            beta_ff: 1.0,
            beta_sa: 1.0,
            alpha_ff: 1.0,
            alpha_sa: 1.0,
            pe: Component::Ann,
            head: Component::Ann,
            input_geometry: [160, 128, 128],
            lif: LifParams::default(),
            attn_out_v_th: 0.5,
        }
    }
}

impl ModelConfig {
    /// Small model used by tests and the desk-scale experiments.
    pub fn toy(d_model: usize, n_blocks: usize, t_s: usize, geometry: [usize; 3]) -> Self {
        Self {
            d_model,
            n_blocks,
            t_s,
            n_heads: if d_model % 4 == 0 { 4 } else { 1 },
            input_geometry: geometry,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model;
        if d == 0 || d % 4 != 0 {
            return Err(Error::Config(format!("d_model {d} must be a positive multiple of 4")));
        }
        if self.n_heads == 0 || d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d} not divisible by n_heads {}",
                self.n_heads
            )));
        }
        if self.n_blocks == 0 {
            return Err(Error::Config("n_blocks must be >= 1".into()));
        }
        if self.t_s == 0 {
            return Err(Error::Config("t_s must be >= 1".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be >= 1".into()));
        }
        if self.v_proj == Projection::Tdc {
            return Err(Error::UnsupportedVariant(
                "temporal difference convolution for V is not a supported variant".into(),
            ));
        }
        if !(self.attn_out_v_th > 0.0) {
            return Err(Error::Config("attn_out_v_th must be > 0".into()));
        }
        self.lif
            .validate()
            .map_err(|e| Error::Config(format!("lif: {e}")))?;
        let [t, h, w] = self.input_geometry;
        check_geometry("T", t, 4)?;
        check_geometry("H", h, 32)?;
        check_geometry("W", w, 32)?;
        Ok(())
    }

    /// Token grid `(T/4, H/32, W/32)`.
    pub fn grid(&self) -> [usize; 3] {
        let [t, h, w] = self.input_geometry;
        [t / 4, h / 32, w / 32]
    }

    pub fn n_tokens(&self) -> usize {
        self.grid().iter().product()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

fn check_geometry(axis: &'static str, n: usize, m: usize) -> Result<()> {
    if n == 0 || n % m != 0 {
        return Err(Error::Geometry {
            axis,
            msg: format!("{n} is not a positive multiple of {m}"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.grid(), [40, 4, 4]);
        assert_eq!(c.n_tokens(), 640);
        assert_eq!(c.head_dim(), 24);
    }

    #[test]
    fn geometry_errors_name_axis() {
        let c = ModelConfig {
            input_geometry: [80, 48, 32],
            ..ModelConfig::default()
        };
        match c.validate() {
            Err(Error::Geometry { axis, .. }) => assert_eq!(axis, "H"),
            other => panic!("{other:?}"),
        }
        let c = ModelConfig {
            input_geometry: [82, 32, 32],
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Geometry { axis: "T", .. })));
    }

    #[test]
    fn head_and_variant_errors() {
        let c = ModelConfig {
            n_heads: 5,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ModelConfig {
            v_proj: Projection::Tdc,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::UnsupportedVariant(_))));
    }

    #[test]
    fn json_rejects_unknown_keys() {
        let c: ModelConfig = serde_json::from_str(r#"{"d_model": 24, "q_proj": "conv3d"}"#).unwrap();
        assert_eq!(c.d_model, 24);
        assert_eq!(c.q_proj, Projection::Conv3d);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"d_modl": 24}"#).is_err());
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
    }
}
