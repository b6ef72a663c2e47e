//! MAC/AC counting and the 45 nm energy model.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerKind, LayerRecord, Model, Projection};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Joules per operation, 32-bit float at 45 nm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub e_mac: f64,
    pub e_ac: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            e_mac: 4.6e-12,
            e_ac: 0.9e-12,
        }
    }
}

impl CostModel {
    pub fn new(e_mac: f64, e_ac: f64) -> Result<Self> {
        if !(e_mac > 0.0 && e_ac > 0.0 && e_mac.is_finite() && e_ac.is_finite()) {
            return Err(Error::arg(format!("costs must be positive, got {e_mac}, {e_ac}")));
        }
        Ok(Self { e_mac, e_ac })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountMode {
    /// Full `k_t * k_h * k_w` kernel volume.
    #[default]
    Exact,
    /// Square spatial kernel only, as the published conv FLOPs formula is written.
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    /// `[k_t, k_h, k_w]`.
    pub kernel: [usize; 3],
    /// Output `[t, h, w]`.
    pub out: [usize; 3],
    pub c_in: usize,
    pub c_out: usize,
}

pub fn flops_conv(s: &ConvShape, mode: CountMode) -> u64 {
    let [kt, kh, kw] = s.kernel.map(|v| v as u64);
    let k = match mode {
        CountMode::Exact => kt * kh * kw,
        CountMode::Paper => kh * kw,
    };
    let out: u64 = s.out.iter().map(|&v| v as u64).product();
    k * out * s.c_in as u64 * s.c_out as u64
}

/// Spike-driven accumulates: `fr * T_s * flops`.
pub fn sops(flops: f64, fire_rate: f64, t_s: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&fire_rate) {
        return Err(Error::arg(format!("fire rate {fire_rate} outside [0, 1]")));
    }
    Ok(fire_rate * t_s as f64 * flops)
}

pub fn energy(flops: f64, sops: f64, cost: &CostModel) -> f64 {
    cost.e_mac * flops + cost.e_ac * sops
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub name: String,
    pub kind: LayerKind,
    /// Dense MACs over the whole clip (all timestep replicas).
    pub dense_macs: u64,
    pub flops: f64,
    pub sops: f64,
    pub fire_rate: Option<f64>,
    pub energy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyTotals {
    pub flops: f64,
    pub sops: f64,
    pub energy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub mode: CountMode,
    pub cost: CostModel,
    pub frames: usize,
    pub params: usize,
    pub rows: Vec<EnergyRow>,
    pub per_clip: EnergyTotals,
    pub per_frame: EnergyTotals,
}

impl EnergyReport {
    pub fn from_layers(
        layers: &[LayerRecord],
        frames: usize,
        params: usize,
        mode: CountMode,
        cost: CostModel,
    ) -> Result<Self> {
        if frames == 0 {
            return Err(Error::arg("clip has no frames"));
        }
        let mut rows = Vec::with_capacity(layers.len());
        for l in layers {
            let macs = match mode {
                CountMode::Exact => l.macs,
                CountMode::Paper => l.macs_paper,
            };
            let dense = macs * l.repeats as u64;
            let (flops, ops) = match (l.kind, l.fire_rate) {
                (LayerKind::Snn, Some(fr)) => (0.0, sops(macs as f64, fr, l.repeats)?),
                _ => (dense as f64, 0.0),
            };
            rows.push(EnergyRow {
                name: l.name.clone(),
                kind: l.kind,
                dense_macs: dense,
                flops,
                sops: ops,
                fire_rate: l.fire_rate,
                energy: energy(flops, ops, &cost),
            });
        }
        let flops: f64 = rows.iter().map(|r| r.flops).sum();
        let ops: f64 = rows.iter().map(|r| r.sops).sum();
        let per_clip = EnergyTotals {
            flops,
            sops: ops,
            energy: energy(flops, ops, &cost),
        };
        let f = frames as f64;
        let per_frame = EnergyTotals {
            flops: flops / f,
            sops: ops / f,
            energy: energy(flops / f, ops / f, &cost),
        };
        Ok(Self {
            mode,
            cost,
            frames,
            params,
            rows,
            per_clip,
            per_frame,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,dense_macs,flops,sops,fire_rate,energy_j\n");
        for r in &self.rows {
            let kind = match r.kind {
                LayerKind::Ann => "ANN",
                LayerKind::Snn => "SNN",
            };
            let fr = r.fire_rate.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                s,
                "{},{kind},{},{},{},{fr},{:e}",
                r.name,
                r.dense_macs,
                r.flops.round(),
                r.sops.round(),
                r.energy
            )
            .expect("string write");
        }
        s
    }

    /// Writes `energy.csv` (per layer) and `energy.json` (everything).
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("energy.csv"), self.to_csv())?;
        fs::write(dir.join("energy.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// One instrumented eval pass over a preprocessed clip `[3, T, H, W]`.
pub fn audit<S: Scalar>(
    model: &Model<S>,
    clip: &Tensor<S>,
    mode: CountMode,
    cost: CostModel,
) -> Result<EnergyReport> {
    let geom = model.config().input_geometry;
    let s = clip.shape();
    if s.len() != 4 || s[0] != 3 || s[1..] != geom[..] {
        return Err(Error::Config(format!(
            "clip shape {s:?} does not match model geometry [3, {}, {}, {}]",
            geom[0], geom[1], geom[2]
        )));
    }
    let (_, diag) = model.predict(clip)?;
    EnergyReport::from_layers(&diag.layers, geom[0], model.param_count(), mode, cost)
}

/// Block geometry for the analytic attention-cost comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockGeometry {
    pub n_tokens: usize,
    pub d_model: usize,
    pub t_s: usize,
    pub mlp_ratio: usize,
    /// Hidden width of the conventional block's spatio-temporal feed-forward.
    pub ff_dim: usize,
    /// Clip frames the per-frame figures divide by.
    pub frames: usize,
}

impl Default for BlockGeometry {
    fn default() -> Self {
        Self {
            n_tokens: 640,
            d_model: 96,
            t_s: 4,
            mlp_ratio: 3,
            ff_dim: 144,
            frames: 160,
        }
    }
}

/// Fire rates seen by the spiking block's synaptic layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct S3aRates {
    /// Block input spikes (Q/K/V projections and fc1).
    pub input: f64,
    /// MLP hidden spikes (fc2).
    pub hidden: f64,
    /// Attention output spikes (output projection).
    pub attn_out: f64,
    /// Q AND K mask density.
    pub mask: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdsaComparison {
    pub tdsa_macs: f64,
    /// `2 N^2 D` score/value products, listed but not in `tdsa_energy`.
    pub tdsa_matmul_macs: f64,
    pub s3a_sops: f64,
    /// Per-frame joules.
    pub tdsa_energy: f64,
    pub s3a_energy: f64,
    pub ratio: f64,
}

fn projection_macs(p: Projection, c: f64) -> f64 {
    match p {
        // 27 taps plus the pointwise temporal-difference pass
        Projection::Tdc => 28.0 * c,
        Projection::Conv3d => c,
        Projection::None => 0.0,
    }
}

/// Dense MACs of a conventional block: TDC Q/K, pointwise V and output
/// projection, and a pointwise/depthwise/pointwise feed-forward.
pub fn tdsa_block_macs(g: &BlockGeometry) -> f64 {
    let (n, d, ff) = (g.n_tokens as f64, g.d_model as f64, g.ff_dim as f64);
    let c = n * d * d;
    let proj = 2.0 * projection_macs(Projection::Tdc, c) + 2.0 * c;
    proj + 2.0 * n * d * ff + 27.0 * n * ff
}

/// Spike-driven accumulates of one spiking block over all timesteps.
pub fn s3a_block_sops(g: &BlockGeometry, proj: [Projection; 3], r: &S3aRates) -> Result<f64> {
    for (name, v) in [("input", r.input), ("hidden", r.hidden), ("attn_out", r.attn_out), ("mask", r.mask)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::arg(format!("{name} fire rate {v} outside [0, 1]")));
        }
    }
    let (n, d) = (g.n_tokens as f64, g.d_model as f64);
    let c = n * d * d;
    let ratio = g.mlp_ratio as f64;
    let qkv: f64 = proj.iter().map(|&p| projection_macs(p, c)).sum();
    let per_step = r.input * (qkv + ratio * c) + r.hidden * ratio * c + r.attn_out * c + r.mask * n * d;
    Ok(per_step * g.t_s as f64)
}

pub fn compare_tdsa(
    g: &BlockGeometry,
    proj: [Projection; 3],
    rates: &S3aRates,
    cost: &CostModel,
) -> Result<TdsaComparison> {
    if g.frames == 0 || g.n_tokens == 0 || g.d_model == 0 {
        return Err(Error::arg("empty block geometry"));
    }
    let f = g.frames as f64;
    let tdsa_macs = tdsa_block_macs(g);
    let s3a_sops = s3a_block_sops(g, proj, rates)?;
    let tdsa_energy = energy(tdsa_macs / f, 0.0, cost);
    let s3a_energy = energy(0.0, s3a_sops / f, cost);
    let n = g.n_tokens as f64;
    Ok(TdsaComparison {
        tdsa_macs,
        tdsa_matmul_macs: 2.0 * n * n * g.d_model as f64,
        s3a_sops,
        tdsa_energy,
        s3a_energy,
        ratio: tdsa_energy / s3a_energy,
    })
}
