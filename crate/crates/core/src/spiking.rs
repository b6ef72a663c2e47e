//! Leaky integrate-and-fire dynamics, the arctan surrogate derivative,
//! direct encoding and spike statistics.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LifParams {
    /// Membrane time constant in timesteps.
    pub tau: f64,
    pub v_th: f64,
    pub v_reset: f64,
    /// Surrogate slope.
    pub alpha: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            tau: 2.0,
            v_th: 1.0,
            v_reset: 0.0,
            alpha: 2.0,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.v_th > self.v_reset) {
            return Err(Error::Config(format!(
                "v_th ({}) must exceed v_reset ({})",
                self.v_th, self.v_reset
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// How the threshold nonlinearity is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpikeMode {
    /// Heaviside forward, arctan surrogate backward.
    #[default]
    Hard,
    /// Smooth arctan step in both directions; used for finite-difference checks.
    Smooth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LifState<S> {
    pub v: Tensor<S>,
}

impl<S: Scalar> LifState<S> {
    pub fn reset(shape: &[usize], p: &LifParams) -> Self {
        Self {
            v: Tensor::full(shape, S::of(p.v_reset)),
        }
    }
}

/// A tensor whose entries are exactly 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeTensor<S> {
    values: Tensor<S>,
    fire_rate: f64,
}

impl<S: Scalar> SpikeTensor<S> {
    /// Validates binarity and caches the fire rate.
    pub fn new(values: Tensor<S>) -> Result<Self> {
        let mut ones = 0usize;
        for &v in values.data() {
            if v == S::one() {
                ones += 1;
            } else if v != S::zero() {
                return Err(Error::arg(format!("non-binary spike value {v}")));
            }
        }
        let fire_rate = if values.numel() == 0 {
            0.0
        } else {
            ones as f64 / values.numel() as f64
        };
        Ok(Self { values, fire_rate })
    }

    pub fn values(&self) -> &Tensor<S> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<S> {
        self.values
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    pub fn fire_rate(&self) -> f64 {
        self.fire_rate
    }

    pub fn count_ones(&self) -> usize {
        self.values.data().iter().filter(|&&v| v == S::one()).count()
    }
}

/// Fraction of nonzero entries.
pub fn fire_rate<S: Scalar>(s: &SpikeTensor<S>) -> Result<f64> {
    if s.values.numel() == 0 {
        return Err(Error::arg("fire rate of an empty tensor"));
    }
    Ok(s.fire_rate)
}

/// `alpha / (2 (1 + (pi/2 * alpha * x)^2))`.
pub fn surrogate_grad(x: f64, alpha: f64) -> f64 {
    let k = FRAC_PI_2 * alpha * x;
    alpha / (2.0 * (1.0 + k * k))
}

/// Primitive of [`surrogate_grad`]: `atan(pi/2 * alpha * x)/pi + 1/2`.
pub fn surrogate_primitive(x: f64, alpha: f64) -> f64 {
    (FRAC_PI_2 * alpha * x).atan() / PI + 0.5
}

pub fn surrogate_grad_tensor<S: Scalar>(x: &Tensor<S>, alpha: f64) -> Tensor<S> {
    x.map(|v| S::of(surrogate_grad(v.as_f64(), alpha)))
}

/// One LIF update on plain tensors.
pub fn lif_step<S: Scalar>(
    x: &Tensor<S>,
    state: &LifState<S>,
    p: &LifParams,
) -> Result<(SpikeTensor<S>, LifState<S>)> {
    if x.shape() != state.v.shape() {
        return Err(Error::Shape(format!(
            "input {:?} vs membrane {:?}",
            x.shape(),
            state.v.shape()
        )));
    }
    let inv_tau = 1.0 / p.tau;
    let mut spikes = Vec::with_capacity(x.numel());
    let mut v_next = Vec::with_capacity(x.numel());
    for (&xi, &vi) in x.data().iter().zip(state.v.data()) {
        let (v, xv) = (vi.as_f64(), xi.as_f64());
        let h = v + inv_tau * (xv - (v - p.v_reset));
        let s = if h >= p.v_th { 1.0 } else { 0.0 };
        spikes.push(S::of(s));
        v_next.push(S::of(h * (1.0 - s) + p.v_reset * s));
    }
    Ok((
        SpikeTensor::new(Tensor::new(x.shape(), spikes)?)?,
        LifState {
            v: Tensor::new(x.shape(), v_next)?,
        },
    ))
}

/// Runs [`lif_step`] over the leading (spike-time) axis from a fresh state.
pub fn lif_sequence<S: Scalar>(x_seq: &Tensor<S>, p: &LifParams) -> Result<SpikeTensor<S>> {
    if x_seq.ndim() == 0 || x_seq.shape()[0] == 0 {
        return Err(Error::arg("spike sequence needs at least one timestep"));
    }
    let mut state = LifState::reset(&x_seq.shape()[1..], p);
    let mut out = Vec::with_capacity(x_seq.shape()[0]);
    for t in 0..x_seq.shape()[0] {
        let (s, next) = lif_step(&x_seq.index0(t)?, &state, p)?;
        out.push(s.into_values());
        state = next;
    }
    let refs: Vec<&Tensor<S>> = out.iter().collect();
    SpikeTensor::new(Tensor::stack(&refs)?)
}

/// Replicate `x` along a new leading axis of length `t_s`.
pub fn direct_encode<S: Scalar>(x: &Tensor<S>, t_s: usize) -> Result<Tensor<S>> {
    if t_s == 0 {
        return Err(Error::arg("t_s must be >= 1"));
    }
    let parts: Vec<&Tensor<S>> = (0..t_s).map(|_| x).collect();
    Tensor::stack(&parts)
}

/// Graph version of [`direct_encode`]; the backward sums over replicas.
pub fn direct_encode_graph<S: Scalar>(g: &mut Graph<S>, x: Var, t_s: usize) -> Result<Var> {
    if t_s == 0 {
        return Err(Error::arg("t_s must be >= 1"));
    }
    let mut s1 = vec![1];
    s1.extend_from_slice(g.shape(x));
    let r = g.reshape(x, &s1)?;
    let mut st = s1.clone();
    st[0] = t_s;
    g.expand(r, &st)
}

/// Threshold nonlinearity with the surrogate derivative registered as the
/// backward rule. `x` is `H - V_th`.
pub fn spike_fn<S: Scalar>(g: &mut Graph<S>, x: Var, alpha: f64, mode: SpikeMode) -> Result<Var> {
    match mode {
        SpikeMode::Hard => {
            let s = g.heaviside(x)?;
            g.set_custom_grad(
                s,
                Box::new(move |gr, p, _| {
                    let d = surrogate_grad_tensor(p[0], alpha);
                    Ok(vec![Some(gr.zip_map(&d, |a, b| a * b)?)])
                }),
            );
            Ok(s)
        }
        SpikeMode::Smooth => g.arctan_step(x, alpha),
    }
}

/// LIF neuron layer on the tape. `x_seq` has the spike-time axis first; the
/// membrane starts at `v_reset` and is carried across those timesteps only.
pub fn lif_sequence_graph<S: Scalar>(
    g: &mut Graph<S>,
    x_seq: Var,
    p: &LifParams,
    mode: SpikeMode,
) -> Result<Var> {
    let shape = g.shape(x_seq).to_vec();
    if shape.is_empty() || shape[0] == 0 {
        return Err(Error::arg("spike sequence needs at least one timestep"));
    }
    let inv_tau = 1.0 / p.tau;
    let mut v: Option<Var> = None;
    let mut spikes = Vec::with_capacity(shape[0]);
    for t in 0..shape[0] {
        let xt = g.index0(x_seq, t)?;
        let xs = g.scale(xt, inv_tau)?;
        // H = V + (X - (V - V_reset)) / tau = V (1 - 1/tau) + X/tau + V_reset/tau
        let h = match v {
            None => g.add_scalar(xs, p.v_reset)?,
            Some(v) => {
                let vd = g.scale(v, 1.0 - inv_tau)?;
                let sum = g.add(vd, xs)?;
                g.add_scalar(sum, p.v_reset * inv_tau)?
            }
        };
        let over = g.add_scalar(h, -p.v_th)?;
        let s = spike_fn(g, over, p.alpha, mode)?;
        // V = H (1 - S) + V_reset S
        let hs = g.mul(h, s)?;
        let mut vn = g.sub(h, hs)?;
        if p.v_reset != 0.0 {
            let rs = g.scale(s, p.v_reset)?;
            vn = g.add(vn, rs)?;
        }
        v = Some(vn);
        spikes.push(s);
    }
    g.stack(&spikes)
}
