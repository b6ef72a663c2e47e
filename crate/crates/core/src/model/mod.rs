//! The hybrid spiking transformer for pulse-wave regression: a conventional
//! 3-D convolutional patch embedding, direct spike encoding, a stack of
//! spike-driven transformer blocks and a conventional temporal upsampling
//! predictor head.

mod config;
mod params;

pub use config::{Component, ModelConfig, Projection};
pub use params::{ParamStore, TensorEntry};

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::{BnMode, ConvGeom, RunningStats};
use crate::scalar::Scalar;
use crate::spiking::{direct_encode_graph, lif_sequence_graph, LifParams, SpikeMode};
use crate::tensor::Tensor;

/// Tokens `[T_s, N, D]` together with the video grid they were flattened from.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<S: Scalar> {
    pub tokens: Tensor<S>,
    pub origin: [usize; 3],
}

impl<S: Scalar> TokenGrid<S> {
    /// `[T_s, D, T', H', W'] -> [T_s, T'H'W', D]`.
    pub fn vid2seq(video: &Tensor<S>) -> Result<Self> {
        let s = video.shape();
        if s.len() != 5 {
            return Err(Error::Shape(format!("vid2seq expects 5 axes, got {s:?}")));
        }
        let n = s[2] * s[3] * s[4];
        let tokens = video.reshape(&[s[0], s[1], n])?.permute(&[0, 2, 1])?;
        Ok(Self {
            tokens,
            origin: [s[2], s[3], s[4]],
        })
    }

    pub fn seq2vid(&self) -> Result<Tensor<S>> {
        let s = self.tokens.shape();
        let [t, h, w] = self.origin;
        if s.len() != 3 || s[1] != t * h * w {
            return Err(Error::dim(1, format!("{s:?} does not match grid {:?}", self.origin)));
        }
        self.tokens.permute(&[0, 2, 1])?.reshape(&[s[0], s[2], t, h, w])
    }
}

/// Graph form of [`TokenGrid::vid2seq`] with a batch axis:
/// `[T_s*B, D, T', H', W'] -> [T_s, B, N, D]`.
pub fn vid2seq_graph<S: Scalar>(g: &mut Graph<S>, x: Var, t_s: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let b = s[0] / t_s;
    let r = g.reshape(x, &[t_s, b, s[1], s[2] * s[3] * s[4]])?;
    g.permute(r, &[0, 1, 3, 2])
}

/// Inverse of [`vid2seq_graph`].
pub fn seq2vid_graph<S: Scalar>(g: &mut Graph<S>, x: Var, grid: [usize; 3]) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let p = g.permute(x, &[0, 1, 3, 2])?;
    g.reshape(p, &[s[0] * s[1], s[3], grid[0], grid[1], grid[2]])
}

/// Temporal difference convolution with a 3x3x3 kernel, stride 1, padding 1:
/// `conv(x, w) - theta * x * sum(w over the two temporally adjacent slices)`.
pub fn tdc<S: Scalar>(g: &mut Graph<S>, x: Var, w: Var, theta: f64) -> Result<Var> {
    let ws = g.shape(w).to_vec();
    if ws.len() != 5 || ws[2..] != [3, 3, 3] {
        return Err(Error::arg(format!("tdc needs a 3x3x3 kernel, got {ws:?}")));
    }
    let geom = ConvGeom {
        stride: [1, 1, 1],
        pad: [1, 1, 1],
    };
    let y = g.conv3d(x, w, geom)?;
    if theta == 0.0 {
        return Ok(y);
    }
    let before = g.narrow(w, 2, 0, 1)?;
    let after = g.narrow(w, 2, 2, 1)?;
    let adj = g.add(before, after)?;
    let rows = g.sum_axis_keep(adj, 3)?;
    let wsum = g.sum_axis_keep(rows, 4)?;
    let centre = g.conv3d(x, wsum, ConvGeom::unit())?;
    let term = g.scale(centre, theta)?;
    g.sub(y, term)
}

/// One attention head on `[T_s, B, N, d]` spike tensors. Returns
/// `(V_hat, gate [T_s, B, 1, d], mask Q*K)`.
pub fn s3a_head<S: Scalar>(
    g: &mut Graph<S>,
    q: Var,
    k: Var,
    v: Var,
    lif: &LifParams,
    mode: SpikeMode,
) -> Result<(Var, Var, Var)> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs != ks || qs != vs || qs.len() != 4 {
        return Err(Error::dim(0, format!("q {qs:?}, k {ks:?}, v {vs:?} must match")));
    }
    let mask = g.mul(q, k)?;
    let counts = g.sum_axis_keep(mask, 2)?;
    let gate = lif_sequence_graph(g, counts, lif, mode)?;
    let wide = g.expand(gate, &qs)?;
    let vhat = g.mul(wide, v)?;
    Ok((vhat, gate, mask))
}

/// Tensor form of [`s3a_head`] for `[T_s, N, d]` spikes. Returns `(V_hat, gate [T_s, d])`.
pub fn s3a_head_tensor<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    lif: &LifParams,
) -> Result<(Tensor<S>, Tensor<S>)> {
    for (i, t) in [q, k, v].iter().enumerate() {
        if t.ndim() != 3 || t.shape() != q.shape() {
            return Err(Error::dim(i, format!("expected matching [T_s,N,d], got {:?}", t.shape())));
        }
    }
    let s = q.shape();
    let lift = |t: &Tensor<S>| t.reshape(&[s[0], 1, s[1], s[2]]);
    let mut g = Graph::inference();
    let (qv, kv, vv) = (g.constant(lift(q)?), g.constant(lift(k)?), g.constant(lift(v)?));
    let (vhat, gate, _) = s3a_head(&mut g, qv, kv, vv, lif, SpikeMode::Hard)?;
    Ok((
        g.value(vhat).reshape(s)?,
        g.value(gate).reshape(&[s[0], s[2]])?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    /// Batch statistics (and running-stat updates) instead of running stats.
    pub train: bool,
    pub spike_mode: SpikeMode,
    /// Keep a copy of every spike tensor in the diagnostics.
    pub record_spikes: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            train: false,
            spike_mode: SpikeMode::Hard,
            record_spikes: false,
        }
    }

    pub fn train() -> Self {
        Self {
            train: true,
            ..Self::eval()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LayerKind {
    Ann,
    Snn,
}

/// Multiply-accumulate footprint of one layer for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub name: String,
    pub kind: LayerKind,
    /// Dense MACs for one sample at one spike timestep.
    pub macs: u64,
    /// The same count with the temporal kernel extent dropped.
    pub macs_paper: u64,
    /// Non-zero fraction of the layer input for spiking layers.
    pub fire_rate: Option<f64>,
    /// How many timestep replicas the layer runs per sample.
    pub repeats: usize,
}

/// Per-block spiking statistics. Spike tensors are `[T_s, B, N, D]`.
#[derive(Clone, Debug)]
pub struct BlockDiag<S: Scalar> {
    pub input_fr: f64,
    pub q_fr: f64,
    pub k_fr: f64,
    pub v_fr: f64,
    pub mask_fr: f64,
    pub gate_fr: f64,
    pub vhat_fr: f64,
    pub attn_out_fr: f64,
    pub hidden_fr: f64,
    pub v: Tensor<S>,
    pub vhat: Tensor<S>,
    /// `[T_s, B, 1, D]`.
    pub gate: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct Diagnostics<S: Scalar> {
    pub grid: [usize; 3],
    pub batch: usize,
    pub blocks: Vec<BlockDiag<S>>,
    pub layers: Vec<LayerRecord>,
    /// Every spike tensor produced, when requested.
    pub spikes: Vec<(String, Tensor<S>)>,
}

pub struct ForwardOut<S: Scalar> {
    /// Predicted waves `[B, T]`.
    pub y: Var,
    /// Parameter leaves, in [`ParamStore`] order.
    pub params: Vec<Var>,
    pub diag: Diagnostics<S>,
}

fn nonzero_fraction<S: Scalar>(t: &Tensor<S>) -> f64 {
    if t.numel() == 0 {
        return 0.0;
    }
    t.data().iter().filter(|&&v| v != S::zero()).count() as f64 / t.numel() as f64
}

struct Ctx<'a, S: Scalar> {
    g: &'a mut Graph<S>,
    store: &'a ParamStore<S>,
    vars: Vec<Var>,
    stats: Vec<(String, RunningStats)>,
    cfg: &'a ModelConfig,
    opts: ForwardOptions,
    batch: usize,
    layers: Vec<LayerRecord>,
    spikes: Vec<(String, Tensor<S>)>,
}

impl<'a, S: Scalar> Ctx<'a, S> {
    fn new(
        g: &'a mut Graph<S>,
        store: &'a ParamStore<S>,
        cfg: &'a ModelConfig,
        opts: ForwardOptions,
        batch: usize,
    ) -> Self {
        let vars = store.register(g);
        Self {
            g,
            store,
            vars,
            stats: Vec::new(),
            cfg,
            opts,
            batch,
            layers: Vec::new(),
            spikes: Vec::new(),
        }
    }

    fn p(&self, name: &str) -> Result<Var> {
        self.store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("model has no parameter {name}")))
    }

    fn conv(&mut self, name: &str, x: Var, geom: ConvGeom, spiking_input: bool) -> Result<Var> {
        let w = self.p(&format!("{name}.weight"))?;
        let y = self.g.conv3d(x, w, geom)?;
        let fr = spiking_input.then(|| nonzero_fraction(self.g.value(x)));
        self.record(name, x, w, y, fr, 0);
        Ok(y)
    }

    /// MAC record for a conv whose extra cost is `extra` pointwise passes.
    fn record(&mut self, name: &str, x: Var, w: Var, y: Var, fr: Option<f64>, extra: u64) {
        let ws = self.g.shape(w);
        let ys = self.g.shape(y);
        let out: u64 = ys[2..].iter().map(|&v| v as u64).product();
        let kernel: u64 = ws[2..].iter().map(|&v| v as u64).product();
        let chans = (ws[0] * ws[1]) as u64;
        let macs = out * chans * (kernel + extra);
        let macs_paper = out * chans * (kernel / ws[2] as u64 + extra);
        let repeats = self.g.shape(x)[0] / self.batch;
        self.layers.push(LayerRecord {
            name: name.to_string(),
            kind: if fr.is_some() { LayerKind::Snn } else { LayerKind::Ann },
            macs,
            macs_paper,
            fire_rate: fr,
            repeats,
        });
    }

    fn bn(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.p(&format!("{name}.gamma"))?;
        let beta = self.p(&format!("{name}.beta"))?;
        let mut stats = self
            .store
            .bn_stats(name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("model has no batchnorm {name}")))?;
        let mode = if self.opts.train { BnMode::Train } else { BnMode::Eval };
        let y = self.g.batchnorm(x, 1, gamma, beta, &mut stats, mode)?;
        if self.opts.train {
            self.stats.push((name.to_string(), stats));
        }
        Ok(y)
    }

    /// LIF over the leading `T_s` axis of a `[T_s*B, ...]` tensor.
    fn lif(&mut self, name: &str, x: Var, v_th: Option<f64>) -> Result<Var> {
        let shape = self.g.shape(x).to_vec();
        let t_s = self.cfg.t_s;
        let rest = shape.iter().product::<usize>() / t_s;
        let seq = self.g.reshape(x, &[t_s, rest])?;
        let mut p = self.cfg.lif;
        if let Some(th) = v_th {
            p.v_th = th;
        }
        let s = lif_sequence_graph(self.g, seq, &p, self.opts.spike_mode)?;
        let out = self.g.reshape(s, &shape)?;
        if self.opts.record_spikes {
            self.spikes.push((name.to_string(), self.g.value(out).clone()));
        }
        Ok(out)
    }

    fn patch_embed(&mut self, x: Var) -> Result<Var> {
        let snn = self.cfg.pe == Component::Snn;
        let mut h = x;
        if snn {
            let e = direct_encode_graph(self.g, x, self.cfg.t_s)?;
            let s = self.g.shape(e).to_vec();
            let mut flat = vec![s[0] * s[1]];
            flat.extend_from_slice(&s[2..]);
            h = self.g.reshape(e, &flat)?;
        }
        let pad1 = [1, 1, 1];
        let stages: [(ConvGeom, Option<[usize; 3]>); 4] = [
            (ConvGeom { stride: [1, 2, 2], pad: [0, 2, 2] }, Some([1, 2, 2])),
            (ConvGeom { stride: [1, 1, 1], pad: pad1 }, Some([2, 2, 2])),
            (ConvGeom { stride: [1, 1, 1], pad: pad1 }, Some([2, 2, 2])),
            (ConvGeom { stride: [1, 2, 2], pad: pad1 }, None),
        ];
        for (i, (geom, pool)) in stages.into_iter().enumerate() {
            h = self.conv(&format!("stem.{i}.conv"), h, geom, snn && i > 0)?;
            h = self.bn(&format!("stem.{i}.bn"), h)?;
            h = match (snn, i) {
                (false, _) => self.g.relu(h)?,
                (true, 3) => h,
                (true, _) => self.lif(&format!("stem.{i}.lif"), h, None)?,
            };
            if let Some(w) = pool {
                h = self.g.maxpool3d(h, w, w)?;
            }
        }
        Ok(h)
    }

    fn encode(&mut self, tube: Var) -> Result<Var> {
        if self.cfg.pe == Component::Snn {
            return Ok(tube);
        }
        let e = direct_encode_graph(self.g, tube, self.cfg.t_s)?;
        let s = self.g.shape(e).to_vec();
        let mut flat = vec![s[0] * s[1]];
        flat.extend_from_slice(&s[2..]);
        self.g.reshape(e, &flat)
    }

    fn project(&mut self, prefix: &str, which: &str, kind: Projection, s: Var) -> Result<Var> {
        let name = format!("{prefix}.{which}");
        let h = match kind {
            Projection::Tdc => {
                let w = self.p(&format!("{name}.weight"))?;
                let y = tdc(self.g, s, w, self.cfg.tdc_theta)?;
                let fr = nonzero_fraction(self.g.value(s));
                self.record(&name, s, w, y, Some(fr), 1);
                y
            }
            Projection::Conv3d => self.conv(&name, s, ConvGeom::unit(), true)?,
            Projection::None => s,
        };
        let h = self.bn(&format!("{name}_bn"), h)?;
        self.lif(&format!("{name}_lif"), h, None)
    }

    fn mlp(&mut self, prefix: &str, s: Var) -> Result<(Var, f64)> {
        let h = self.conv(&format!("{prefix}.mlp.fc1"), s, ConvGeom::unit(), true)?;
        let h = self.bn(&format!("{prefix}.mlp.bn1"), h)?;
        let h = self.lif(&format!("{prefix}.mlp.lif"), h, None)?;
        let hidden_fr = nonzero_fraction(self.g.value(h));
        let o = self.conv(&format!("{prefix}.mlp.fc2"), h, ConvGeom::unit(), true)?;
        Ok((self.bn(&format!("{prefix}.mlp.bn2"), o)?, hidden_fr))
    }

    fn attention(&mut self, prefix: &str, s: Var) -> Result<(Var, BlockDiag<S>)> {
        let cfg = self.cfg;
        let grid = cfg.grid();
        let t_s = cfg.t_s;
        let q = self.project(&format!("{prefix}.attn"), "q", cfg.q_proj, s)?;
        let k = self.project(&format!("{prefix}.attn"), "k", cfg.k_proj, s)?;
        let v = self.project(&format!("{prefix}.attn"), "v", cfg.v_proj, s)?;
        let (q, k, v) = (
            vid2seq_graph(self.g, q, t_s)?,
            vid2seq_graph(self.g, k, t_s)?,
            vid2seq_graph(self.g, v, t_s)?,
        );
        let d = cfg.head_dim();
        let (mut vhats, mut gates, mut masks) = (vec![], vec![], vec![]);
        for h in 0..cfg.n_heads {
            let qh = self.g.narrow(q, 3, h * d, d)?;
            let kh = self.g.narrow(k, 3, h * d, d)?;
            let vh = self.g.narrow(v, 3, h * d, d)?;
            let (vhat, gate, mask) = s3a_head(self.g, qh, kh, vh, &cfg.lif, self.opts.spike_mode)?;
            vhats.push(vhat);
            gates.push(gate);
            masks.push(mask);
        }
        let vhat = self.g.concat(&vhats, 3)?;
        let gate = self.g.concat(&gates, 3)?;
        let mask = self.g.concat(&masks, 3)?;
        if self.opts.record_spikes {
            for (n, t) in [("q", q), ("k", k), ("v", v), ("gate", gate), ("vhat", vhat)] {
                self.spikes
                    .push((format!("{prefix}.attn.{n}"), self.g.value(t).clone()));
            }
        }

        // accumulate-only attention: f * N * D per timestep
        let mask_fr = nonzero_fraction(self.g.value(mask));
        let n_tok = cfg.n_tokens() as u64;
        self.layers.push(LayerRecord {
            name: format!("{prefix}.attn.mask"),
            kind: LayerKind::Snn,
            macs: n_tok * cfg.d_model as u64,
            macs_paper: n_tok * cfg.d_model as u64,
            fire_rate: Some(mask_fr),
            repeats: t_s,
        });

        let vid = seq2vid_graph(self.g, vhat, grid)?;
        let spikes = self.lif(&format!("{prefix}.attn.out_lif"), vid, Some(cfg.attn_out_v_th))?;
        let proj = self.conv(&format!("{prefix}.attn.proj"), spikes, ConvGeom::unit(), true)?;
        let out = self.bn(&format!("{prefix}.attn.proj_bn"), proj)?;

        let diag = BlockDiag {
            input_fr: nonzero_fraction(self.g.value(s)),
            q_fr: nonzero_fraction(self.g.value(q)),
            k_fr: nonzero_fraction(self.g.value(k)),
            v_fr: nonzero_fraction(self.g.value(v)),
            mask_fr,
            gate_fr: nonzero_fraction(self.g.value(gate)),
            vhat_fr: nonzero_fraction(self.g.value(vhat)),
            attn_out_fr: nonzero_fraction(self.g.value(spikes)),
            hidden_fr: 0.0,
            v: self.g.value(v).clone(),
            vhat: self.g.value(vhat).clone(),
            gate: self.g.value(gate).clone(),
        };
        Ok((out, diag))
    }

    /// `(mlp_branch, sa_branch, diag)` on already-spiking input.
    fn branches(&mut self, i: usize, s: Var) -> Result<(Var, Var, BlockDiag<S>)> {
        let prefix = format!("blocks.{i}");
        let (sa, mut diag) = self.attention(&prefix, s)?;
        let (mlp, hidden_fr) = self.mlp(&prefix, s)?;
        diag.hidden_fr = hidden_fr;
        Ok((mlp, sa, diag))
    }

    fn block(&mut self, i: usize, u: Var) -> Result<(Var, BlockDiag<S>)> {
        let cfg = self.cfg;
        let prefix = format!("blocks.{i}");
        if cfg.parallel {
            let s = self.lif(&format!("{prefix}.in_lif"), u, None)?;
            let (mlp, sa, diag) = self.branches(i, s)?;
            let a = self.g.scale(u, cfg.alpha_comb)?;
            let b = self.g.scale(mlp, cfg.beta_ff)?;
            let c = self.g.scale(sa, cfg.beta_sa)?;
            let ab = self.g.add(a, b)?;
            Ok((self.g.add(ab, c)?, diag))
        } else {
            let s = self.lif(&format!("{prefix}.in_lif"), u, None)?;
            let (sa, mut diag) = self.attention(&prefix, s)?;
            let a = self.g.scale(u, cfg.alpha_sa)?;
            let c = self.g.scale(sa, cfg.beta_sa)?;
            let uhat = self.g.add(a, c)?;
            let s2 = self.lif(&format!("{prefix}.mid_lif"), uhat, None)?;
            let (mlp, hidden_fr) = self.mlp(&prefix, s2)?;
            diag.hidden_fr = hidden_fr;
            let a = self.g.scale(uhat, cfg.alpha_ff)?;
            let b = self.g.scale(mlp, cfg.beta_ff)?;
            Ok((self.g.add(a, b)?, diag))
        }
    }

    fn head(&mut self, u: Var) -> Result<Var> {
        let cfg = self.cfg;
        let snn = cfg.head == Component::Snn;
        let t_s = cfg.t_s;
        let mut h = if snn {
            u
        } else {
            let s = self.g.shape(u).to_vec();
            let mut split = vec![t_s, s[0] / t_s];
            split.extend_from_slice(&s[1..]);
            let r = self.g.reshape(u, &split)?;
            self.g.mean_axis(r, 0)?
        };
        let geom = ConvGeom {
            stride: [1, 1, 1],
            pad: [1, 0, 0],
        };
        for i in 0..2 {
            h = self.g.upsample_time(h, 2)?;
            h = self.conv(&format!("head.{i}.conv"), h, geom, snn && i > 0)?;
            h = self.bn(&format!("head.{i}.bn"), h)?;
            h = if snn {
                self.lif(&format!("head.{i}.lif"), h, None)?
            } else {
                self.g.elu(h)?
            };
        }
        let s = self.g.shape(h).to_vec();
        let m = self.g.mean_axis(h, 4)?;
        let m = self.g.mean_axis(m, 3)?;
        let m = self.g.reshape(m, &[s[0], s[1], s[2], 1, 1])?;
        let y = self.conv("head.out", m, ConvGeom::unit(), false)?;
        let mut y = self.g.reshape(y, &[s[0], s[2]])?;
        if snn {
            let r = self.g.reshape(y, &[t_s, s[0] / t_s, s[2]])?;
            y = self.g.mean_axis(r, 0)?;
        }
        let bias = self.p("head.out.bias")?;
        let shape = self.g.shape(y).to_vec();
        let b = self.g.reshape(bias, &[1, 1])?;
        let b = self.g.expand(b, &shape)?;
        self.g.add(y, b)
    }
}

/// Network parameters plus the architecture they belong to.
#[derive(Clone, Debug)]
pub struct Model<S: Scalar> {
    config: ModelConfig,
    params: ParamStore<S>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: ModelConfig,
    dtype: String,
    params: Vec<TensorEntry>,
    buffers: Vec<TensorEntry>,
}

impl<S: Scalar> Model<S> {
    /// Fresh model with seeded fan-in uniform weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.d_model;
        let stem = [
            (d / 4, 3, [1, 5, 5]),
            (d / 2, d / 4, [3, 3, 3]),
            (d, d / 2, [3, 3, 3]),
            (d, d, [3, 3, 3]),
        ];
        for (i, (co, ci, k)) in stem.into_iter().enumerate() {
            p.insert_uniform(&format!("stem.{i}.conv.weight"), &[co, ci, k[0], k[1], k[2]], &mut rng);
            p.insert_bn(&format!("stem.{i}.bn"), co);
        }
        let hidden = config.mlp_ratio * d;
        for b in 0..config.n_blocks {
            let pre = format!("blocks.{b}.attn");
            for (which, kind) in [("q", config.q_proj), ("k", config.k_proj), ("v", config.v_proj)] {
                match kind {
                    Projection::Tdc => {
                        p.insert_uniform(&format!("{pre}.{which}.weight"), &[d, d, 3, 3, 3], &mut rng)
                    }
                    Projection::Conv3d => {
                        p.insert_uniform(&format!("{pre}.{which}.weight"), &[d, d, 1, 1, 1], &mut rng)
                    }
                    Projection::None => {}
                }
                p.insert_bn(&format!("{pre}.{which}_bn"), d);
            }
            p.insert_uniform(&format!("{pre}.proj.weight"), &[d, d, 1, 1, 1], &mut rng);
            p.insert_bn(&format!("{pre}.proj_bn"), d);
            let pre = format!("blocks.{b}.mlp");
            p.insert_uniform(&format!("{pre}.fc1.weight"), &[hidden, d, 1, 1, 1], &mut rng);
            p.insert_bn(&format!("{pre}.bn1"), hidden);
            p.insert_uniform(&format!("{pre}.fc2.weight"), &[d, hidden, 1, 1, 1], &mut rng);
            p.insert_bn(&format!("{pre}.bn2"), d);
        }
        p.insert_uniform("head.0.conv.weight", &[d, d, 3, 1, 1], &mut rng);
        p.insert_bn("head.0.bn", d);
        p.insert_uniform("head.1.conv.weight", &[d / 2, d, 3, 1, 1], &mut rng);
        p.insert_bn("head.1.bn", d / 2);
        p.insert_uniform("head.out.weight", &[1, d / 2, 1, 1, 1], &mut rng);
        p.insert_uniform_fan("head.out.bias", &[1], d / 2, &mut rng);
        Ok(Self { config, params: p })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        let [t, h, w] = self.config.input_geometry;
        if shape.len() != 5 || shape[1] != 3 || shape[2..] != [t, h, w] {
            return Err(Error::Config(format!(
                "input {shape:?} does not match configured [B, 3, {t}, {h}, {w}]"
            )));
        }
        if shape[0] == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        Ok(shape[0])
    }

    fn run(
        &self,
        g: &mut Graph<S>,
        x: Var,
        opts: ForwardOptions,
    ) -> Result<(ForwardOut<S>, Vec<(String, RunningStats)>)> {
        let batch = self.check_input(g.shape(x))?;
        let mut c = Ctx::new(g, &self.params, &self.config, opts, batch);
        let tube = c.patch_embed(x)?;
        let mut u = c.encode(tube)?;
        let mut blocks = Vec::with_capacity(self.config.n_blocks);
        for i in 0..self.config.n_blocks {
            let (next, diag) = c.block(i, u)?;
            blocks.push(diag);
            u = next;
        }
        let y = c.head(u)?;
        let out = ForwardOut {
            y,
            params: c.vars,
            diag: Diagnostics {
                grid: self.config.grid(),
                batch,
                blocks,
                layers: c.layers,
                spikes: c.spikes,
            },
        };
        Ok((out, c.stats))
    }

    /// Forward pass of a batch `[B, 3, T, H, W]` on `g`. In train mode the
    /// batchnorm running statistics are updated.
    pub fn forward(&mut self, g: &mut Graph<S>, x: Var, opts: ForwardOptions) -> Result<ForwardOut<S>> {
        let (out, stats) = self.run(g, x, opts)?;
        for (name, st) in stats {
            *self.params.bn_stats_mut(&name)? = st;
        }
        Ok(out)
    }

    /// Eval-mode prediction for a batch `[B, 3, T, H, W]`; returns `[B, T]`.
    pub fn predict_batch(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Diagnostics<S>)> {
        self.predict_with(x, ForwardOptions::eval())
    }

    pub fn predict_with(
        &self,
        x: &Tensor<S>,
        opts: ForwardOptions,
    ) -> Result<(Tensor<S>, Diagnostics<S>)> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let (out, _) = self.run(&mut g, xv, opts)?;
        Ok((g.value(out.y).clone(), out.diag))
    }

    /// Eval-mode pulse wave for one preprocessed clip `[3, T, H, W]`.
    pub fn predict(&self, clip: &Tensor<S>) -> Result<(Vec<f64>, Diagnostics<S>)> {
        let mut s = vec![1];
        s.extend_from_slice(clip.shape());
        let (y, diag) = self.predict_batch(&clip.reshape(&s)?)?;
        Ok((y.to_f64_vec(), diag))
    }

    fn with_ctx<T>(
        &self,
        batch: usize,
        f: impl FnOnce(&mut Ctx<'_, S>) -> Result<T>,
    ) -> Result<T> {
        let mut g = Graph::inference();
        let mut c = Ctx::new(&mut g, &self.params, &self.config, ForwardOptions::eval(), batch);
        f(&mut c)
    }

    /// Eval-mode patch embedding of one clip `[3, T, H, W]` (conventional
    /// stem only) to `[D, T/4, H/32, W/32]`.
    pub fn patch_embed(&self, clip: &Tensor<S>) -> Result<Tensor<S>> {
        if self.config.pe != Component::Ann {
            return Err(Error::Config("patch_embed tensor view needs a conventional stem".into()));
        }
        let mut s = vec![1];
        s.extend_from_slice(clip.shape());
        self.check_input(&s)?;
        let x = clip.reshape(&s)?;
        self.with_ctx(1, |c| {
            let xv = c.g.constant(x);
            let y = c.patch_embed(xv)?;
            let v = c.g.value(y);
            v.reshape(&v.shape()[1..])
        })
    }

    fn block_input(&self, u: &Tensor<S>) -> Result<()> {
        let d = self.config.d_model;
        let grid = self.config.grid();
        let s = u.shape();
        if s.len() != 5 || s[0] != self.config.t_s || s[1] != d || s[2..] != grid {
            return Err(Error::Shape(format!(
                "block input {s:?} must be [{}, {d}, {}, {}, {}]",
                self.config.t_s, grid[0], grid[1], grid[2]
            )));
        }
        Ok(())
    }

    /// Eval-mode transformer block `i` on `[T_s, D, T', H', W']`.
    pub fn transformer_block(&self, i: usize, u: &Tensor<S>) -> Result<Tensor<S>> {
        self.block_input(u)?;
        self.with_ctx(1, |c| {
            let uv = c.g.constant(u.clone());
            let (y, _) = c.block(i, uv)?;
            Ok(c.g.value(y).clone())
        })
    }

    /// The two parallel branches of block `i`, each evaluated on `SN(u)`:
    /// `(MLP(SN(u)), SA(SN(u)))`.
    pub fn block_branches(&self, i: usize, u: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        self.block_input(u)?;
        let prefix = format!("blocks.{i}");
        let mlp = self.with_ctx(1, |c| {
            let uv = c.g.constant(u.clone());
            let s = c.lif(&format!("{prefix}.in_lif"), uv, None)?;
            let (m, _) = c.mlp(&prefix, s)?;
            Ok(c.g.value(m).clone())
        })?;
        let sa = self.with_ctx(1, |c| {
            let uv = c.g.constant(u.clone());
            let s = c.lif(&format!("{prefix}.in_lif"), uv, None)?;
            let (a, _) = c.attention(&prefix, s)?;
            Ok(c.g.value(a).clone())
        })?;
        Ok((mlp, sa))
    }

    /// Q, K, V spikes `[T_s, N, D]` of block `i` for input spikes
    /// `[T_s, D, T', H', W']`, plus the MACs spent on the V path.
    pub fn project_qkv(
        &self,
        i: usize,
        s: &Tensor<S>,
    ) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>, u64)> {
        self.block_input(s)?;
        let pre = format!("blocks.{i}.attn");
        let cfg = self.config.clone();
        self.with_ctx(1, |c| {
            let sv = c.g.constant(s.clone());
            let mut out = Vec::new();
            let mut v_macs = 0;
            for (which, kind) in [("q", cfg.q_proj), ("k", cfg.k_proj), ("v", cfg.v_proj)] {
                let before = c.layers.len();
                let p = c.project(&pre, which, kind, sv)?;
                if which == "v" {
                    v_macs = c.layers[before..].iter().map(|l| l.macs).sum();
                }
                let seq = vid2seq_graph(c.g, p, cfg.t_s)?;
                let v = c.g.value(seq);
                let sh = v.shape();
                out.push(v.reshape(&[sh[0], sh[2], sh[3]])?);
            }
            let v = out.pop().expect("three projections");
            let k = out.pop().expect("three projections");
            let q = out.pop().expect("three projections");
            Ok((q, k, v, v_macs))
        })
    }

    /// Multi-head attention of block `i` on `[T_s, N, D]` spikes, returning
    /// the projected video-layout output and `V_hat`.
    pub fn mhs3a(
        &self,
        i: usize,
        q: &Tensor<S>,
        k: &Tensor<S>,
        v: &Tensor<S>,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let cfg = self.config.clone();
        let n = cfg.n_tokens();
        for t in [q, k, v] {
            if t.shape() != [cfg.t_s, n, cfg.d_model] {
                return Err(Error::dim(1, format!("expected [{}, {n}, {}], got {:?}", cfg.t_s, cfg.d_model, t.shape())));
            }
        }
        let pre = format!("blocks.{i}.attn");
        self.with_ctx(1, |c| {
            let lift = |t: &Tensor<S>| t.reshape(&[cfg.t_s, 1, n, cfg.d_model]);
            let (qv, kv, vv) = (
                c.g.constant(lift(q)?),
                c.g.constant(lift(k)?),
                c.g.constant(lift(v)?),
            );
            let d = cfg.head_dim();
            let mut heads = Vec::new();
            for h in 0..cfg.n_heads {
                let qh = c.g.narrow(qv, 3, h * d, d)?;
                let kh = c.g.narrow(kv, 3, h * d, d)?;
                let vh = c.g.narrow(vv, 3, h * d, d)?;
                heads.push(s3a_head(c.g, qh, kh, vh, &cfg.lif, SpikeMode::Hard)?.0);
            }
            let vhat = c.g.concat(&heads, 3)?;
            let vid = seq2vid_graph(c.g, vhat, cfg.grid())?;
            let sp = c.lif(&format!("{pre}.out_lif"), vid, Some(cfg.attn_out_v_th))?;
            let proj = c.conv(&format!("{pre}.proj"), sp, ConvGeom::unit(), true)?;
            let out = c.bn(&format!("{pre}.proj_bn"), proj)?;
            let vh = c.g.value(vhat).reshape(&[cfg.t_s, n, cfg.d_model])?;
            Ok((c.g.value(out).clone(), vh))
        })
    }

    /// Write `model.json` and `weights.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let (params, buffers) = self.params.manifest();
        let m = Manifest {
            config: self.config.clone(),
            dtype: S::DTYPE.to_string(),
            params,
            buffers,
        };
        params::write_files(dir, &serde_json::to_string_pretty(&m)?, &self.params.write_blob()?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("model.json"))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::CorruptCheckpoint(format!("model.json: {e}")))?;
        if m.dtype != S::DTYPE {
            return Err(Error::CorruptCheckpoint(format!(
                "checkpoint holds {} parameters, requested {}",
                m.dtype,
                S::DTYPE
            )));
        }
        let blob = fs::read(dir.join("weights.bin"))?;
        let mut model = Self::new(m.config, 0)?;
        model.params.read_blob(&m.params, &m.buffers, &blob)?;
        Ok(model)
    }
}
