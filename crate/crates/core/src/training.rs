//! Composite loss, the exponential frequency-loss schedule, an Adam
//! optimizer with decoupled weight decay, and the training loop.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::scalar::Scalar;
use crate::signal;
use crate::tensor::Tensor;
use crate::video::{self, PulseWave, VideoClip};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_time: f64,
    pub beta0: f64,
    pub eta: f64,
    pub epoch_current: usize,
    pub epoch_total: usize,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta0 > 0.0) || !(self.eta >= 1.0) {
            return Err(Error::arg(format!(
                "need beta0 > 0 and eta >= 1, got {} and {}",
                self.beta0, self.eta
            )));
        }
        if self.epoch_total == 0 || self.epoch_current == 0 {
            return Err(Error::arg("epochs are counted from 1"));
        }
        Ok(())
    }
}

/// `beta0 * eta^((epoch_current - 1) / epoch_total)`.
pub fn beta_schedule(w: &LossWeights) -> Result<f64> {
    w.validate()?;
    let e = (w.epoch_current as f64 - 1.0) / w.epoch_total as f64;
    Ok(w.beta0 * w.eta.powf(e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Inclusive heart-rate range of the 1-bpm spectral bins.
    pub hr_bin_range: [usize; 2],
    pub label_sigma: f64,
    pub alpha_time: f64,
    pub beta0: f64,
    pub eta: f64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            weight_decay: 5e-5,
            batch_size: 4,
            epochs: 10,
            seed: 0,
            hr_bin_range: [40, 180],
            label_sigma: 1.0,
            alpha_time: 0.1,
            beta0: 1.0,
            eta: 5.0,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        let [lo, hi] = self.hr_bin_range;
        if lo == 0 || hi <= lo {
            return Err(Error::Config(format!("bad hr_bin_range [{lo}, {hi}]")));
        }
        if !(self.label_sigma > 0.0) {
            return Err(Error::Config("label_sigma must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn weights(&self, epoch: usize) -> LossWeights {
        LossWeights {
            alpha_time: self.alpha_time,
            beta0: self.beta0,
            eta: self.eta,
            epoch_current: epoch,
            epoch_total: self.epochs,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.hr_bin_range[1] - self.hr_bin_range[0] + 1
    }
}

/// Row-centred copy of `[B, T]`.
fn centre_rows<S: Scalar>(g: &mut Graph<S>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let sum = g.sum_axis_keep(x, 1)?;
    let mean = g.scale(sum, 1.0 / s[1] as f64)?;
    let wide = g.expand(mean, &s)?;
    g.sub(x, wide)
}

/// `1 - pearson(pred_b, gt_b)` averaged over the batch; `pred` and `gt` are `[B, T]`.
pub fn loss_time_graph<S: Scalar>(g: &mut Graph<S>, pred: Var, gt: &Tensor<S>) -> Result<Var> {
    let s = g.shape(pred).to_vec();
    if s.len() != 2 || gt.shape() != s.as_slice() || s[1] < 2 {
        return Err(Error::Shape(format!("pred {s:?} vs gt {:?}", gt.shape())));
    }
    let gv = g.constant(gt.clone());
    let gc = centre_rows(g, gv)?;
    for row in g.value(gc).data().chunks(s[1]) {
        if row.iter().all(|&v| v == S::zero()) {
            return Err(Error::DegenerateSignal("constant ground-truth wave".into()));
        }
    }
    let pc = centre_rows(g, pred)?;
    let prod = g.mul(pc, gc)?;
    let num = g.sum_axis_keep(prod, 1)?;
    let pp = g.square(pc)?;
    let pp = g.sum_axis_keep(pp, 1)?;
    let gg = g.square(gc)?;
    let gg = g.sum_axis_keep(gg, 1)?;
    let den = g.mul(pp, gg)?;
    let den = g.add_scalar(den, 1e-20)?;
    let den = g.sqrt(den)?;
    let rho = g.div(num, den)?;
    let m = g.mean(rho)?;
    let neg = g.neg(m)?;
    g.add_scalar(neg, 1.0)
}

/// Hann-windowed DFT basis at 1-bpm steps: `(cos, sin)`, each `[T, K]`.
fn dft_basis<S: Scalar>(t: usize, fps: f64, range: [usize; 2]) -> Result<(Tensor<S>, Tensor<S>)> {
    let k = range[1] - range[0] + 1;
    let (mut c, mut s) = (Vec::with_capacity(t * k), Vec::with_capacity(t * k));
    for n in 0..t {
        let w = if t > 1 {
            0.5 - 0.5 * (2.0 * PI * n as f64 / (t - 1) as f64).cos()
        } else {
            1.0
        };
        for b in 0..k {
            let f = (range[0] + b) as f64 / 60.0;
            let ph = 2.0 * PI * f * n as f64 / fps;
            c.push(S::of(w * ph.cos()));
            s.push(S::of(w * ph.sin()));
        }
    }
    Ok((Tensor::new(&[t, k], c)?, Tensor::new(&[t, k], s)?))
}

/// Gaussian label distribution over the bins, normalised to sum 1.
pub fn label_distribution(gt_bin: usize, n_bins: usize, sigma: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n_bins)
        .map(|k| {
            let d = k as f64 - gt_bin as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

pub fn hr_bin(hr: f64, range: [usize; 2]) -> Result<usize> {
    let (lo, hi) = (range[0] as f64, range[1] as f64);
    if !(lo..=hi).contains(&hr) {
        return Err(Error::arg(format!("heart rate {hr} outside [{lo}, {hi}] bpm")));
    }
    Ok((hr - lo).round() as usize)
}

/// Normalised power at each 1-bpm bin, `[B, K]`: the logits of the
/// frequency losses.
pub fn spectrum_logits_graph<S: Scalar>(
    g: &mut Graph<S>,
    pred: Var,
    fps: f64,
    range: [usize; 2],
) -> Result<Var> {
    let s = g.shape(pred).to_vec();
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::Shape(format!("pred must be [B, T>=2], got {s:?}")));
    }
    let (c, sn) = dft_basis::<S>(s[1], fps, range)?;
    let pc = centre_rows(g, pred)?;
    let cv = g.constant(c);
    let sv = g.constant(sn);
    let re = g.matmul(pc, cv)?;
    let im = g.matmul(pc, sv)?;
    let re2 = g.square(re)?;
    let im2 = g.square(im)?;
    let power = g.add(re2, im2)?;
    let total = g.sum_axis_keep(power, 1)?;
    let total = g.add_scalar(total, 1e-20)?;
    let shape = g.shape(power).to_vec();
    let total = g.expand(total, &shape)?;
    g.div(power, total)
}

/// Row-wise log-softmax of `[B, K]`; the max shift is a constant.
fn log_softmax<S: Scalar>(g: &mut Graph<S>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let mut shift = Vec::with_capacity(s[0] * s[1]);
    for row in g.value(x).data().chunks(s[1]) {
        let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        shift.extend(std::iter::repeat(m).take(s[1]));
    }
    let sh = g.constant(Tensor::new(&s, shift)?);
    let z = g.sub(x, sh)?;
    let e = g.exp(z)?;
    let se = g.sum_axis_keep(e, 1)?;
    let lse = g.ln(se)?;
    let lse = g.expand(lse, &s)?;
    g.sub(z, lse)
}

/// `(cross-entropy, label-distribution KL)` averaged over the batch.
pub fn loss_freq_graph<S: Scalar>(
    g: &mut Graph<S>,
    pred: Var,
    fps: f64,
    gt_hr: &[f64],
    cfg: &TrainConfig,
) -> Result<(Var, Var)> {
    let b = g.shape(pred)[0];
    if gt_hr.len() != b {
        return Err(Error::Shape(format!("{} heart rates for batch {b}", gt_hr.len())));
    }
    let logits = spectrum_logits_graph(g, pred, fps, cfg.hr_bin_range)?;
    freq_losses_from_logits(g, logits, gt_hr, cfg)
}

/// `(cross-entropy, label-distribution KL)` of `[B, K]` bin logits.
pub fn freq_losses_from_logits<S: Scalar>(
    g: &mut Graph<S>,
    logits: Var,
    gt_hr: &[f64],
    cfg: &TrainConfig,
) -> Result<(Var, Var)> {
    let s = g.shape(logits).to_vec();
    let (b, k) = (s[0], cfg.n_bins());
    if s.len() != 2 || s[1] != k || gt_hr.len() != b {
        return Err(Error::Shape(format!(
            "logits {s:?} do not match {} heart rates over {k} bins",
            gt_hr.len()
        )));
    }
    let logp = log_softmax(g, logits)?;
    let mut onehot = vec![0.0; b * k];
    let mut label = vec![0.0; b * k];
    let mut label_entropy = 0.0;
    for (i, &hr) in gt_hr.iter().enumerate() {
        let bin = hr_bin(hr, cfg.hr_bin_range)?;
        onehot[i * k + bin] = 1.0;
        for (j, p) in label_distribution(bin, k, cfg.label_sigma).into_iter().enumerate() {
            // vanishing label mass contributes nothing to the divergence
            if p >= 1e-15 {
                label[i * k + j] = p;
                label_entropy += p * p.ln();
            }
        }
    }
    let oh = g.constant(Tensor::from_f64(&[b, k], &onehot)?);
    let picked = g.mul(oh, logp)?;
    let ce = g.sum(picked)?;
    let ce = g.scale(ce, -1.0 / b as f64)?;
    let lab = g.constant(Tensor::from_f64(&[b, k], &label)?);
    let cross = g.mul(lab, logp)?;
    let cross = g.sum(cross)?;
    let ld = g.scale(cross, -1.0 / b as f64)?;
    let ld = g.add_scalar(ld, label_entropy / b as f64)?;
    Ok((ce, ld))
}

/// `1 - pearson(pred, gt)`.
pub fn loss_time(pred: &PulseWave, gt: &PulseWave) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() < 2 {
        return Err(Error::arg("loss_time needs equal lengths >= 2"));
    }
    let mut g = Graph::<f64>::inference();
    let p = g.constant(Tensor::from_f64(&[1, pred.len()], &pred.samples)?);
    let gt = Tensor::from_f64(&[1, gt.len()], &gt.samples)?;
    if gt.data().iter().all(|&v| v == gt.data()[0]) {
        return Err(Error::DegenerateSignal("constant ground-truth wave".into()));
    }
    if p_const(&pred.samples) {
        return Err(Error::DegenerateSignal("constant predicted wave".into()));
    }
    let l = loss_time_graph(&mut g, p, &gt)?;
    Ok(g.value(l).item()?)
}

fn p_const(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

/// `(ce, ld)` of a single predicted wave against a heart rate.
pub fn loss_freq(pred: &PulseWave, gt_hr: f64, cfg: &TrainConfig) -> Result<(f64, f64)> {
    let mut g = Graph::<f64>::inference();
    let p = g.constant(Tensor::from_f64(&[1, pred.len()], &pred.samples)?);
    let (ce, ld) = loss_freq_graph(&mut g, p, pred.fps, &[gt_hr], cfg)?;
    Ok((g.value(ce).item()?, g.value(ld).item()?))
}

/// Total loss `alpha * L_time + beta * (L_CE + L_LD)` on the tape plus the
/// component values.
pub fn overall_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    pred: Var,
    gt: &Tensor<S>,
    gt_hr: &[f64],
    fps: f64,
    cfg: &TrainConfig,
    beta: f64,
) -> Result<(Var, [f64; 3])> {
    let lt = loss_time_graph(g, pred, gt)?;
    let (ce, ld) = loss_freq_graph(g, pred, fps, gt_hr, cfg)?;
    let a = g.scale(lt, cfg.alpha_time)?;
    let f = g.add(ce, ld)?;
    let f = g.scale(f, beta)?;
    let total = g.add(a, f)?;
    let parts = [
        g.value(lt).item()?.as_f64(),
        g.value(ce).item()?.as_f64(),
        g.value(ld).item()?.as_f64(),
    ];
    Ok((total, parts))
}

/// Adam with decoupled weight decay; moments kept in f64.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step<S: Scalar>(&mut self, params: &mut [Tensor<S>], grads: &[Option<Tensor<S>>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj.as_f64();
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
                let mut x = w.as_f64();
                x -= self.lr * self.weight_decay * x;
                x -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                *w = S::of(x);
            }
        }
    }
}

/// One preprocessed training example.
#[derive(Clone, Debug)]
pub struct Sample<S: Scalar> {
    /// DiffNormalized frames `[3, T, H, W]`.
    pub input: Tensor<S>,
    /// DiffNormalized label, length `T`.
    pub label: Vec<f64>,
    pub hr: f64,
    pub fps: f64,
}

impl<S: Scalar> Sample<S> {
    pub fn from_clip(clip: &VideoClip, wave: &PulseWave, hr: f64) -> Result<Self> {
        Ok(Self {
            input: video::prepare_input(clip)?.cast(),
            label: video::prepare_label(wave)?,
            hr,
            fps: clip.fps(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_time: f64,
    pub l_ce: f64,
    pub l_ld: f64,
    pub beta: f64,
    pub val_mae: f64,
}

pub struct TrainOutcome<S: Scalar> {
    /// Parameters of the epoch with the lowest validation MAE (the last
    /// epoch when there is no validation set).
    pub best: Model<S>,
    pub best_epoch: usize,
    pub last: Model<S>,
    pub history: Vec<EpochRecord>,
}

/// Seeded partition into `(train, validation)` index lists.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

fn stack_batch<S: Scalar>(samples: &[&Sample<S>]) -> Result<(Tensor<S>, Tensor<S>, Vec<f64>)> {
    let inputs: Vec<&Tensor<S>> = samples.iter().map(|s| &s.input).collect();
    let x = Tensor::stack(&inputs)?;
    let t = samples[0].label.len();
    let mut lab = Vec::with_capacity(samples.len() * t);
    for s in samples {
        if s.label.len() != t {
            return Err(Error::Shape("labels of different lengths in one batch".into()));
        }
        lab.extend_from_slice(&s.label);
    }
    let hr = samples.iter().map(|s| s.hr).collect();
    Ok((x, Tensor::from_f64(&[samples.len(), t], &lab)?, hr))
}

/// Predicted heart rate of each sample (eval mode).
pub fn predict_hrs<S: Scalar>(model: &Model<S>, samples: &[Sample<S>]) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            let (y, _) = model.predict(&s.input)?;
            signal::hr_from_diff_wave(&y, s.fps)
        })
        .collect()
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::Diverged(format!(
            "non-finite value from {op} at epoch {epoch}, step {step}"
        )),
        other => other,
    }
}

/// Train on `dataset` after holding out `cfg.val_fraction` of it for
/// validation. `on_epoch` sees each history row as it is produced.
pub fn train<S: Scalar>(
    mut model: Model<S>,
    dataset: &[Sample<S>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::arg("empty dataset"));
    }
    let fps = dataset[0].fps;
    if dataset.iter().any(|s| s.fps != fps) {
        return Err(Error::arg("dataset mixes frame rates"));
    }
    let (train_idx, val_idx) = split_indices(dataset.len(), cfg.val_fraction, cfg.seed);
    let val: Vec<Sample<S>> = val_idx.iter().map(|&i| dataset[i].clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model<S>)> = None;

    for epoch in 1..=cfg.epochs {
        let beta = beta_schedule(&cfg.weights(epoch))?;
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        let mut steps = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample<S>> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (x, gt, hrs) = stack_batch(&batch)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let run = |g: &mut Graph<S>, model: &mut Model<S>| -> Result<_> {
                let out = model.forward(g, xv, ForwardOptions::train())?;
                let (loss, parts) = overall_loss_graph(g, out.y, &gt, &hrs, fps, cfg, beta)?;
                let loss_value = g.value(loss).item()?.as_f64();
                if !loss_value.is_finite() {
                    return Err(Error::NonFinite("loss".into()));
                }
                let mut grads = g.backward(loss)?;
                let gv: Vec<Option<Tensor<S>>> =
                    out.params.iter().map(|&p| grads.take(p)).collect();
                Ok((parts, gv))
            };
            let (parts, grads) = run(&mut g, &mut model).map_err(|e| diverged(epoch, step, e))?;
            opt.step(model.params_mut().values_mut(), &grads);
            for (s, p) in sums.iter_mut().zip(parts) {
                *s += p;
            }
            steps += 1;
        }
        let val_mae = if val.is_empty() {
            f64::NAN
        } else {
            let pred = predict_hrs(&model, &val)?;
            pred.iter().zip(&val).map(|(p, s)| (p - s.hr).abs()).sum::<f64>() / val.len() as f64
        };
        let rec = EpochRecord {
            epoch,
            l_time: sums[0] / steps as f64,
            l_ce: sums[1] / steps as f64,
            l_ld: sums[2] / steps as f64,
            beta,
            val_mae,
        };
        on_epoch(&rec);
        history.push(rec);
        let better = match &best {
            None => true,
            Some((m, _, _)) => val_mae < *m,
        };
        if better || val.is_empty() {
            best = Some((val_mae, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        history,
    })
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "epoch,l_time,l_ce,l_ld,beta,val_mae")?;
    for r in history {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.epoch, r.l_time, r.l_ce, r.l_ld, r.beta, r.val_mae
        )?;
    }
    Ok(())
}
