//! Pulse post-processing (Butterworth bandpass, spectral heart rate) and the
//! evaluation metrics.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::video::PulseWave;

pub const BAND_LOW_HZ: f64 = 0.75;
pub const BAND_HIGH_HZ: f64 = 2.5;
pub const BUTTER_ORDER: usize = 2;

/// Transfer function coefficients, `a[0] == 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Iir {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
}

fn poly(roots: &[Complex64]) -> Vec<Complex64> {
    let mut c = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); c.len() + 1];
        for (i, &v) in c.iter().enumerate() {
            next[i] += v;
            next[i + 1] -= v * r;
        }
        c = next;
    }
    c
}

/// Digital Butterworth bandpass of the given prototype order, designed from
/// the analog prototype with prewarped band edges and the bilinear map.
pub fn butter_bandpass(order: usize, low_hz: f64, high_hz: f64, fps: f64) -> Result<Iir> {
    let nyq = fps / 2.0;
    if !(0.0 < low_hz && low_hz < high_hz && high_hz < nyq) {
        return Err(Error::SamplingRate(format!(
            "band [{low_hz}, {high_hz}] Hz not inside (0, {nyq}) at {fps} fps"
        )));
    }
    // normalised digital frequencies with sample rate 2
    let fs = 2.0;
    let warp = |f: f64| 2.0 * fs * (PI * (f / nyq) / fs).tan();
    let (w1, w2) = (warp(low_hz), warp(high_hz));
    let bw = w2 - w1;
    let wo = (w1 * w2).sqrt();

    let proto: Vec<Complex64> = (1..=order)
        .map(|k| {
            let th = PI * (2 * k + order - 1) as f64 / (2 * order) as f64;
            Complex64::new(th.cos(), th.sin())
        })
        .collect();
    let mut poles = Vec::with_capacity(2 * order);
    for &p in &proto {
        let pl = p * bw / 2.0;
        let disc = (pl * pl - wo * wo).sqrt();
        poles.push(pl + disc);
        poles.push(pl - disc);
    }
    let mut zeros = vec![Complex64::new(0.0, 0.0); order];
    let mut gain = bw.powi(order as i32);

    let fs2 = Complex64::new(2.0 * fs, 0.0);
    let num: Complex64 = zeros.iter().map(|&z| fs2 - z).product();
    let den: Complex64 = poles.iter().map(|&p| fs2 - p).product();
    gain *= (num / den).re;
    for z in &mut zeros {
        *z = (fs2 + *z) / (fs2 - *z);
    }
    for p in &mut poles {
        *p = (fs2 + *p) / (fs2 - *p);
    }
    zeros.extend(std::iter::repeat_n(Complex64::new(-1.0, 0.0), poles.len() - zeros.len()));

    let b = poly(&zeros).into_iter().map(|c| c.re * gain).collect();
    let a = poly(&poles).into_iter().map(|c| c.re).collect();
    Ok(Iir { b, a })
}

/// Direct form II transposed filter with initial state `zi`.
fn lfilter(f: &Iir, x: &[f64], zi: &[f64]) -> Vec<f64> {
    let n = f.a.len().max(f.b.len());
    let mut z = zi.to_vec();
    z.resize(n - 1, 0.0);
    let coef = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
    x.iter()
        .map(|&xi| {
            let y = coef(&f.b, 0) * xi + z[0];
            for i in 0..n - 1 {
                let carry = if i + 1 < n - 1 { z[i + 1] } else { 0.0 };
                z[i] = coef(&f.b, i + 1) * xi + carry - coef(&f.a, i + 1) * y;
            }
            y
        })
        .collect()
}

/// Steady-state initial conditions for a unit step.
fn lfilter_zi(f: &Iir) -> Result<Vec<f64>> {
    let n = f.a.len().max(f.b.len());
    let coef = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
    let m = n - 1;
    let mut lhs = DMatrix::<f64>::identity(m, m);
    // subtract the transposed companion matrix of a
    for j in 0..m {
        lhs[(j, 0)] += coef(&f.a, j + 1);
    }
    for i in 0..m.saturating_sub(1) {
        lhs[(i, i + 1)] -= 1.0;
    }
    let rhs = DVector::from_iterator(
        m,
        (1..n).map(|i| coef(&f.b, i) - coef(&f.a, i) * coef(&f.b, 0)),
    );
    lhs.lu()
        .solve(&rhs)
        .map(|v| v.iter().copied().collect())
        .ok_or_else(|| Error::arg("singular filter initial-condition system"))
}

/// Zero-phase forward-backward filtering with odd reflection padding of
/// `3 * max(len(a), len(b))` samples.
pub fn filtfilt(f: &Iir, x: &[f64]) -> Result<Vec<f64>> {
    let pad = 3 * f.a.len().max(f.b.len());
    if x.len() <= pad {
        return Err(Error::arg(format!(
            "signal of {} samples too short for padding {pad}",
            x.len()
        )));
    }
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let zi = lfilter_zi(f)?;
    let scaled = |s: f64| zi.iter().map(|v| v * s).collect::<Vec<_>>();
    let mut y = lfilter(f, &ext, &scaled(ext[0]));
    y.reverse();
    let mut y = lfilter(f, &y, &scaled(y[0]));
    y.reverse();
    Ok(y[pad..pad + n].to_vec())
}

/// 0.75-2.5 Hz zero-phase Butterworth bandpass.
pub fn bandpass(wave: &PulseWave) -> Result<PulseWave> {
    if wave.fps <= 5.0 {
        return Err(Error::SamplingRate(format!(
            "bandpass needs fps > 5, got {}",
            wave.fps
        )));
    }
    let f = butter_bandpass(BUTTER_ORDER, BAND_LOW_HZ, BAND_HIGH_HZ, wave.fps)?;
    PulseWave::new(filtfilt(&f, &wave.samples)?, wave.fps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HrEstimate {
    pub bpm: f64,
    /// `(frequency Hz, power)` for bins inside the pulse band.
    pub spectrum: Vec<(f64, f64)>,
}

/// Index of the largest value; ties resolve to the earliest index.
fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Heart rate from the periodogram peak inside the pulse band.
pub fn estimate_hr(wave: &PulseWave) -> Result<HrEstimate> {
    let n = wave.len();
    if (n as f64) < 2.0 * wave.fps {
        return Err(Error::arg(format!(
            "need at least 2 s of signal, got {n} samples at {} fps",
            wave.fps
        )));
    }
    // 0.5 bpm spacing: fps / nfft <= 1/120 Hz
    let nfft = ((120.0 * wave.fps).ceil() as usize).max(n).next_power_of_two();
    let mean = wave.samples.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex64> = wave
        .samples
        .iter()
        .map(|&v| Complex64::new(v - mean, 0.0))
        .collect();
    buf.resize(nfft, Complex64::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(nfft).process(&mut buf);

    let spectrum: Vec<(f64, f64)> = (0..=nfft / 2)
        .map(|k| (k as f64 * wave.fps / nfft as f64, buf[k].norm_sqr() / n as f64))
        .filter(|&(f, _)| (BAND_LOW_HZ..=BAND_HIGH_HZ).contains(&f))
        .collect();
    let powers: Vec<f64> = spectrum.iter().map(|&(_, p)| p).collect();
    let k = argmax_first(&powers).ok_or_else(|| Error::arg("empty pulse band"))?;
    Ok(HrEstimate {
        bpm: 60.0 * spectrum[k].0,
        spectrum,
    })
}

/// Heart rate of a predicted first-difference wave: integrate, remove the
/// linear trend, bandpass, then take the spectral peak.
pub fn hr_from_diff_wave(diff: &[f64], fps: f64) -> Result<f64> {
    Ok(estimate_hr(&pulse_from_diff_wave(diff, fps)?)?.bpm)
}

/// Integrates a differentiated wave, removes the linear trend and band-limits it.
pub fn pulse_from_diff_wave(diff: &[f64], fps: f64) -> Result<PulseWave> {
    let mut acc = 0.0;
    let mut level: Vec<f64> = diff
        .iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect();
    detrend_linear(&mut level);
    bandpass(&PulseWave::new(level, fps)?)
}

/// Subtract the least-squares line.
pub fn detrend_linear(x: &mut [f64]) {
    let n = x.len() as f64;
    if x.len() < 2 {
        return;
    }
    let tm = (n - 1.0) / 2.0;
    let xm = x.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &v) in x.iter().enumerate() {
        let dt = i as f64 - tm;
        sxy += dt * (v - xm);
        sxx += dt * dt;
    }
    let slope = sxy / sxx;
    for (i, v) in x.iter_mut().enumerate() {
        *v -= xm + slope * (i as f64 - tm);
    }
}

/// Pearson correlation; errors when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::arg("correlation needs at least two samples"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::DegenerateSignal("constant input to correlation".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub mape: f64,
    /// `None` when fewer than two samples or either side is constant.
    pub rho: Option<f64>,
    pub n: usize,
}

pub fn metrics(pred: &[f64], gt: &[f64]) -> Result<MetricReport> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::arg(format!(
            "metrics need equal non-empty lists, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    if gt.contains(&0.0) {
        return Err(Error::arg("ground-truth rate of zero in MAPE"));
    }
    let n = pred.len() as f64;
    let mae = pred.iter().zip(gt).map(|(p, g)| (g - p).abs()).sum::<f64>() / n;
    let mape = 100.0 * pred.iter().zip(gt).map(|(p, g)| ((g - p) / g).abs()).sum::<f64>() / n;
    let rho = pearson(pred, gt).ok();
    Ok(MetricReport {
        mae,
        mape,
        rho,
        n: pred.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    /// `((pred + gt) / 2, pred - gt)` per sample.
    pub rows: Vec<(f64, f64)>,
    pub bias: f64,
    pub std: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Bland-Altman agreement data; `std` is the population std of differences.
pub fn bland_altman(pred: &[f64], gt: &[f64]) -> Result<BlandAltman> {
    if pred.len() != gt.len() || pred.len() < 2 {
        return Err(Error::arg("bland_altman needs equal lists of length >= 2"));
    }
    let rows: Vec<(f64, f64)> = pred.iter().zip(gt).map(|(&p, &g)| ((p + g) / 2.0, p - g)).collect();
    let n = rows.len() as f64;
    let bias = rows.iter().map(|r| r.1).sum::<f64>() / n;
    let std = (rows.iter().map(|r| (r.1 - bias).powi(2)).sum::<f64>() / n).sqrt();
    Ok(BlandAltman {
        rows,
        bias,
        std,
        lower: bias - 1.96 * std,
        upper: bias + 1.96 * std,
    })
}
