//! Spike-firing-rate maps over V and V_hat, threshold truncation, and the
//! face-region and pulse-timing statistics computed from them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::signal::pearson;
use crate::tensor::Tensor;
use crate::video::{FaceBox, PulseWave};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapSource {
    V,
    Vhat,
}

/// Firing rate per token, laid out as frames `T'` by cells `H' * W'`.
#[derive(Clone, Debug, PartialEq)]
pub struct SfrMap {
    pub values: Vec<f64>,
    pub grid: [usize; 3],
    pub source: MapSource,
    pub block_index: usize,
}

impl SfrMap {
    pub fn frames(&self) -> usize {
        self.grid[0]
    }

    pub fn cells(&self) -> usize {
        self.grid[1] * self.grid[2]
    }

    pub fn at(&self, frame: usize, cell: usize) -> f64 {
        self.values[frame * self.cells() + cell]
    }

    pub fn frame(&self, frame: usize) -> &[f64] {
        let c = self.cells();
        &self.values[frame * c..(frame + 1) * c]
    }
}

/// Mean of `[T_s, N, D]` spikes over spike time and channels, per token.
pub fn sfr_map<S: Scalar>(
    spikes: &Tensor<S>,
    origin: [usize; 3],
    source: MapSource,
    block_index: usize,
) -> Result<SfrMap> {
    let s = spikes.shape();
    if s.len() != 3 {
        return Err(Error::dim(0, format!("expected [T_s, N, D], got {s:?}")));
    }
    let (t_s, n, d) = (s[0], s[1], s[2]);
    if n != origin.iter().product::<usize>() {
        return Err(Error::dim(1, format!("{n} tokens do not fill grid {origin:?}")));
    }
    if t_s * d == 0 {
        return Err(Error::dim(0, "empty spike or channel axis"));
    }
    let mut values = vec![0.0; n];
    let x = spikes.data();
    for t in 0..t_s {
        for (tok, v) in values.iter_mut().enumerate() {
            let row = &x[(t * n + tok) * d..][..d];
            *v += row.iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    let scale = 1.0 / (t_s * d) as f64;
    for v in &mut values {
        *v *= scale;
    }
    Ok(SfrMap {
        values,
        grid: origin,
        source,
        block_index,
    })
}

/// 1 where the rate is at least `thr`.
pub fn threshold_map(map: &SfrMap, thr: f64) -> Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&thr) {
        return Err(Error::arg(format!("threshold {thr} outside [0, 1]")));
    }
    Ok(map.values.iter().map(|&v| u8::from(v >= thr)).collect())
}

/// Token cells whose centre pixel falls inside the face box.
pub fn box_cells(face: &FaceBox, frame_hw: [usize; 2], grid_hw: [usize; 2]) -> Result<Vec<bool>> {
    let [fh, fw] = frame_hw;
    let [gh, gw] = grid_hw;
    if !face.fits(fh, fw) || gh == 0 || gw == 0 {
        return Err(Error::arg(format!("face box {face:?} outside {fh}x{fw} frame")));
    }
    let (ch, cw) = (fh as f64 / gh as f64, fw as f64 / gw as f64);
    let mut out = Vec::with_capacity(gh * gw);
    for r in 0..gh {
        for c in 0..gw {
            let (y, x) = ((r as f64 + 0.5) * ch, (c as f64 + 0.5) * cw);
            let inside = y >= face.y as f64
                && y < (face.y + face.h) as f64
                && x >= face.x as f64
                && x < (face.x + face.w) as f64;
            out.push(inside);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    /// Per-frame means inside and outside the box.
    pub inside_per_frame: Vec<f64>,
    pub outside_per_frame: Vec<f64>,
    pub inside: f64,
    pub outside: f64,
    /// `inside / outside`; infinite when the outside is silent and the inside is not.
    pub ratio: f64,
}

pub fn region_stats(map: &SfrMap, mask: &[bool]) -> Result<RegionStats> {
    if mask.len() != map.cells() {
        return Err(Error::dim(1, format!("mask of {} cells for {} cells", mask.len(), map.cells())));
    }
    let n_in = mask.iter().filter(|&&m| m).count();
    if n_in == 0 || n_in == mask.len() {
        return Err(Error::arg("face region and background must both be non-empty"));
    }
    let n_out = mask.len() - n_in;
    let (mut ins, mut outs) = (Vec::new(), Vec::new());
    for f in 0..map.frames() {
        let row = map.frame(f);
        let (mut a, mut b) = (0.0, 0.0);
        for (&v, &m) in row.iter().zip(mask) {
            if m {
                a += v;
            } else {
                b += v;
            }
        }
        ins.push(a / n_in as f64);
        outs.push(b / n_out as f64);
    }
    let inside = ins.iter().sum::<f64>() / ins.len() as f64;
    let outside = outs.iter().sum::<f64>() / outs.len() as f64;
    let ratio = if outside > 0.0 {
        inside / outside
    } else if inside > 0.0 {
        f64::INFINITY
    } else {
        1.0
    };
    Ok(RegionStats {
        inside_per_frame: ins,
        outside_per_frame: outs,
        inside,
        outside,
        ratio,
    })
}

/// Mean pooling by `factor` along time.
pub fn pool_wave(samples: &[f64], factor: usize) -> Vec<f64> {
    samples
        .chunks_exact(factor)
        .map(|c| c.iter().sum::<f64>() / factor as f64)
        .collect()
}

/// Pearson correlation between the per-frame mean rate and the wave pooled
/// down to the map's frame rate.
pub fn peak_alignment(map: &SfrMap, wave: &PulseWave) -> Result<f64> {
    let frames = map.frames();
    if frames == 0 || !wave.len().is_multiple_of(frames) {
        return Err(Error::dim(0, format!(
            "wave of {} samples does not pool onto {frames} frames",
            wave.len()
        )));
    }
    let pooled = pool_wave(&wave.samples, wave.len() / frames);
    let means: Vec<f64> = (0..frames)
        .map(|f| map.frame(f).iter().sum::<f64>() / map.cells() as f64)
        .collect();
    pearson(&means, &pooled)
}

/// One binary PGM per frame (`frame_000.pgm`, ...) plus `map.csv`.
pub fn write_map(dir: &Path, map: &SfrMap, thr: Option<f64>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let [_, h, w] = map.grid;
    let mask = thr.map(|t| threshold_map(map, t)).transpose()?;
    for f in 0..map.frames() {
        let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
        for c in 0..map.cells() {
            let v = match &mask {
                Some(m) => f64::from(m[f * map.cells() + c]),
                None => map.at(f, c),
            };
            buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        fs::write(dir.join(format!("frame_{f:03}.pgm")), buf)?;
    }
    let mut csv = String::from("frame,row,col,value\n");
    for f in 0..map.frames() {
        for c in 0..map.cells() {
            writeln!(csv, "{f},{},{},{}", c / w, c % w, map.at(f, c)).expect("string write");
        }
    }
    fs::write(dir.join("map.csv"), csv)?;
    Ok(())
}
