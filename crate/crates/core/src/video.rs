//! Clip containers, DiffNormalized preprocessing, the synthetic pulse video
//! generator and the on-disk clip layout.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guard added to DiffNormalized denominators and used as the std-skip cutoff.
pub const DIFF_EPS: f64 = 1e-7;
/// Pulse amplitude of the synthetic generator.
pub const SYNTH_AMPLITUDE: f64 = 0.02;

/// RGB clip `[3, T, H, W]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Tensor<f32>,
    fps: f64,
}

impl VideoClip {
    pub fn new(frames: Tensor<f32>, fps: f64) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[0] != 3 {
            return Err(Error::Shape(format!("clip must be [3,T,H,W], got {s:?}")));
        }
        if s[1] < 2 {
            return Err(Error::arg("clip needs at least two frames"));
        }
        if !(fps > 0.0) {
            return Err(Error::arg(format!("fps must be > 0, got {fps}")));
        }
        if frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::arg("clip values must lie in [0, 1]"));
        }
        Ok(Self { frames, fps })
    }

    pub fn frames(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }
}

/// Pulse signal sampled at the clip frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct PulseWave {
    pub samples: Vec<f64>,
    pub fps: f64,
}

impl PulseWave {
    pub fn new(samples: Vec<f64>, fps: f64) -> Result<Self> {
        if !(fps > 0.0) {
            return Err(Error::arg(format!("fps must be > 0, got {fps}")));
        }
        Ok(Self { samples, fps })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Face rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl FaceBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.y && row < self.y + self.h && col >= self.x && col < self.x + self.w
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= width && self.y + self.h <= height
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub hr_bpm: f64,
    pub face_box: FaceBox,
    pub noise_std: f64,
    pub illumination_drift: f64,
    pub seed: u64,
}

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        return 0.0;
    }
    let mean = sum / n as f64;
    (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt()
}

/// Normalised frame differences `[3, T-1, H, W]`.
pub fn diff_normalize(clip: &VideoClip) -> Result<Tensor<f32>> {
    let s = clip.frames.shape();
    let (t, hw) = (s[1], s[2] * s[3]);
    if t < 2 {
        return Err(Error::arg("diff_normalize needs at least two frames"));
    }
    let x = clip.frames.data();
    let mut d = Vec::with_capacity(3 * (t - 1) * hw);
    for c in 0..3 {
        for f in 0..t - 1 {
            let a = &x[(c * t + f) * hw..][..hw];
            let b = &x[(c * t + f + 1) * hw..][..hw];
            for (&p, &q) in a.iter().zip(b) {
                let (p, q) = (p as f64, q as f64);
                d.push((q - p) / (q + p + DIFF_EPS));
            }
        }
    }
    let sd = population_std(d.iter().copied());
    if sd >= DIFF_EPS {
        for v in &mut d {
            *v /= sd;
        }
    }
    Tensor::new(
        &[3, t - 1, s[2], s[3]],
        d.into_iter().map(|v| v as f32).collect(),
    )
}

/// First difference of the label divided by its population std.
pub fn diff_normalize_label(wave: &PulseWave) -> Result<Vec<f64>> {
    if wave.len() < 2 {
        return Err(Error::arg("diff_normalize_label needs at least two samples"));
    }
    let mut d: Vec<f64> = wave.samples.windows(2).map(|w| w[1] - w[0]).collect();
    let sd = population_std(d.iter().copied());
    if sd >= DIFF_EPS {
        for v in &mut d {
            *v /= sd;
        }
    }
    Ok(d)
}

/// Model input for a clip: DiffNormalized frames with a trailing zero frame
/// so the temporal length stays `T`.
pub fn prepare_input(clip: &VideoClip) -> Result<Tensor<f32>> {
    let d = diff_normalize(clip)?;
    let s = d.shape().to_vec();
    let zero = Tensor::zeros(&[3, 1, s[2], s[3]]);
    Tensor::concat(&[&d, &zero], 1)
}

/// Training target for a wave: DiffNormalized label padded back to length `T`.
pub fn prepare_label(wave: &PulseWave) -> Result<Vec<f64>> {
    let mut d = diff_normalize_label(wave)?;
    d.push(0.0);
    Ok(d)
}

/// `A (sin(2 pi f t/fps) + 0.3 sin(4 pi f t/fps))`, `f = hr/60`.
pub fn pulse_signal(hr_bpm: f64, frames: usize, fps: f64) -> Vec<f64> {
    let f = hr_bpm / 60.0;
    (0..frames)
        .map(|t| {
            let ph = 2.0 * PI * f * t as f64 / fps;
            SYNTH_AMPLITUDE * (ph.sin() + 0.3 * (2.0 * ph).sin())
        })
        .collect()
}

/// Deterministic pulse-modulated video of a static textured face.
pub fn synthesize(
    spec: &SynthSpec,
    frames: usize,
    height: usize,
    width: usize,
    fps: f64,
) -> Result<(VideoClip, PulseWave)> {
    if !(40.0..=180.0).contains(&spec.hr_bpm) {
        return Err(Error::arg(format!("hr_bpm {} outside [40, 180]", spec.hr_bpm)));
    }
    if !spec.face_box.fits(height, width) {
        return Err(Error::arg(format!(
            "face box {:?} outside {height}x{width} frame",
            spec.face_box
        )));
    }
    if frames < 2 {
        return Err(Error::arg("need at least two frames"));
    }
    if spec.noise_std < 0.0 || spec.illumination_drift < 0.0 {
        return Err(Error::arg("noise and drift must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let hw = height * width;
    let fb = spec.face_box;

    // static texture: dim background, skin-toned face with a soft vignette
    let skin = [0.72, 0.52, 0.42];
    let bg = [0.22, 0.24, 0.28];
    let (cy, cx) = (
        fb.y as f64 + fb.h as f64 / 2.0,
        fb.x as f64 + fb.w as f64 / 2.0,
    );
    let mut texture = vec![0f64; 3 * hw];
    for c in 0..3 {
        for r in 0..height {
            for q in 0..width {
                let jitter: f64 = rng.gen_range(-0.03..0.03);
                let v = if fb.contains(r, q) {
                    let dy = (r as f64 + 0.5 - cy) / fb.h as f64;
                    let dx = (q as f64 + 0.5 - cx) / fb.w as f64;
                    skin[c] * (1.0 - 0.25 * (dx * dx + dy * dy))
                } else {
                    bg[c]
                };
                texture[c * hw + r * width + q] = v + jitter;
            }
        }
    }
    let drift_phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let drift_period = 10.0 * fps;
    let noise = Normal::new(0.0, spec.noise_std.max(0.0))
        .map_err(|e| Error::arg(format!("noise distribution: {e}")))?;
    let pulse = pulse_signal(spec.hr_bpm, frames, fps);

    let mut data = vec![0f32; 3 * frames * hw];
    for c in 0..3 {
        for t in 0..frames {
            let drift = spec.illumination_drift
                * (2.0 * PI * t as f64 / drift_period + drift_phase).sin();
            for r in 0..height {
                for q in 0..width {
                    let mut v = texture[c * hw + r * width + q] + drift;
                    if fb.contains(r, q) {
                        v += pulse[t];
                    }
                    if spec.noise_std > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    data[(c * frames + t) * hw + r * width + q] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    let clip = VideoClip::new(Tensor::new(&[3, frames, height, width], data)?, fps)?;
    Ok((clip, PulseWave::new(pulse, fps)?))
}

/// Aligned fixed-length segments of a clip and its wave.
pub fn window(
    clip: &VideoClip,
    wave: &PulseWave,
    length: usize,
    stride: usize,
) -> Result<Vec<(VideoClip, PulseWave)>> {
    let t = clip.len();
    if length > t || length < 2 {
        return Err(Error::arg(format!("window length {length} invalid for {t} frames")));
    }
    if stride == 0 {
        return Err(Error::arg("window stride must be >= 1"));
    }
    if wave.len() != t {
        return Err(Error::Shape(format!("wave has {} samples for {t} frames", wave.len())));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + length <= t {
        let frames = clip.frames.narrow(1, start, length)?;
        out.push((
            VideoClip::new(frames, clip.fps)?,
            PulseWave::new(wave.samples[start..start + length].to_vec(), wave.fps)?,
        ));
        start += stride;
    }
    Ok(out)
}

/// `meta.json` of a stored clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub fps: f64,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face_box: Option<FaceBox>,
}

pub fn write_f32_file(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let mut buf = Vec::new();
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_f32_file(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::arg(format!("{} is not a whole number of f32", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Write `meta.json`, `frames.f32` and (optionally) `wave.f32` into `dir`.
pub fn write_clip_dir(
    dir: &Path,
    clip: &VideoClip,
    wave: Option<&PulseWave>,
    hr: Option<f64>,
    face_box: Option<FaceBox>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = ClipMeta {
        fps: clip.fps,
        shape: clip.frames.shape().to_vec(),
        hr,
        face_box,
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    write_f32_file(&dir.join("frames.f32"), clip.frames.data().iter().copied())?;
    if let Some(w) = wave {
        write_f32_file(&dir.join("wave.f32"), w.samples.iter().map(|&v| v as f32))?;
    }
    Ok(())
}

pub struct StoredClip {
    pub meta: ClipMeta,
    pub clip: VideoClip,
    pub wave: Option<PulseWave>,
}

pub fn read_clip_dir(dir: &Path) -> Result<StoredClip> {
    let meta: ClipMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let frames = read_f32_file(&dir.join("frames.f32"))?;
    let clip = VideoClip::new(Tensor::new(&meta.shape, frames)?, meta.fps)?;
    let wave_path = dir.join("wave.f32");
    let wave = if wave_path.exists() {
        let w = read_f32_file(&wave_path)?;
        if w.len() != clip.len() {
            return Err(Error::Shape(format!(
                "wave has {} samples for {} frames",
                w.len(),
                clip.len()
            )));
        }
        Some(PulseWave::new(w.into_iter().map(f64::from).collect(), meta.fps)?)
    } else {
        None
    };
    Ok(StoredClip { meta, clip, wave })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixel_clip(vals: &[f32]) -> VideoClip {
        let t = vals.len();
        let mut d = Vec::new();
        for _ in 0..3 {
            d.extend_from_slice(vals);
        }
        VideoClip::new(Tensor::new(&[3, t, 1, 1], d).unwrap(), 30.0).unwrap()
    }

    fn spec(seed: u64) -> SynthSpec {
        SynthSpec {
            hr_bpm: 72.0,
            face_box: FaceBox { x: 8, y: 8, w: 16, h: 16 },
            noise_std: 0.01,
            illumination_drift: 0.02,
            seed,
        }
    }

    #[test]
    fn constant_clip_gives_zeros() {
        let d = diff_normalize(&pixel_clip(&[0.4, 0.4, 0.4])).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn three_frame_hand_values() {
        let d = diff_normalize(&pixel_clip(&[0.1, 0.2, 0.3])).unwrap();
        assert_eq!(d.shape(), &[3, 2, 1, 1]);
        assert!((d.data()[0] - 5.0).abs() < 1e-4, "{:?}", d.data());
        assert!((d.data()[1] - 3.0).abs() < 1e-4);
    }

    #[test]
    fn scale_invariance() {
        let a = diff_normalize(&pixel_clip(&[0.1, 0.25, 0.2, 0.4])).unwrap();
        let b = diff_normalize(&pixel_clip(&[0.2, 0.5, 0.4, 0.8])).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-4);
    }

    #[test]
    fn single_frame_rejected() {
        let t = Tensor::<f32>::zeros(&[3, 1, 2, 2]);
        assert!(VideoClip::new(t, 30.0).is_err());
    }

    #[test]
    fn label_hand_values() {
        let w = PulseWave::new(vec![0.0, 1.0, 0.0, 1.0], 30.0).unwrap();
        let d = diff_normalize_label(&w).unwrap();
        for (v, e) in d.iter().zip([1.0607, -1.0607, 1.0607]) {
            assert!((v - e).abs() < 1e-4);
        }
        let ramp = PulseWave::new(vec![0.0, 1.0, 2.0, 3.0], 30.0).unwrap();
        assert_eq!(diff_normalize_label(&ramp).unwrap(), vec![1.0, 1.0, 1.0]);
        let flat = PulseWave::new(vec![2.0; 4], 30.0).unwrap();
        assert_eq!(diff_normalize_label(&flat).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn synth_is_deterministic() {
        let (a, wa) = synthesize(&spec(3), 20, 32, 32, 30.0).unwrap();
        let (b, wb) = synthesize(&spec(3), 20, 32, 32, 30.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(wa, wb);
        let (c, _) = synthesize(&spec(4), 20, 32, 32, 30.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synth_background_static_without_noise() {
        let s = SynthSpec {
            noise_std: 0.0,
            illumination_drift: 0.0,
            ..spec(1)
        };
        let (clip, _) = synthesize(&s, 30, 32, 32, 30.0).unwrap();
        let f = clip.frames();
        for c in 0..3 {
            for t in 1..30 {
                assert_eq!(f.at(&[c, t, 0, 0]), f.at(&[c, 0, 0, 0]));
                assert_eq!(f.at(&[c, t, 31, 5]), f.at(&[c, 0, 31, 5]));
            }
        }
    }

    #[test]
    fn synth_rejects_bad_box_and_hr() {
        let mut s = spec(1);
        s.face_box = FaceBox { x: 20, y: 0, w: 16, h: 8 };
        assert!(synthesize(&s, 10, 32, 32, 30.0).is_err());
        let mut s = spec(1);
        s.hr_bpm = 200.0;
        assert!(synthesize(&s, 10, 32, 32, 30.0).is_err());
    }

    #[test]
    fn window_counts() {
        let (clip, wave) = synthesize(&spec(2), 320, 32, 32, 30.0).unwrap();
        assert_eq!(window(&clip, &wave, 160, 160).unwrap().len(), 2);
        assert_eq!(window(&clip, &wave, 320, 1).unwrap().len(), 1);
        let w = window(&clip, &wave, 160, 80).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[1].0.frames().at(&[1, 0, 3, 3]), clip.frames().at(&[1, 80, 3, 3]));
        assert_eq!(w[1].1.samples[0], wave.samples[80]);
        assert!(window(&clip, &wave, 321, 1).is_err());
    }

    #[test]
    fn prepared_lengths() {
        let (clip, wave) = synthesize(&spec(2), 16, 32, 32, 30.0).unwrap();
        assert_eq!(prepare_input(&clip).unwrap().shape(), &[3, 16, 32, 32]);
        assert_eq!(prepare_label(&wave).unwrap().len(), 16);
    }

    #[test]
    fn clip_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (clip, wave) = synthesize(&spec(2), 8, 32, 32, 30.0).unwrap();
        write_clip_dir(dir.path(), &clip, Some(&wave), Some(72.0), Some(spec(2).face_box)).unwrap();
        let back = read_clip_dir(dir.path()).unwrap();
        assert_eq!(back.clip, clip);
        assert_eq!(back.meta.hr, Some(72.0));
        let w = back.wave.unwrap();
        for (a, b) in w.samples.iter().zip(&wave.samples) {
            assert!((a - b).abs() < 1e-7);
        }
    }
}
