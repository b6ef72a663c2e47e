use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikeattn::attention_maps::{box_cells, peak_alignment, region_stats, sfr_map, write_map, MapSource};
use spikeattn::energy::{self, CostModel, CountMode, EnergyReport};
use spikeattn::signal::{self, bandpass, estimate_hr, hr_from_diff_wave};
use spikeattn::training::{self, write_history_csv, Sample, TrainOutcome};
use spikeattn::video::{
    prepare_input, read_clip_dir, read_f32_file, synthesize, write_clip_dir, write_f32_file, PulseWave, StoredClip,
    SynthSpec,
};
use spikeattn::{Model, Scalar};

use crate::config::{Dtype, RunConfig};
use crate::Usage;

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    p.as_deref().ok_or_else(|| anyhow!(Usage(format!("missing --{flag}"))))
}

fn checkpoint_dtype(dir: &Path) -> anyhow::Result<Dtype> {
    let text = fs::read_to_string(dir.join("model.json")).with_context(|| format!("reading checkpoint {}", dir.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text).context("parsing model.json")?;
    match v.get("dtype").and_then(|d| d.as_str()) {
        Some("f32") => Ok(Dtype::F32),
        Some("f64") => Ok(Dtype::F64),
        other => bail!("checkpoint dtype {other:?} not recognised"),
    }
}

/// Run `$f::<S>` with the scalar type matching `$dtype`.
macro_rules! with_dtype {
    ($dtype:expr, $f:ident ( $($arg:expr),* )) => {
        match $dtype {
            Dtype::F32 => $f::<f32>($($arg),*),
            Dtype::F64 => $f::<f64>($($arg),*),
        }
    };
}

// ---- synth ----

pub fn synth(cfg: &RunConfig) -> anyhow::Result<()> {
    let out = need(&cfg.out, "out")?;
    let s = &cfg.synth;
    if s.count == 0 {
        bail!(Usage("--count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    for i in 0..s.count {
        let hr = match s.hr_range {
            Some([lo, hi]) if hi > lo => rng.gen_range(lo..hi),
            Some([lo, _]) => lo,
            None => s.hr_bpm,
        };
        let spec = SynthSpec {
            hr_bpm: hr,
            face_box: s.face_box(),
            noise_std: s.noise_std,
            illumination_drift: s.illumination_drift,
            seed: s.seed + i as u64,
        };
        let (clip, wave) = synthesize(&spec, s.frames, s.size, s.size, s.fps)?;
        let dir = if s.count == 1 { out.to_path_buf() } else { out.join(format!("clip_{i:03}")) };
        write_clip_dir(&dir, &clip, Some(&wave), Some(hr), Some(spec.face_box))?;
        println!("{}: {} frames {}x{} at {} fps, hr {hr:.2} bpm", dir.display(), s.frames, s.size, s.size, s.fps);
    }
    Ok(())
}

// ---- data ----

/// A clip directory, or a directory of clip directories in name order.
pub fn clip_dirs(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if dir.join("meta.json").exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no clips under {}", dir.display());
    }
    Ok(dirs)
}

fn stored_hr(c: &StoredClip) -> anyhow::Result<f64> {
    if let Some(hr) = c.meta.hr {
        return Ok(hr);
    }
    let w = c.wave.as_ref().ok_or_else(|| anyhow!("clip has neither hr nor wave.f32"))?;
    Ok(estimate_hr(&bandpass(w)?)?.bpm)
}

fn load_samples<S: Scalar>(dirs: &[PathBuf]) -> anyhow::Result<Vec<Sample<S>>> {
    dirs.iter()
        .map(|d| {
            let c = read_clip_dir(d).with_context(|| format!("reading {}", d.display()))?;
            let wave = c.wave.as_ref().ok_or_else(|| anyhow!("{} has no wave.f32 label", d.display()))?;
            Ok(Sample::from_clip(&c.clip, wave, stored_hr(&c)?)?)
        })
        .collect()
}

// ---- train / sweep ----

pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub energy_per_frame: f64,
}

fn train_typed<S: Scalar>(cfg: &RunConfig, dirs: &[PathBuf], out: &Path) -> anyhow::Result<TrainSummary> {
    let data = load_samples::<S>(dirs)?;
    let mut model_cfg = cfg.model.clone();
    let s = data[0].input.shape();
    model_cfg.input_geometry = [s[1], s[2], s[3]];
    let model = Model::<S>::new(model_cfg, cfg.train.seed)?;
    eprintln!("training {} parameters on {} clips", model.param_count(), data.len());
    let TrainOutcome { best, best_epoch, last, history } = training::train(model, &data, &cfg.train, |r| {
        eprintln!(
            "epoch {:>3}  l_time {:.4}  l_ce {:.4}  l_ld {:.4}  beta {:.3}  val_mae {:.3}",
            r.epoch, r.l_time, r.l_ce, r.l_ld, r.beta, r.val_mae
        )
    })?;
    fs::create_dir_all(out)?;
    best.save(out)?;
    last.save(&out.join("last"))?;
    write_history_csv(&out.join("history.csv"), &history)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let report = energy::audit(&best, &data[0].input, CountMode::Exact, CostModel::default())?;
    report.write(out)?;
    let best_val_mae = history[best_epoch - 1].val_mae;
    println!(
        "{}: best epoch {best_epoch}, val MAE {best_val_mae:.3} bpm, {:.4} mJ per frame",
        out.display(),
        report.per_frame.energy * 1e3
    );
    Ok(TrainSummary { best_epoch, best_val_mae, energy_per_frame: report.per_frame.energy })
}

pub fn train(cfg: &RunConfig) -> anyhow::Result<()> {
    let dirs = clip_dirs(need(&cfg.data, "data")?)?;
    let out = need(&cfg.out, "out")?;
    with_dtype!(cfg.dtype, train_typed(cfg, &dirs, out))?;
    Ok(())
}

/// One training run per value of `axis`, each in its own directory.
pub fn sweep(cfg: &RunConfig, axis: &str, values: &[String]) -> anyhow::Result<()> {
    let dirs = clip_dirs(need(&cfg.data, "data")?)?;
    let out = need(&cfg.out, "out")?;
    let key = if axis.contains('.') { axis.to_string() } else { format!("model.{axis}") };
    let mut rows = vec!["value,best_epoch,val_mae,energy_per_frame_j".to_string()];
    for v in values {
        let mut c = cfg.clone();
        c.set(&key, v)?;
        let dir = out.join(format!("{axis}-{v}"));
        eprintln!("sweep {key} = {v}");
        let s = with_dtype!(c.dtype, train_typed(&c, &dirs, &dir))?;
        rows.push(format!("{v},{},{},{}", s.best_epoch, s.best_val_mae, s.energy_per_frame));
    }
    fs::write(out.join("sweep.csv"), rows.join("\n") + "\n")?;
    Ok(())
}

// ---- infer ----

fn infer_typed<S: Scalar>(ckpt: &Path, clip: &StoredClip, out: &Path) -> anyhow::Result<(Vec<f64>, f64)> {
    let model = Model::<S>::load(ckpt)?;
    let x = prepare_input(&clip.clip)?.cast::<S>();
    let (y, _) = model.predict(&x)?;
    fs::create_dir_all(out)?;
    write_f32_file(&out.join("pred_wave.f32"), y.iter().map(|&v| v as f32))?;
    let bpm = hr_from_diff_wave(&y, clip.clip.fps())?;
    Ok((y, bpm))
}

pub fn infer(cfg: &RunConfig) -> anyhow::Result<()> {
    let ckpt = need(&cfg.ckpt, "ckpt")?;
    let clip = read_clip_dir(need(&cfg.clip, "clip")?)?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let (y, bpm) = with_dtype!(checkpoint_dtype(ckpt)?, infer_typed(ckpt, &clip, &out))?;
    match clip.meta.hr {
        Some(gt) => println!("hr: {bpm:.2} bpm (ground truth {gt:.2}); {} samples", y.len()),
        None => println!("hr: {bpm:.2} bpm; {} samples", y.len()),
    }
    Ok(())
}

// ---- metrics ----

pub fn metrics(pred: &[PathBuf], gt: &[PathBuf], fps: f64, pred_is_pulse: bool, out: &Path) -> anyhow::Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        bail!(Usage(format!("need matching --pred/--gt lists, got {} and {}", pred.len(), gt.len())));
    }
    let wave = |p: &Path| -> anyhow::Result<Vec<f64>> {
        Ok(read_f32_file(p).with_context(|| format!("reading {}", p.display()))?.into_iter().map(f64::from).collect())
    };
    let mut p_hr = vec![];
    let mut g_hr = vec![];
    for (p, g) in pred.iter().zip(gt) {
        let w = wave(p)?;
        p_hr.push(if pred_is_pulse {
            estimate_hr(&bandpass(&PulseWave::new(w, fps)?)?)?.bpm
        } else {
            hr_from_diff_wave(&w, fps)?
        });
        g_hr.push(if g.is_dir() {
            stored_hr(&read_clip_dir(g)?)?
        } else {
            estimate_hr(&bandpass(&PulseWave::new(wave(g)?, fps)?)?)?.bpm
        });
    }
    let report = signal::metrics(&p_hr, &g_hr)?;
    let ba = signal::bland_altman(&p_hr, &g_hr)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    let mut csv = String::from("pred_bpm,gt_bpm,mean,diff\n");
    for ((p, g), (m, d)) in p_hr.iter().zip(&g_hr).zip(&ba.rows) {
        csv += &format!("{p},{g},{m},{d}\n");
    }
    fs::write(out.join("bland_altman.csv"), csv)?;
    let rho = report.rho.map_or("n/a".to_string(), |r| format!("{r:.4}"));
    println!("MAE {:.3} bpm, MAPE {:.3}%, rho {rho}, n {}", report.mae, report.mape, report.n);
    println!("Bland-Altman bias {:.3}, limits [{:.3}, {:.3}]", ba.bias, ba.lower, ba.upper);
    Ok(())
}

// ---- energy ----

pub fn energy_given(flops: f64, sops: f64, cost: &CostModel) -> f64 {
    let e = energy::energy(flops, sops, cost);
    println!("energy: {:.2} mJ ({:.4} mJ = {} pJ x {flops:e} MACs + {} pJ x {sops:e} SOPs)", e * 1e3, e * 1e3, cost.e_mac * 1e12, cost.e_ac * 1e12);
    e
}

fn audit_typed<S: Scalar>(ckpt: &Path, clip: &StoredClip, mode: CountMode, cost: CostModel) -> anyhow::Result<EnergyReport> {
    let model = Model::<S>::load(ckpt)?;
    let x = prepare_input(&clip.clip)?.cast::<S>();
    Ok(energy::audit(&model, &x, mode, cost)?)
}

pub fn energy_audit(cfg: &RunConfig, mode: CountMode, cost: CostModel) -> anyhow::Result<()> {
    let ckpt = need(&cfg.ckpt, "ckpt")?;
    let clip = read_clip_dir(need(&cfg.clip, "clip")?)?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let report = with_dtype!(checkpoint_dtype(ckpt)?, audit_typed(ckpt, &clip, mode, cost))?;
    report.write(&out)?;
    let (c, f) = (&report.per_clip, &report.per_frame);
    println!("per clip : {:.4e} FLOPs, {:.4e} SOPs, {:.4} mJ", c.flops, c.sops, c.energy * 1e3);
    println!("per frame: {:.4e} FLOPs, {:.4e} SOPs, {:.4} mJ ({} frames)", f.flops, f.sops, f.energy * 1e3, report.frames);
    Ok(())
}

// ---- attnmap ----

fn attnmap_typed<S: Scalar>(
    ckpt: &Path,
    clip: &StoredClip,
    block: Option<usize>,
    source: MapSource,
    thr: Option<f64>,
    out: &Path,
) -> anyhow::Result<()> {
    let model = Model::<S>::load(ckpt)?;
    let x = prepare_input(&clip.clip)?.cast::<S>();
    let (y, d) = model.predict(&x)?;
    let b = block.unwrap_or(d.blocks.len() - 1);
    let diag = d
        .blocks
        .get(b)
        .ok_or_else(|| anyhow!(Usage(format!("--block {b} out of range (model has {})", d.blocks.len()))))?;
    let t = match source {
        MapSource::V => &diag.v,
        MapSource::Vhat => &diag.vhat,
    };
    let sh = t.shape().to_vec();
    let map = sfr_map(&t.reshape(&[sh[0], sh[2], sh[3]])?, d.grid, source, b)?;
    write_map(out, &map, thr)?;
    println!("{} frames of {} cells written to {}", map.frames(), map.cells(), out.display());
    if let Some(fb) = clip.meta.face_box {
        let mask = box_cells(&fb, [clip.clip.height(), clip.clip.width()], [d.grid[1], d.grid[2]])?;
        match region_stats(&map, &mask) {
            Ok(r) => println!("inside {:.4}, outside {:.4}, ratio {:.3}", r.inside, r.outside, r.ratio),
            Err(e) => println!("region stats unavailable: {e}"),
        }
    }
    match peak_alignment(&map, &PulseWave::new(y, clip.clip.fps())?) {
        Ok(rho) => println!("peak alignment with the output wave: {rho:.4}"),
        Err(e) => println!("peak alignment unavailable: {e}"),
    }
    Ok(())
}

pub fn attnmap(cfg: &RunConfig, block: Option<usize>, source: MapSource, thr: Option<f64>) -> anyhow::Result<()> {
    let ckpt = need(&cfg.ckpt, "ckpt")?;
    let clip = read_clip_dir(need(&cfg.clip, "clip")?)?;
    let out = need(&cfg.out, "out")?;
    with_dtype!(checkpoint_dtype(ckpt)?, attnmap_typed(ckpt, &clip, block, source, thr, out))
}
