mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use spikeattn::attention_maps::MapSource;
use spikeattn::energy::{CostModel, CountMode};

use config::{Dtype, RunConfig};

/// Bad invocation: exit code 1 rather than 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(name = "spikeattn", version, about = "Spiking-attention pulse-wave estimation: synthesis, training, inference, metrics, energy audit and attention maps")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set model.t_s=8 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for synthesis and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Default)]
struct Paths {
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic clips (meta.json, frames.f32, wave.f32).
    Synth {
        #[arg(long)]
        hr: Option<f64>,
        /// Draw each clip's rate uniformly from LO,HI.
        #[arg(long, value_parser = parse_range, value_name = "LO,HI")]
        hr_range: Option<[f64; 2]>,
        #[arg(long)]
        frames: Option<usize>,
        /// Square frame side in pixels.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        fps: Option<f64>,
        /// Number of clips; more than one writes clip_000, clip_001, ...
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[command(flatten)]
        paths: Paths,
    },
    /// Train on a directory of clips; writes a checkpoint, history.csv and an energy report.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, value_enum)]
        dtype: Option<DtypeArg>,
        #[command(flatten)]
        paths: Paths,
    },
    /// Predict the pulse wave of one clip; writes pred_wave.f32 and prints the heart rate.
    Infer {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        clip: Option<PathBuf>,
        #[command(flatten)]
        paths: Paths,
    },
    /// Heart-rate metrics from predicted and ground-truth waves; writes report.json and bland_altman.csv.
    Metrics {
        /// Predicted wave files (f32), comma separated or repeated.
        #[arg(long, value_delimiter = ',', required = true)]
        pred: Vec<PathBuf>,
        /// Ground-truth wave files or clip directories, paired with --pred.
        #[arg(long, value_delimiter = ',', required = true)]
        gt: Vec<PathBuf>,
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
        /// `diff` for raw model output, `pulse` for an already integrated wave.
        #[arg(long, value_enum, default_value_t = PredKind::Diff)]
        pred_kind: PredKind,
        #[command(flatten)]
        paths: Paths,
    },
    /// Energy from given FLOPs/SOPs, or a per-layer audit of a checkpoint on a clip.
    Energy {
        #[arg(long, requires = "sops")]
        flops: Option<f64>,
        #[arg(long, requires = "flops")]
        sops: Option<f64>,
        #[arg(long, conflicts_with = "flops")]
        ckpt: Option<PathBuf>,
        #[arg(long, conflicts_with = "flops")]
        clip: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ModeArg::Exact)]
        mode: ModeArg,
        /// Energy per MAC in pJ.
        #[arg(long, default_value_t = 4.6)]
        e_mac_pj: f64,
        /// Energy per accumulate in pJ.
        #[arg(long, default_value_t = 0.9)]
        e_ac_pj: f64,
        #[command(flatten)]
        paths: Paths,
    },
    /// Spike-firing-rate attention map of one block; writes PGM frames and map.csv.
    Attnmap {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        clip: Option<PathBuf>,
        /// Block index (default: last).
        #[arg(long)]
        block: Option<usize>,
        #[arg(long, value_enum, default_value_t = SourceArg::Vhat)]
        source: SourceArg,
        /// Binarize the PGM frames at this firing rate.
        #[arg(long)]
        thr: Option<f64>,
        #[command(flatten)]
        paths: Paths,
    },
    /// Train once per value of a config axis, e.g. --axis t_s --values 1,2,4,8,16.
    Sweep {
        /// Model key (t_s, n_blocks, parallel, q_proj, pe, ...) or a dotted config key.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        paths: Paths,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum PredKind {
    Diff,
    Pulse,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Exact,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    V,
    Vhat,
}

fn parse_range(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [lo, hi] = parts[..] else {
        return Err(format!("expected LO,HI, got `{s}`"));
    };
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    let (lo, hi) = (num(lo)?, num(hi)?);
    if hi < lo {
        return Err(format!("range {lo},{hi} is reversed"));
    }
    Ok([lo, hi])
}

fn set<T: serde::Serialize>(cfg: &mut RunConfig, key: &str, v: Option<T>) -> anyhow::Result<()> {
    if let Some(v) = v {
        cfg.set_value(key, serde_json::to_value(v)?)?;
    }
    Ok(())
}

fn set_path(slot: &mut Option<PathBuf>, v: Option<PathBuf>) {
    if v.is_some() {
        *slot = v;
    }
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    for s in &cli.set {
        cfg.apply(s)?;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.synth.seed = seed;
    }
    match &cli.cmd {
        Cmd::Synth { hr, hr_range, frames, size, fps, count, noise, paths } => {
            set(&mut cfg, "synth.hr_bpm", *hr)?;
            set(&mut cfg, "synth.hr_range", *hr_range)?;
            set(&mut cfg, "synth.frames", *frames)?;
            set(&mut cfg, "synth.size", *size)?;
            set(&mut cfg, "synth.fps", *fps)?;
            set(&mut cfg, "synth.count", *count)?;
            set(&mut cfg, "synth.noise_std", *noise)?;
            set_path(&mut cfg.out, paths.out.clone());
        }
        Cmd::Train { data, epochs, lr, batch_size, dtype, paths } => {
            set(&mut cfg, "train.epochs", *epochs)?;
            set(&mut cfg, "train.lr", *lr)?;
            set(&mut cfg, "train.batch_size", *batch_size)?;
            if let Some(d) = dtype {
                cfg.dtype = match d {
                    DtypeArg::F32 => Dtype::F32,
                    DtypeArg::F64 => Dtype::F64,
                };
            }
            set_path(&mut cfg.data, data.clone());
            set_path(&mut cfg.out, paths.out.clone());
        }
        Cmd::Sweep { data, epochs, paths, .. } => {
            set(&mut cfg, "train.epochs", *epochs)?;
            set_path(&mut cfg.data, data.clone());
            set_path(&mut cfg.out, paths.out.clone());
        }
        Cmd::Infer { ckpt, clip, paths }
        | Cmd::Energy { ckpt, clip, paths, .. }
        | Cmd::Attnmap { ckpt, clip, paths, .. } => {
            set_path(&mut cfg.ckpt, ckpt.clone());
            set_path(&mut cfg.clip, clip.clone());
            set_path(&mut cfg.out, paths.out.clone());
        }
        Cmd::Metrics { paths, .. } => set_path(&mut cfg.out, paths.out.clone()),
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    spikeattn::runtime::init_threads()?;
    let cfg = resolve(&cli)?;
    eprintln!("config: {}", serde_json::to_string(&cfg)?);
    match cli.cmd {
        Cmd::Synth { .. } => commands::synth(&cfg),
        Cmd::Train { .. } => commands::train(&cfg),
        Cmd::Sweep { axis, values, .. } => commands::sweep(&cfg, &axis, &values),
        Cmd::Infer { .. } => commands::infer(&cfg),
        Cmd::Metrics { pred, gt, fps, pred_kind, .. } => {
            let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("."));
            commands::metrics(&pred, &gt, fps, pred_kind == PredKind::Pulse, &out)
        }
        Cmd::Energy { flops, sops, mode, e_mac_pj, e_ac_pj, .. } => {
            let cost = CostModel::new(e_mac_pj * 1e-12, e_ac_pj * 1e-12).map_err(|e| Usage(e.to_string()))?;
            match (flops, sops) {
                (Some(f), Some(s)) => {
                    commands::energy_given(f, s, &cost);
                    Ok(())
                }
                _ => {
                    let mode = match mode {
                        ModeArg::Exact => CountMode::Exact,
                        ModeArg::Paper => CountMode::Paper,
                    };
                    commands::energy_audit(&cfg, mode, cost)
                }
            }
        }
        Cmd::Attnmap { block, source, thr, .. } => {
            let source = match source {
                SourceArg::V => MapSource::V,
                SourceArg::Vhat => MapSource::Vhat,
            };
            commands::attnmap(&cfg, block, source, thr)
        }
    }
}

fn main() -> ExitCode {
    let fields = config::field_list();
    let mut cmd = Cli::command().after_help(fields.clone());
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for n in names {
        cmd = cmd.mut_subcommand(n, |s| s.after_help(fields.clone()));
    }
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<Usage>()) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
