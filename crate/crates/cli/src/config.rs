use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use spikeattn::training::TrainConfig;
use spikeattn::video::FaceBox;
use spikeattn::ModelConfig;

use crate::Usage;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

/// Synthetic data generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub hr_bpm: f64,
    /// When set, each clip draws its rate uniformly from `[lo, hi)`.
    pub hr_range: Option<[f64; 2]>,
    pub count: usize,
    pub frames: usize,
    pub size: usize,
    pub fps: f64,
    /// Defaults to a centred box covering half the width.
    pub face_box: Option<FaceBox>,
    pub noise_std: f64,
    pub illumination_drift: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            hr_bpm: 72.0,
            hr_range: None,
            count: 1,
            frames: 160,
            size: 128,
            fps: 30.0,
            face_box: None,
            noise_std: 0.02,
            illumination_drift: 0.01,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn face_box(&self) -> FaceBox {
        self.face_box.unwrap_or(FaceBox {
            x: self.size / 4,
            y: self.size / 5,
            w: self.size / 2,
            h: self.size * 3 / 5,
        })
    }
}

/// Everything a run can be configured with, as one JSON document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    /// Parameter precision of newly trained models.
    pub dtype: Dtype,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub clip: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())).into())
    }

    /// Set a dotted key such as `model.t_s` from a JSON literal; anything that
    /// does not parse as JSON is taken as a string.
    pub fn set(&mut self, key: &str, raw: &str) -> anyhow::Result<()> {
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        self.set_value(key, value)
    }

    pub fn set_value(&mut self, key: &str, value: Value) -> anyhow::Result<()> {
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = match slot.as_object_mut().and_then(|o| o.get_mut(part)) {
                Some(s) => s,
                None => bail!(Usage(format!("unknown config key `{key}`"))),
            };
        }
        *slot = value;
        *self = serde_json::from_value(doc).with_context(|| format!("bad value for `{key}`"))?;
        Ok(())
    }

    /// `key=value` override from the command line.
    pub fn apply(&mut self, assignment: &str) -> anyhow::Result<()> {
        let Some((k, v)) = assignment.split_once('=') else {
            bail!(Usage(format!("--set expects key=value, got `{assignment}`")));
        };
        self.set(k.trim(), v.trim())
    }
}

/// Every settable key with its default, one per line.
pub fn field_list() -> String {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
        match v {
            Value::Object(map) if !map.is_empty() => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            _ => out.push(format!("  {prefix} = {v}")),
        }
    }
    let mut lines = vec![];
    let doc = serde_json::to_value(RunConfig::default()).expect("config serializes");
    walk("", &doc, &mut lines);
    format!(
        "Config keys (JSON via --config, or --set key=value; flags win over both):\n{}",
        lines.join("\n")
    )
}
