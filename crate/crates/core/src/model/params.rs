//! Named parameter storage, initialisation and checkpoint files.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::RunningStats;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
    bn_names: Vec<String>,
    bn_stats: Vec<RunningStats>,
    bn_index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
            bn_names: Vec::new(),
            bn_stats: Vec::new(),
            bn_index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<S>) {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
    }

    /// Fan-in scaled uniform weight, bound `1/sqrt(fan_in)`.
    pub fn insert_uniform(&mut self, name: &str, shape: &[usize], rng: &mut impl Rng) {
        let fan_in: usize = shape[1..].iter().product();
        self.insert_uniform_fan(name, shape, fan_in, rng);
    }

    pub fn insert_uniform_fan(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::of(rng.gen_range(-bound..bound))).collect();
        self.insert(name, Tensor::new(shape, data).expect("shape matches data"));
    }

    /// `name.gamma = 1`, `name.beta = 0`, running stats `(0, 1)`.
    pub fn insert_bn(&mut self, name: &str, channels: usize) {
        self.insert(&format!("{name}.gamma"), Tensor::ones(&[channels]));
        self.insert(&format!("{name}.beta"), Tensor::zeros(&[channels]));
        self.bn_index.insert(name.to_string(), self.bn_names.len());
        self.bn_names.push(name.to_string());
        self.bn_stats.push(RunningStats {
            mean: Some(vec![0.0; channels]),
            var: Some(vec![1.0; channels]),
        });
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<S>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn bn_stats(&self, name: &str) -> Option<&RunningStats> {
        self.bn_index.get(name).map(|&i| &self.bn_stats[i])
    }

    pub(crate) fn bn_stats_mut(&mut self, name: &str) -> Result<&mut RunningStats> {
        match self.bn_index.get(name) {
            Some(&i) => Ok(&mut self.bn_stats[i]),
            None => Err(Error::arg(format!("no batchnorm named {name}"))),
        }
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    /// Put every parameter on the tape as a trainable leaf, in store order.
    pub fn register(&self, g: &mut Graph<S>) -> Vec<Var> {
        self.values.iter().map(|t| g.param(t.clone())).collect()
    }

    pub fn manifest(&self) -> (Vec<TensorEntry>, Vec<TensorEntry>) {
        let params = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
                dtype: S::DTYPE.to_string(),
            })
            .collect();
        let mut buffers = Vec::new();
        for (n, st) in self.bn_names.iter().zip(&self.bn_stats) {
            let c = st.mean.as_ref().map_or(0, |m| m.len());
            for suffix in ["running_mean", "running_var"] {
                buffers.push(TensorEntry {
                    name: format!("{n}.{suffix}"),
                    shape: vec![c],
                    dtype: "f64".into(),
                });
            }
        }
        (params, buffers)
    }

    pub fn write_blob(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        for t in &self.values {
            for &v in t.data() {
                v.write_le(&mut buf);
            }
        }
        for (n, st) in self.bn_names.iter().zip(&self.bn_stats) {
            let (Some(m), Some(v)) = (&st.mean, &st.var) else {
                return Err(Error::Config(format!("batchnorm {n} has no running statistics")));
            };
            for x in m.iter().chain(v) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(buf)
    }

    /// Overwrite values from a blob laid out as described by `params` and
    /// `buffers`; names and shapes must match this store exactly.
    pub fn read_blob(
        &mut self,
        params: &[TensorEntry],
        buffers: &[TensorEntry],
        blob: &[u8],
    ) -> Result<()> {
        let corrupt = |m: String| Error::CorruptCheckpoint(m);
        if params.len() != self.names.len() || buffers.len() != 2 * self.bn_names.len() {
            return Err(corrupt(format!(
                "manifest lists {} params / {} buffers, model has {} / {}",
                params.len(),
                buffers.len(),
                self.names.len(),
                2 * self.bn_names.len()
            )));
        }
        let expected: usize = params
            .iter()
            .map(|e| e.numel() * S::BYTES)
            .chain(buffers.iter().map(|e| e.numel() * 8))
            .sum();
        if blob.len() != expected {
            return Err(corrupt(format!(
                "weights blob has {} bytes, manifest needs {expected}",
                blob.len()
            )));
        }
        let mut off = 0;
        for (i, e) in params.iter().enumerate() {
            if e.name != self.names[i] || e.shape != self.values[i].shape() || e.dtype != S::DTYPE {
                return Err(corrupt(format!(
                    "entry {i} is {} {:?} {}, expected {} {:?} {}",
                    e.name,
                    e.shape,
                    e.dtype,
                    self.names[i],
                    self.values[i].shape(),
                    S::DTYPE
                )));
            }
            let n = e.numel();
            let data = (0..n)
                .map(|k| S::read_le(&blob[off + k * S::BYTES..off + (k + 1) * S::BYTES]))
                .collect();
            self.values[i] = Tensor::new(&e.shape, data)?;
            off += n * S::BYTES;
        }
        let read_f64 = |off: &mut usize, n: usize| -> Vec<f64> {
            let v = (0..n)
                .map(|k| {
                    let b = &blob[*off + 8 * k..*off + 8 * k + 8];
                    f64::from_le_bytes(b.try_into().expect("8 bytes"))
                })
                .collect();
            *off += 8 * n;
            v
        };
        for (j, name) in self.bn_names.clone().iter().enumerate() {
            let (em, ev) = (&buffers[2 * j], &buffers[2 * j + 1]);
            let c = self.values[self.index[&format!("{name}.gamma")]].numel();
            if em.name != format!("{name}.running_mean")
                || ev.name != format!("{name}.running_var")
                || em.shape != [c]
                || ev.shape != [c]
            {
                return Err(corrupt(format!("buffer entries for {name} do not match")));
            }
            let mean = read_f64(&mut off, c);
            let var = read_f64(&mut off, c);
            self.bn_stats[j] = RunningStats {
                mean: Some(mean),
                var: Some(var),
            };
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub(crate) fn write_files(dir: &Path, manifest_json: &str, blob: &[u8]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("model.json"), manifest_json)?;
    fs::write(dir.join("weights.bin"), blob)?;
    Ok(())
}
