#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikeattn::model::ModelConfig;
use spikeattn::scalar::Scalar;
use spikeattn::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn spikes<S: Scalar>(rng: &mut impl Rng, shape: &[usize], p: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.gen_bool(p)))).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

pub fn normal<S: Scalar>(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

pub fn uniform01<S: Scalar>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

pub fn is_binary<S: Scalar>(t: &Tensor<S>) -> bool {
    t.data().iter().all(|v| {
        let x = v.as_f64();
        x == 0.0 || x == 1.0
    })
}

/// Small model over 3x16x32x32 clips: token grid 4x1x1.
pub fn tiny_config(d: usize, blocks: usize, t_s: usize) -> ModelConfig {
    ModelConfig::toy(d, blocks, t_s, [16, 32, 32])
}
