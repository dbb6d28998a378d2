//! Parameter registration helpers.

use amtpp_autodiff::{ParamId, ParamStore, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`, stored `fan_in x fan_out`.
pub fn glorot(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<ParamId> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    Ok(store.add(name, Tensor::new(vec![fan_in, fan_out], data)?, true)?)
}

pub fn zeros(store: &mut ParamStore, name: &str, shape: Vec<usize>) -> Result<ParamId> {
    Ok(store.add(name, Tensor::zeros(shape)?, true)?)
}
