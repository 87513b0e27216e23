use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Glorot/Xavier uniform initialization on `±√(6 / (fan_in + fan_out))`.
///
/// For a 2-D shape `[rows, cols]`, `fan_in = cols` and `fan_out = rows`; a
/// 1-D shape `[n]` uses `fan_in = n, fan_out = 1`.
pub fn xavier_uniform_init<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor> {
    let (fan_in, fan_out) = match shape {
        [n] => (*n, 1),
        [rows, cols] => (*cols, *rows),
        _ => return Err(Error::Config(format!("cannot derive fans from shape {shape:?}"))),
    };
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::Config(format!("zero-size parameter shape {shape:?}")));
    }
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform_fill(shape, -bound, bound, rng)
}

/// I.i.d. uniform samples on `[lo, hi]`.
pub fn uniform_fill<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect();
    Tensor::new(shape.to_vec(), data)
}
