//! Parameter initialization and the fixed positional table.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// Standard deviation used for every truncated-normal initialized matrix.
pub const INIT_STD: f64 = 0.02;

/// Normal(0, std) samples rejected outside `±2·std`.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            data.push(z * std);
        }
    }
    Tensor::new(shape.to_vec(), data).expect("shape product matches sample count")
}

/// Normal(0, std) samples without truncation.
pub fn normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches sample count")
}

/// Sinusoidal encoding table of shape `positions × width`.
pub fn sinusoidal_table(positions: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; positions * width];
    for pos in 0..positions {
        for j in 0..width {
            let pair = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / width as f64);
            data[pos * width + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![positions, width], data).expect("table shape")
}
