//! Shared fixtures for the kernel benchmarks.

use s3l_core::{SeededRng, Tensor};

/// Standard-normal tensor.
pub fn randn(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal() as f32).collect()).unwrap()
}

/// `n × d` matrix with unit rows.
pub fn unit_rows(rng: &mut SeededRng, n: usize, d: usize) -> Tensor {
    let mut data: Vec<f32> = (0..n * d).map(|_| rng.normal() as f32).collect();
    for row in data.chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::new(vec![n, d], data).unwrap()
}
