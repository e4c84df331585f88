use rand::Rng;

use super::Tensor;

/// `rows x cols` weights drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_fan_in<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).expect("rows and cols are positive")
}
