//! Shared inputs for the kernel benchmarks.

use fusioncast::numerics::{RandomStream, Tensor};

/// A `rows x cols` matrix of standard normal draws.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut s = RandomStream::new(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| s.normal()).collect()).expect("shape matches data")
}
