//! Differentiable matrix arithmetic, spectral transforms, and seeded
//! randomness shared by every learned component.

pub mod fft;
pub mod gradcheck;
mod graph;
pub mod optim;
mod params;
mod rng;
mod tensor;

pub use fft::{fft_full, fft_real, ifft_real, magnitude_spectrum};
pub use graph::{Graph, LeafGradients, Var};
pub use optim::{Optimizer, OptimizerConfig};
pub use params::{evaluate, evaluate_with_gradients, Bound, Gradients, ParamEntry, ParameterSet};
pub use rng::{Distribution, RandomStream};
pub use rustfft::num_complex::Complex64;
pub use tensor::Tensor;
