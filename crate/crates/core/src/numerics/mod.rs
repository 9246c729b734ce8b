//! Dense tensors, a reverse-mode gradient tape, and seeded randomness.

mod gradcheck;
mod graph;
mod rng;
mod scalar;
mod tensor;

pub use gradcheck::{check_gradients, evaluate, Objective};
pub use graph::{value_and_grad, Gradients, Graph, Var};
pub use rng::{derive_rng, derive_rng_indexed, derive_seed, gaussian_sample, Rng};
pub use scalar::Scalar;
pub use tensor::{logsumexp, Tensor};

pub(crate) use graph::{matmul_forward, sigmoid};
pub(crate) use tensor::logsumexp_f64;
