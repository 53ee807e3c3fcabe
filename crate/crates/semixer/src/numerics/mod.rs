//! Dense f64 arrays, a reverse-mode gradient tape, and a central-difference
//! gradient oracle. Everything is 64-bit and deterministic.

mod gradcheck;
pub(crate) mod linalg;
pub mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_coords};
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;
