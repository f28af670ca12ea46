//! Minimal reverse-mode differentiable array engine.

pub mod check;
mod optim;
mod params;
mod rng;
mod tape;
mod tensor;

pub use optim::{cosine_lr, sgd_step};
pub use params::{Param, ParameterStore};
pub use rng::Prng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
