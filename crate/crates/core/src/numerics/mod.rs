//! Dense tensors with reverse-mode gradients over a fixed op set.

mod container;
pub mod gradcheck;
pub mod kernels;
mod params;
pub mod rng;
mod tape;
mod tensor;

pub use container::{Container, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use params::{he_normal, init_conv, init_linear, normal, ParamSet};
pub use rng::DetRng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
