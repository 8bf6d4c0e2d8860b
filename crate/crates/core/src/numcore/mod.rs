//! Dense tensors, a reverse-mode tape, seeded random streams, and optimizers.

mod gradcheck;
mod optim;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use optim::{OptimHyper, Optimizer, OptimizerKind};
pub use rng::Rng;
pub use tape::{Gradients, ParamId, Tape, Var};
pub use tensor::{forward_primitive, softmax_in_place, sqdist, Primitive, Tensor};
