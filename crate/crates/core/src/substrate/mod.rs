//! Tensors, a reverse-mode graph, optimizers, checkpoints and random streams.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Monomial, NodeId};
pub use optim::{cosine_lr, Optimizer, OptimizerKind, ParamMap};
pub use rng::RngStream;
pub use tensor::{Real, Tensor};
