//! Dense tensors, reverse-mode autodiff, Adam and the Noam schedule.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod module;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Reduction, Var, BCE_CLAMP};
pub use module::{Ctx, Linear, Mode};
pub use optim::{noam_lr, Adam, NoamSchedule, OptimizerState};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;
