pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Graph, OpKind, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
