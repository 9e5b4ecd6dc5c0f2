pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod tensor;
pub mod tokenizer;
pub mod transfer;

pub use autodiff::{AttentionSpec, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Float, FlushSubnormals, Tensor};
