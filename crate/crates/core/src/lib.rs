// Validation is written as `!(x > 0.0)` throughout so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baseline_fm;
pub mod checkpoint;
pub mod checks;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod flowcore;
pub mod nets;
pub mod objectives;
pub mod oracles;
pub mod params;
pub mod sampling;
pub mod tensor;

pub use error::{Result, TfmError};
pub use params::Params;
pub use tensor::Tensor;
