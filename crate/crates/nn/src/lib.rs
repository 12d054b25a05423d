//! A small, dependency-light autodiff engine in double precision.
//!
//! Just enough machinery for the CFR models: dense tensors, a tape-based
//! [`Graph`], 3D convolutions via im2col, named parameter stores with a binary
//! checkpoint format, and SGD with momentum.

mod conv;
mod error;
mod graph;
mod optim;
mod params;
mod tensor;

pub mod init;

pub use conv::{upsample_index, Conv3dGeometry};
pub use error::{NnError, Result};
pub use graph::{softmax_in_place, BackwardCtx, BackwardFn, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig, Optimizer, Sgd, SgdConfig};
pub use params::{Param, ParamStore};
pub use tensor::{gemm, gemm_ld, MatRef, Tensor};
