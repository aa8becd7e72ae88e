//! CNN inference with BatchNorm-fusion canonization, attribution methods and
//! explanation-quality metrics.

pub mod attribute;
pub mod bundle;
pub mod canonize;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod ir;
pub mod kernels;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use ir::{GraphBuilder, ModelGraph, Node, Op, OpKind};
pub use tensor::Tensor;
