//! Sample-level 1D convolutional networks for multi-label tagging of raw
//! audio: Basic, SE, Res-n and ReSE-n blocks, multi-level feature
//! aggregation, hand-written backward passes checked against finite
//! differences, SGD with Nesterov momentum, ROC-AUC evaluation and SE
//! excitation analysis.

pub mod analysis;
pub mod blocks;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Layer, Mode, Parameterized, Real, Session, Shape, Tensor};
