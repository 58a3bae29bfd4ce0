//! Cross-scanning visual state-space U-Net for semantic segmentation,
//! built on a small reverse-mode autodiff engine.

pub mod autograd;
pub mod checkpoint;
pub mod complexity;
pub mod cvss;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod mfms;
pub mod network;
pub mod nn;
pub mod ops;
pub mod scan;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use autograd::{Mode, ParamBuilder, ParamId, ParamStore, Session, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
