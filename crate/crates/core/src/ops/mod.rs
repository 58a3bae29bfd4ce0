//! Differentiable primitives. Every op takes the tape first, records a
//! backward closure when any input is tracked, and counts its
//! multiply-accumulates on the tape.

mod conv;
mod elementwise;
pub(crate) mod linalg;
mod loss;
mod norm;
mod reduce;
mod shape;

pub use conv::{conv1d_shared, conv2d, depthwise_conv2d, Conv2dGeom};
pub use elementwise::{add, blend, exp, gelu, mul, neg, relu, scale, sigmoid, silu, softplus, sub};
pub use linalg::{linear, pointwise};
pub use loss::{cross_entropy, dice};
pub use norm::{batch_norm_eval, batch_norm_train, layer_norm, BatchStats, NORM_EPS};
pub use reduce::{global_pools, mean_all, reduce_axis, sum_all, Reduce};
pub use shape::{concat, depth_to_space2, gather_last, narrow, reshape, space_to_depth2, CELL_ORDER};
