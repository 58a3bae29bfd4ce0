//! Reverse-mode automatic differentiation.

mod params;
mod tape;

pub use params::{
    Buffer, BufferId, Mode, ParamBuilder, ParamId, ParamStore, Parameter, Session,
};
pub use tape::{BackwardFn, GradSink, Gradients, NodeId, Tape, Var};
