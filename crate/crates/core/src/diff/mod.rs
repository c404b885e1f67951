//! Minimal differentiable substrate: dense matrices, a reverse-mode tape,
//! max-aggregated message passing and Adam.

mod adam;
mod graph;
mod matrix;
mod params;
mod tape;

pub use adam::Adam;
pub use graph::{masked_neighbor_max, Adjacency, MessageMap};
pub use matrix::Matrix;
pub use params::{Grads, ParamId, ParamSet};
pub use tape::{bce_with_logit, sigmoid_scalar, Tape, Var};
