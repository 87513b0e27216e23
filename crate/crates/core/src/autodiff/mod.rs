//! A small tape-based reverse-mode differentiation engine.
//!
//! Only the operations the text encoder and its three heads need are
//! provided. A [`Tape`] records one forward pass; parameters live outside the
//! tape in a [`ParamStore`] so the same parameters can be used in many tapes.

mod adadelta;
mod init;
mod params;
mod tape;
mod tensor;

pub use adadelta::{AdaDelta, AdaDeltaConfig};
pub use init::{uniform_fill, xavier_uniform_init};
pub use params::{Group, Param, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub(crate) use tape::{softmax, stable_sigmoid};
pub use tensor::Tensor;
