//! Channel-knowledge-map construction with a score-based generative prior.
//!
//! The crate covers the whole modelling stack: pixel-encoded CKM grids and a
//! synthetic generator ([`data`]), the discretized VP SDE ([`sde`]), a
//! time-conditioned convolutional score network with hand-written
//! reverse-mode gradients ([`net`]), differentiable degradation operators
//! ([`ops`]), predictor–corrector posterior sampling with a normalized
//! observation constraint ([`posterior`]) and task-level evaluation
//! ([`eval`]).

pub mod data;
pub mod error;
pub mod eval;
mod io;
pub mod net;
pub mod observation;
pub mod ops;
pub mod posterior;
pub mod sde;
pub mod tensor;

pub use error::{CkmError, Result};
pub use tensor::{Shape, Tensor};
