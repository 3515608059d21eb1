//! Dense `f64` tensors with tape-based reverse-mode automatic differentiation.
//!
//! Every forward computation is recorded on a [`Tape`] as it runs; calling
//! [`Tape::grad`] replays the tape backward once, in reverse recording order,
//! which is a reverse topological order of the computation graph.
//!
//! ```
//! use autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = x.mul(&x).unwrap();
//! let g = tape.grad(y, &[x]).unwrap();
//! assert_eq!(g[0].item().unwrap(), 6.0);
//! ```
//!
//! Broadcasting is limited to leading dimensions: in a binary op the shorter
//! operand's shape must be a suffix of the longer one's.

mod attention;
mod check;
mod optim;
mod params;
mod tape;
mod tensor;

pub use attention::{attention, attention_batched};
pub use check::{finite_diff_check, finite_diff_check_params};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamSet};
pub use tape::{BackwardFn, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not belong to this tape")]
    NotOnTape,
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
