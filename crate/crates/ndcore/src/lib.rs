//! Minimal dense f64 array engine with reverse-mode automatic differentiation.
//!
//! Values are stored row-major in flat buffers. Operations are recorded on a
//! [`Tape`]; calling [`Tape::backward`] on a scalar result replays the record
//! in reverse and accumulates gradients into every leaf that requested them.
//!
//! Design notes:
//! - All arithmetic is double precision.
//! - No external dependencies; includes a small deterministic PRNG.
//! - Single-threaded within one tape. Separate tapes share nothing and may
//!   run on different threads.

pub mod array;
pub mod error;
pub mod gradcheck;
pub mod rng;
pub mod tape;

pub use array::DiffArray;
pub use error::{NdError, Result};
pub use rng::Rng;
pub use tape::{Pointwise, Reduce, Tape, Var};
