//! Contact prediction lab: dual-branch patch encoders with low-rank adapters,
//! patch-level cross-attention fusion, per-vertex contact and semantic heads,
//! class-balanced training objectives, mesh evaluation metrics, and an
//! experiment harness with a CLI.

pub mod attention;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod heads;
pub mod losses;
pub mod meshmetrics;
pub mod params;
pub mod ssl;
pub mod warnings;

pub use error::{ContactError, Result};
