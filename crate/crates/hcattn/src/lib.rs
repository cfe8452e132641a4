//! Approximate attention over a compressed KV cache.
//!
//! Keys are grouped-vector-quantized into 16-bit index rows; a per-query
//! lookup table turns attention scoring into index gathers; a
//! cumulative-mass threshold picks the few tokens that matter; and the
//! value matrix lives entirely in a separate host domain that only ever
//! receives (index, weight) selections and returns weighted sums.
//!
//! The pipeline is verifiable at desk scale: every approximation ships
//! with an exact-attention oracle, and the memory/compute/communication
//! budget models in [`accounting`] are closed-form and testable.
//!
//! Start with the runnable examples (`cargo run --example end_to_end`),
//! or drive everything from the `hcattn` binary.

pub mod accounting;
pub mod cli;
pub mod engine;
pub mod error;
pub mod eviction;
pub mod mat;
pub mod quantizer;
pub mod rng;
pub mod score_engine;
pub mod tensor_io;
pub mod value_store;

pub use error::{Error, Result};
pub use mat::Matrix;
