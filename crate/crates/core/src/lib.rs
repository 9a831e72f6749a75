//! Two-pass consistent generation on a toy multimodal diffusion transformer.
//!
//! An identity pass samples normally while caching position-free keys,
//! values, and attention outputs from the single blocks. Frame passes then
//! read that cache: a probe leg matches frame tokens to identity tokens and
//! extracts a foreground mask, and the full leg swaps in point-tracking
//! attention (identity keys re-encoded at matched frame coordinates) and
//! merges attention outputs token-by-token, weighted by match confidence and
//! a decaying coefficient.
//!
//! Everything is deterministic given a seed; tensors are plain row-major
//! f32; dumps use the CCTF container.

pub mod attn;
pub mod cctf;
pub mod config;
pub mod correspond;
pub mod diagnostics;
pub mod error;
pub mod maskex;
pub mod model;
pub mod ops;
pub mod pta;
pub mod rng;
pub mod rope;
pub mod sampler;
pub mod selfcheck;
pub mod tensor;

pub use config::RunConfig;
pub use error::{Error, ErrorClass, Result};
pub use tensor::Tensor;
