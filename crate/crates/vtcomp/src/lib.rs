//! Learned visual-token compression with a frozen toy decoder testbed.
//!
//! The crate turns a length-`n` sequence of visual tokens into a shorter
//! length-`m` sequence by left-multiplying with a nonnegative row-stochastic
//! compression matrix. One matrix family subsumes pruning (one-hot rows),
//! merging (mixed rows) and pooling (window-uniform rows). On top of that it
//! provides:
//!
//! - a tape-based reverse-mode autodiff engine ([`tensor`]),
//! - per-image compression-matrix optimization ([`compress`]),
//! - a resolution-adaptive matrix generator with pooling-equivalent
//!   initialization ([`meta`]),
//! - a frozen attention decoder and multi-turn dialogue testbed with an exact
//!   key-value cache ([`toy`]),
//! - classical reducers for comparison ([`baselines`]),
//! - the three-term training objective and SGD trainer ([`trainer`]),
//! - an analytic FLOPs/memory cost model ([`cost`]),
//! - config-driven experiment commands behind a thin CLI ([`commands`]).
//!
//! Each major capability has a runnable example; see `examples/` and the
//! README.

// Guards written as `!(x > 0.0)` are deliberate: unlike `x <= 0.0` they also
// reject NaN. Index loops stay explicit in kernels where the index
// arithmetic is the point.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod baselines;
pub mod commands;
pub mod compress;
pub mod config;
pub mod cost;
pub mod error;
pub mod meta;
pub mod tensor;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Engine version recorded in run manifests.
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
