//! Robust attention by Newton-IRLS.
//!
//! Vanilla attention computes each output token as a weighted least squares
//! estimate over the value rows. This crate swaps that estimate for a robust
//! M-estimate (ℓ1, Huber, MCP, Huber-MCP penalties) solved by a few
//! iterations of a closed-form reweighted mean, and provides:
//!
//! - [`penalty`]: penalties, derivatives, IRLS weights
//! - [`estimator`]: token-wise loss, majorizer, Newton-IRLS, GD baseline,
//!   Weiszfeld reference
//! - [`attention`]: matrix-form vanilla and robust attention, multi-head
//! - [`block`]: a toy encoder block with swappable attention
//! - [`simlab`]: simulation experiments
//! - [`costmodel`]: operation counts
//! - [`cli`]: the `proattention` command line

pub mod attention;
pub mod block;
pub mod cli;
pub mod costmodel;
pub mod error;
pub mod estimator;
pub mod io;
pub mod matrix;
pub mod penalty;
pub mod rng;
pub mod simlab;

pub use attention::{pro_attention, vanilla_attention, AttentionConfig};
pub use error::{Error, Result};
pub use estimator::{newton_irls, IrlsTrace, WeightedPoints};
pub use matrix::Matrix;
pub use penalty::{Penalty, PenaltyKind};
