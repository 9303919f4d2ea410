//! Strided-transformer 2D-to-3D pose lifting at desk scale.
//!
//! A self-contained f64 stack: dense grids with tape-based reverse-mode
//! differentiation, the strided-transformer lifting network (vanilla encoder
//! stack followed by a strided encoder stack with dual regression heads),
//! pose losses and evaluation metrics, analytic and measured complexity
//! accounting, a synthetic motion-capture pipeline, and a deterministic
//! trainer built on AMSGrad.

pub mod complexity;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod hash;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use grid::ValueGrid;
pub use rng::RngStream;
pub use tape::{Gradients, NodeId, Tape};

/// Epsilon used by every layer/batch normalization in the crate.
pub const EPS_NORM: f64 = 1e-5;

/// Momentum for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
