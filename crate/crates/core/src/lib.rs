//! Angular-margin embedding learning for semi-supervised anomalous sound
//! detection.
//!
//! The crate covers the whole pipeline: feature extraction ([`dsp`]), unit
//! sphere geometry ([`geometry`]), losses with analytic gradients
//! ([`losses`]), a bias-free embedding network ([`net`]), training with loss
//! monitoring ([`train`]), domain-generalized scoring ([`score`]), metrics
//! ([`eval`]), RISE importance maps ([`explain`]), a synthetic data
//! generator ([`data`]) and randomized self-checks ([`verify`]). [`pipeline`]
//! chains the stages.

pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod explain;
pub mod geometry;
pub mod losses;
pub mod net;
pub mod pipeline;
pub mod score;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
