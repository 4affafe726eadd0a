//! Follow-up volume prediction for lung nodules.
//!
//! A warp network predicts a displacement field from a baseline nodule cube
//! and a follow-up interval; warping the baseline image and mask gives the
//! predicted shape, and a texture network adds a masked intensity residual.
//! Predicted masks feed a volume-growth criterion for progressive disease.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod runner;
pub mod tem;
pub mod volgrid;
pub mod warp;

pub use error::{Error, Result};
