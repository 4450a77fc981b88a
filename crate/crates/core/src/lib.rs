//! Multi-sequence ischaemic stroke lesion segmentation.
//!
//! A residual VGG-style encoder/decoder with index unpooling is trained on
//! stacked TMax/TTP/DWI slices with cross-entropy, Lovász-Softmax and a
//! boundary-weighted NLL, optionally against three relativistic-average
//! discriminators (core, penumbra and the pair). The [`training`] module
//! covers the eight-configuration ablation grid and k-fold
//! cross-validation; [`evaluation`] reports per-class Dice.

pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod morphology;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
