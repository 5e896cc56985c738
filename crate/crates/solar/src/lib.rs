//! Streamable free-viewpoint-video codec built on dynamic Gaussian anchors.
//!
//! A scene is a set of anchors, each decoding to a handful of Gaussian
//! primitives through a small attribute network. Frame-to-frame evolution is
//! carried by per-frame binarized transformation networks whose weight signs
//! are entropy coded, with an activation mask that suppresses redundant
//! anchors and a gradient-statistic trigger that recalibrates the attribute
//! network when the latent representation drifts.

pub mod autodiff;
pub mod btc;
pub mod codec;
pub mod ladar;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod render;
pub mod report;
pub mod synth;

mod error;

pub use error::{Error, Result};
