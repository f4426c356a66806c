//! MLF-VO: self-supervised ego-motion estimation fusing RGB and inferred
//! depth, with a depth network, a six-variant relative pose network
//! (including multi-layer channel exchange), the full self-supervised loss
//! suite, and an odometry evaluation toolkit.
//!
//! All neural computation runs on a minimal reverse-mode autodiff substrate
//! ([`tensor`]) that is generic over `f32`/`f64` and bit-deterministic.

pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod networks;
pub mod plot;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
