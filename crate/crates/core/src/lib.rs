//! Internal discretization bottleneck for dense regression.
//!
//! Pixel features are softly partitioned into a small set of internal
//! discrete representations ([`afp`]), which are then transferred back onto
//! the continuous pixel grid by cross-attention ([`isd`]). Everything runs on
//! the small reverse-mode engine in [`tensor`].

pub mod afp;
pub mod data;
pub mod error;
pub mod isd;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
