//! Hyperspherical embedding learning with progressive cluster optimization.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), the
//! angular-margin loss family ([`losses`]), class prototypes
//! ([`prototypes`]), negative class sub-sampling ([`ncs`]), two encoders
//! ([`encoders`]), the three-phase trainer ([`engine`]), synthetic data
//! ([`synth`]) and verification metrics ([`eval`]).

// NaN must fail validation, so `!(x > 0.0)` is deliberate throughout
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod codec;
pub mod encoders;
pub mod engine;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod losses;
pub mod ncs;
pub mod prototypes;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
