//! Adaptive gain-scheduling state feedback for continuous-time polytopic systems.
//!
//! The crate is `no_std` (with `alloc`): everything here is pure computation.
//! File formats, the command line and parallel sweeps live in the `polyadapt`
//! companion crate.
//!
//! Pipeline: [`model`] → [`geometry`] → [`assembly`] → [`sdp`] → [`synthesis`]
//! → [`simulator`].
#![no_std]
// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod assembly;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod model;
pub mod sdp;
pub mod simulator;
pub mod synthesis;

pub use error::{Error, Result};
pub use linalg::Mat;
