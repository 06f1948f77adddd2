//! Clustering of multi-sensor functional data with automatic sensor
//! selection.
//!
//! The pipeline reduces each sensor's curves to functional principal
//! component scores ([`fpca`]), clusters the stacked scores with a
//! penalized Gaussian mixture fitted by EM ([`em`]), and picks the number of
//! clusters and penalty strength by an adjusted BIC ([`select`]).

pub mod bspline;
pub mod dataio;
pub mod em;
pub mod error;
pub mod fpca;
pub mod seeds;
pub mod select;
pub mod simbench;

pub use error::{Error, Result};
