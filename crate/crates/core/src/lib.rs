//! Separable-mask lensless imaging for thin vision-based tactile sensors.
//!
//! The pipeline runs mask design ([`mask`], [`maskopt`]) through close-up
//! system-matrix synthesis ([`sysmat`]), slit calibration ([`calib`]) and
//! real-time reconstruction ([`filter`], [`recon`]) to tactile interpretation
//! ([`tactile`]). [`mat`], [`dct`], [`metrics`] and [`io`] are the shared
//! numerical substrate.

pub mod calib;
pub mod dct;
pub mod error;
pub mod filter;
pub mod io;
pub mod mask;
pub mod maskopt;
pub mod mat;
pub mod metrics;
pub mod recon;
pub mod rng;
pub mod scenes;
pub mod sysmat;
pub mod tactile;

pub use error::{Error, Result};
pub use mask::{MaskPattern, MaskVector};
pub use mat::{ImageRGB, Mat};
pub use metrics::MetricReport;
pub use sysmat::{Geometry, StripeParams, SystemMatrices};
