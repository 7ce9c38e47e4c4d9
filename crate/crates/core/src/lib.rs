//! Topological regularization of point clouds with principal persistence
//! measures (PPMs).
//!
//! A PPM summarizes a point cloud by the persistent homology of many
//! random subsamples of `2q + 2` points, each of which has a closed-form
//! diagram with at most one point. Comparing PPMs with a lifetime-weighted
//! RBF kernel MMD gives a regularizer that is cheap, parallel, and has
//! gradients with respect to point coordinates.
//!
//! The crate also ships the pieces needed to check that claim end to end:
//! exact Vietoris-Rips persistence in dimensions 0 and 1, exact
//! 2-Wasserstein distances on diagrams and PPMs, ambient losses for shape
//! matching, a momentum optimizer, and the experiment and benchmark drivers
//! used by the `ppmreg` command-line tool.

pub mod assignment;
pub mod bench;
pub mod config;
pub mod descent;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod kernels;
pub mod losses;
pub mod objective;
pub mod ppm;
pub mod svg;
pub mod transport;
pub mod verify;
pub mod vr;

pub use error::{Error, Result};
