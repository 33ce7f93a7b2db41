//! Non-rigid point-cloud registration with a neural deformation pyramid.
//!
//! A source cloud is warped onto a target by a stack of small coordinate
//! networks, one per frequency band, optimized coarse to fine. The crate also
//! carries the evaluation metrics, a synthetic benchmark generator and the
//! file formats used by the `ndp` command-line tool.

pub mod autodiff;
pub mod config;
pub mod cost;
pub mod encoding;
pub mod io;
pub mod metrics;
pub mod mlp;
pub mod nn;
pub mod normalize;
pub mod pyramid;
pub mod synth;
pub mod types;
pub mod warp;

pub use config::PyramidConfig;
pub use pyramid::{register, DeformationPyramid, RegistrationResult};
pub use types::{CorrespondenceSet, Point3, PointCloud, RotationRepr, WarpFieldType};
