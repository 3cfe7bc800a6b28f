//! Multi-resolution parametric image registration with complex matrix
//! exponentials and a learned coefficient flow across pyramid levels.
//!
//! The pipeline: [`lie_basis`] builds algebra elements from coefficients,
//! [`matexp`] exponentiates them, [`geometry`] maps points, [`imaging`] warps
//! images, [`odeflow`] carries coefficients across levels, [`losses`] scores
//! alignments and [`registration`] optimises everything with the reverse-mode
//! engine in [`diffnet`]. [`eval`] holds metrics, landmarks and synthetic data.

// `!(x > y)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod diffnet;
pub mod eval;
pub mod error;

pub mod geometry;
pub mod imaging;
pub mod lie_basis;
pub mod linalg;
pub mod losses;
pub mod matexp;
pub mod odeflow;
pub mod registration;

pub use error::{Error, Result};
pub use geometry::{transform_points, PointSet};
pub use imaging::{build_pyramid, load_image, save_image, warp, Image, ImagePyramid};
pub use lie_basis::{assemble, generators, CoefficientVector, GroupId, GroupSpec};
pub use linalg::Matrix;
pub use losses::LossKind;
pub use matexp::{forward_inverse, mexp, ComplexMatrix};
pub use odeflow::{CoefficientTrajectory, LevelSchedule, Solver};
pub use registration::{register, FlowMode, Registration, RegistrationConfig, TransformResult};
