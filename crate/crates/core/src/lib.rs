//! Automated knee alignment measurement from AP knee radiographs.
//!
//! Landmarks are found in two stages by attention-gated hourglass networks:
//! a global model places two reference points on the whole image, these fix
//! a similarity reference frame, and a local model places every landmark in
//! that frame. The anatomical tibiofemoral angle is then measured from the
//! landmarks and compared against ground truth with point-to-point,
//! point-to-curve and agreement statistics.

// `!(x > 0.0)` is used on purpose so NaN falls into the error branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod config;
pub mod error;
pub mod geometry;
pub mod heatmap;
pub mod hourglass;
pub mod image;
pub mod landmarks;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
pub use geometry::{Point2, Polyline, SimilarityTransform};
