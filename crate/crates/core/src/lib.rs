//! Sparse scene coordinate regression from local descriptors.
//!
//! A graph attention network maps the descriptors of one image to world
//! coordinates and a reliability per descriptor; a P3P + RANSAC + LM solver
//! turns the reliable ones into a camera pose. Everything numeric is generic
//! over [`scalar::Scalar`]: `f32` for training and inference, `f64` for
//! gradient checks.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffcore;
pub mod scalar;
pub mod geometry;
pub mod net;
pub mod frame;
pub mod pseudo_label;
pub mod pose;
pub mod training;
pub mod synth;
pub mod io;
pub mod cli;

pub type Model = net::ModelParams<f32>;
pub type Model64 = net::ModelParams<f64>;
pub type Predictions = net::SceneCoordinateSet<f32>;
pub type Predictions64 = net::SceneCoordinateSet<f64>;
pub type Tape = diffcore::Tape<f32>;
pub type Tape64 = diffcore::Tape<f64>;
pub type Pose = geometry::CameraPose<f64>;
