//! Monocular 3D object detection with the orthographic feature transform.
//!
//! Image features from a small convolutional front-end are pooled into a
//! ground-plane voxel lattice through integral images, collapsed into a
//! birds-eye-view map, refined by a residual "topdown" network and decoded
//! into oriented 3D boxes from per-class confidence maps.
//!
//! The crate carries its own tiny reverse-mode differentiation engine
//! ([`tensor::Graph`]) so the whole pipeline trains end-to-end on CPU.

pub mod augment;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod integral;
pub mod kitti;
pub mod network;
pub mod oft;
pub mod par;
pub mod synth;
pub mod targets;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
