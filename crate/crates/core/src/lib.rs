//! Coarse-to-fine polar-boundary instance segmentation.
//!
//! The crate is organised bottom-up:
//!
//! * [`polar_codec`] converts masks to polar shapes (pole + radii) and back.
//! * [`boundary`] traces instance borders and builds the instance-agnostic
//!   low-resolution boundary target.
//! * [`diffcore`] is a small reverse-mode differentiation engine over `f64`
//!   tensors.
//! * [`losses`] holds focal, polar IoU and centerness objectives.
//! * [`network`] builds the backbone, pyramid, shared heads, the fine
//!   refinement module and the boundary branch.
//! * [`training`] generates synthetic scenes, assigns targets and runs SGD.
//! * [`infer_eval`] decodes detections, runs NMS, computes mask AP and counts
//!   parameters and multiply-accumulates.

pub mod boundary;
pub mod config;
pub mod diffcore;
pub mod error;
pub mod infer_eval;
pub mod io;
pub mod losses;
pub mod network;
pub mod polar_codec;
pub mod training;

pub use error::{Error, Result};
