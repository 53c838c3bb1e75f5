//! Domain-adaptive anchor-free object detection with center-aware
//! adversarial feature alignment, evaluated on a synthetic two-domain
//! shapes benchmark.
//!
//! The crate is organized around the training pipeline:
//! [`geometry`] and [`assignment`] turn ground-truth boxes into per-pixel
//! targets, [`network`] runs a five-level pyramid detector plus per-level
//! domain discriminators on the [`tensor`] autodiff tape, [`losses`] and
//! [`alignment`] implement the detection and adversarial objectives,
//! [`synth`] generates the clear/foggy benchmark, [`train`] optimizes, and
//! [`eval`] decodes detections and scores them with a COCO-style mAP suite.

pub mod alignment;
pub mod assignment;
pub mod losses;
pub mod error;
pub mod geometry;
pub mod tensor;

pub use error::{Error, Result};
pub use geometry::{Box, LtrbOffsets};
