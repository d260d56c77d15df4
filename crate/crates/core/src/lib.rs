//! Event-camera facial keypoint alignment toolkit.
//!
//! * [`events`]: event model, `EVS1`/CSV stream I/O and time windows.
//! * [`representations`]: frame, voxel grid and time-surface builders.
//! * [`simulator`]: ideal-threshold frames-to-events conversion.
//! * [`dataset`]: frame-rate segmentation, busiest-window selection and the
//!   ten-window recording protocol.
//! * [`attention`]: cross-modal fusion / self / cross attention layer with
//!   analytic gradients and finite-difference checking.
//! * [`ssmer`]: multi-representation negative-cosine losses, projector and
//!   predictor heads, and a toy self-supervised trainer.
//! * [`metrics`]: NME, failure rate and CED area.
//! * [`selfcheck`]: quick invariant suite; [`cli`]: the `evlign` binary.

pub mod attention;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod events;
pub mod metrics;
pub mod representations;
pub mod selfcheck;
pub mod simulator;
pub mod ssmer;
pub mod tensor;

pub use error::{Error, Result};
