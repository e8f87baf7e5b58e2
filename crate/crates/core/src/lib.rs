//! Core algorithms for a gaze-driven wheelchair.
//!
//! The crate is organised the way frames flow through the system:
//!
//! * [`corpus`] – labelled eye-image datasets, the on-disk layout and a
//!   parametric synthetic eye renderer.
//! * [`preprocess`] – grayscale, area decimation, histogram equalization and
//!   per-image z-score normalization.
//! * [`matchers`] – correlation classifiers (whole image, pupil patch, LBP).
//! * [`cnn`] – the compact tanh CNN, its exact gradient and the adaptive
//!   learning-rate trainer.
//! * [`calibration`] – per-user acquisition, vetting, blink cleaning and
//!   train/test finalization.
//! * [`safety`] – ultrasonic time-of-flight ranging against a 2D world.
//! * [`control`] – dual-eye fusion, wink toggling, windowed voting and
//!   chair kinematics.
//! * [`session`] – the transport-independent simulation loop used by the
//!   headless CLI and the web service.
//! * [`evaluation`] – k-fold cross-validation, confusion matrices, latency.

pub mod calibration;
pub mod classifier;
pub mod cnn;
pub mod control;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod frame;
pub mod matchers;
pub mod preprocess;
pub mod safety;
pub mod session;

pub use classifier::{GazeClassifier, Prediction};
pub use corpus::{GazeClass, LabeledDataset, LabeledFrame, Scenario};
pub use error::{Error, Result};
pub use frame::{EyeFrame, EyeSide, GrayImage, NormalizedImage};
