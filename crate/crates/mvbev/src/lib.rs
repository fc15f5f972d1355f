//! Multi-view BEV pedestrian detection with mean-teacher unsupervised
//! domain adaptation, at desk scale on synthetic multi-camera data.
//!
//! The pipeline: [`synthworld`] renders multi-camera scenes with a
//! controllable domain gap; [`geometry`] projects per-view features onto a
//! shared ground grid; [`tinynet`] is a small hand-backpropagated detector
//! that regresses a probabilistic occupancy map; [`pseudolabel`] extracts
//! detections from occupancy maps (greedy NMS or local-max); [`selftrain`]
//! runs the mean-teacher adaptation loop; [`evalmetrics`] scores detections
//! with MODA/MODP/precision/recall; [`runner`] binds it all behind the CLI.

pub mod evalmetrics;
pub mod geometry;
pub mod pseudolabel;
pub mod rng;
pub mod runner;
pub mod selftrain;
pub mod synthworld;
pub mod tensor;
pub mod tinynet;
pub mod util;
