//! # maskfit-core
//!
//! Semi-automated nasal mask sizing from facial photographs.
//!
//! The pipeline crops the nose region of a photograph, regresses the two
//! lateral nasal wall landmarks with a small tanh network, maps them back to
//! the original image, converts their distance to millimetres using a
//! reference coin of known diameter, and picks a size from a mask chart.
//!
//! - [`imaging`]: PGM/PNG decoding, crop, bilinear resize, coordinate chains
//! - [`dataset`]: manifests, annotations, normalization, design matrices
//! - [`nnet`]: forward/backward passes, pseudo-inverse output solve, momentum
//! - [`trainer`]: training schedule, leave-one-out, prediction
//! - [`sizing`]: width, chart classification, tolerance rule, metrics
//! - [`synth`]: synthetic corpora with exact ground truth
//! - [`run`]: end-to-end runs written to disk

pub mod api;
pub mod dataset;
pub mod error;
pub mod imaging;
pub mod linalg;
pub mod model;
pub mod nnet;
pub mod run;
pub mod sizing;
pub mod synth;
pub mod trainer;

pub use dataset::{Annotation, NormStats, SampleRecord, ScaleReference};
pub use error::{Error, Result};
pub use imaging::{GrayImage, Point, RectRegion, TransformChain};
pub use model::Model;
pub use nnet::NetworkParams;
pub use sizing::{SizeChart, SizingOutcome};
pub use trainer::{FoldResult, TrainConfig};
