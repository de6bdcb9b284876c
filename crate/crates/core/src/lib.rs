//! Grid-based feature compression of gigapixel images and a trainable
//! min/max attention classifier over the compressed grids.
//!
//! The pipeline has two stages. [`patch`] tiles an image, describes every
//! patch with a feature vector and packs the vectors into a
//! [`grid::GridFeatureMap`] that keeps patch adjacency. [`model`] then runs a
//! depth-spanning convolution over the grid, pools its response, turns the
//! pooled maps into spatial attention and classifies the attention-weighted
//! feature sums. [`train`], [`metrics`], [`saliency`] and [`synth`] cover
//! optimisation, evaluation, visualisation and a synthetic benchmark.

pub mod error;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod patch;
pub mod saliency;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
