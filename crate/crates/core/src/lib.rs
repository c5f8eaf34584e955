//! Vectorized lane mapping from aerial imagery.

pub mod config;
pub mod dataset_io;
pub mod error;
pub mod evaluator;
pub mod geometry;
pub mod heatmap;
pub mod lane_model;
pub mod matcher;
pub mod pipeline;
pub mod polyline;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type PixelPoint32 = geometry::PixelPoint<f32>;
pub type PixelPoint64 = geometry::PixelPoint<f64>;
pub type Tensor32 = tensor::Tensor3<f32>;
pub type Tensor64 = tensor::Tensor3<f64>;
pub type MatchScene32 = pipeline::MatchScene<f32>;
pub type MatchScene64 = pipeline::MatchScene<f64>;
pub type TinyScorer32 = matcher::TinyScorer<f32>;
pub type TinyScorer64 = matcher::TinyScorer<f64>;
