//! NestedFormer: multi-encoder / single-decoder volumetric segmentation with
//! nested modality-aware fusion, built on a small reverse-mode autodiff engine.
//!
//! Pipeline: one Global Poolformer [`encoder`] per modality produces a
//! 5-level feature pyramid; the [`fusion`] bottleneck mixes the top level with
//! tri-orientated self-attention and cross-modality attention; the
//! [`decoder`] gates the lower encoder levels by learned modality importance
//! and decodes to per-voxel class logits.

pub mod autodiff;
pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
