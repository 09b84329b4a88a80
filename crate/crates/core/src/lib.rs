//! Content-based histopathology patch retrieval.
//!
//! A twin convolutional network trained with a contrastive objective maps
//! image patches to low-dimensional embeddings. Database embeddings live in a
//! [`FeatureStore`] that answers exact Euclidean top-K queries, and the
//! [`eval`] module scores retrieval runs with top-K accuracy, majority-vote
//! confusion matrices and macro precision/recall/F1.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! at the crate root fix the scalar to `f64`, which is what the file formats,
//! the CLI and the query service use.

pub mod checkpoint;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod interp;
pub mod layer;
pub mod network;
pub mod ops;
pub mod pairs;
pub mod saliency;
pub mod scalar;
pub mod service;
pub mod store;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use contrastive::{contrastive_loss, lr_at, PairLabel, TrainConfig};
pub use data::{Label, Split};
pub use eval::{MetricsReport, UncertainReport};
pub use layer::{LayerGrads, Mode};
pub use network::NetworkConfig;
pub use store::Neighbor;
pub use train::TrainReport;

/// Dense `f64` tensor.
pub type Tensor = tensor::Tensor<f64>;
/// Twin network over `f64` parameters.
pub type Network = network::Network<f64>;
/// Layer over `f64` parameters.
pub type Layer = layer::Layer<f64>;
/// Labeled patch with `f64` pixels.
pub type PatchRecord = data::PatchRecord<f64>;
/// Embedding store over `f64` vectors.
pub type FeatureStore = store::FeatureStore<f64>;
/// Stored embedding with `f64` components.
pub type EmbeddingRecord = store::EmbeddingRecord<f64>;
/// Ranked neighbors for one query with `f64` distances.
pub type RetrievalResult = store::RetrievalResult<f64>;
/// Grad-CAM map over `f64` values.
pub type SaliencyMap = saliency::SaliencyMap<f64>;
