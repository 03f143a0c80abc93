mod binio;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod evalstat;
pub mod features;
pub mod ivf;
pub mod ltr;
pub mod pipeline;
pub mod scalar;
pub mod scorer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type EmbeddingMatrix32 = embed::EmbeddingMatrix<f32>;
pub type EmbeddingMatrix64 = embed::EmbeddingMatrix<f64>;
pub type Centroids32 = ivf::Centroids<f32>;
pub type Centroids64 = ivf::Centroids<f64>;
pub type IvfIndex32 = ivf::IvfIndex<f32>;
pub type IvfIndex64 = ivf::IvfIndex<f64>;
