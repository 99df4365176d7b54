//! Fusion of per-listing multimodal embeddings into joint vectors, plus the
//! storage, PCA, k-means, validation and retrieval machinery used to study
//! the resulting space.

pub mod clustering;
pub mod embedding;
pub mod error;
pub mod interchange;
pub mod pipeline;
pub mod reduction;
pub mod store;
pub mod synth;
pub mod validation;

pub use clustering::{assign, kmeans, select_k, ClusteringResult, KMeansParams, KSelectionReport};
pub use embedding::{fuse, l2_normalize, mean_image_embedding, Embedding, FusionConfig, FusionMode, ListingRecord, Modality};
pub use error::{Error, Result};
pub use reduction::{pca_fit, pca_transform, project_2d, PcaModel};
pub use store::{Neighbor, NeighborList, VectorStore};
pub use validation::{
    calinski_harabasz, davies_bouldin, evaluate_reduction, info_nce, select_dimension, silhouette, ValidationReport,
};
