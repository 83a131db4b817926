//! Training-feature collection: the embedding-bank format, the toy world
//! that stands in for generation and retrieval, and the hybrid selection
//! rule.

pub mod bank;
pub mod hybrid;
pub mod toyworld;

pub use bank::{EmbeddingBank, Group, ManifestEntry, Provenance, RowMeta};
pub use hybrid::{
    build_training_set, collect_training_set, hybrid_collect, ClassFeatures, TrainingSet,
};
pub use toyworld::{generate_toy_world, ToyWorld, ToyWorldConfig};
