//! Label-driven prompt tuning for out-of-distribution detection in a frozen
//! joint embedding space.
//!
//! The crate works on precomputed unit-norm embeddings. Images and label
//! names live in the same space; a small set of learnable context tokens is
//! composed with each label anchor to produce class embeddings that are
//! then scored against test images.

pub mod collection;
pub mod error;
pub mod labelspace;
pub mod metrics;
pub mod numeric;
pub mod pipeline;
pub mod prompts;
pub mod scoring;
pub mod training;

pub use error::{Error, Result};
pub use labelspace::{mine_negatives, CorpusBank, LabelSpace, MinedNegatives};
pub use metrics::{auroc, fpr_at_tpr, id_accuracy, EvalReport};
pub use numeric::FeatureMatrix;
pub use pipeline::{Pipeline, RunConfig};
pub use prompts::{PromptParams, Scheme};
pub use scoring::{mcm_score, neglabel_score, zero_shot_classify};
pub use training::{train_prompts, TrainConfig};
