pub mod baselines;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod groupmine;
pub mod metrics;
pub mod reranker;
pub mod saliency;
pub mod seeds;
pub mod select;
pub mod trainer;

pub use error::{Error, Result};

pub use data::{Document, FeatureRole, Query, QuerySet, SyntheticConfig};
pub use diffcore::Tensor;
pub use groupmine::{FeatureGroupSet, NullModelConfig, NullSampling, PruneReport};
pub use reranker::{ModelParams, RerankerConfig};
pub use saliency::{FeatureGroup, SaliencyMap};
pub use select::{NfsConfig, NfsOutcome, SelectionResult, SimilarityMatrix};
pub use trainer::{Checkpoint, EpochRecord, TrainConfig, TrainedModel};
