//! Option groups shared by the command line and the TOML config file.
//!
//! Every group is a set of optional values. A config file provides one
//! table per group; flags given on the command line take precedence.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use nfs_core::baselines::{CorrelationSample, DEFAULT_TRADEOFF};
use nfs_core::groupmine::{NullModelConfig, NullSampling};
use nfs_core::{RerankerConfig, SyntheticConfig, TrainConfig};

use crate::CliError;

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataOpts {
    /// Training set in LETOR format
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Validation set, used for per-epoch nDCG@3
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Test set
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Candidate lists (`qid<TAB>idx,idx,...`, 0-based) restricting each query
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Documents kept per query from the candidate list
    #[arg(long)]
    pub topk: Option<usize>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOpts {
    #[arg(long)]
    pub attention_layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Feature embedding width (0 disables it)
    #[arg(long)]
    pub embedding: Option<usize>,
    #[arg(long)]
    pub hidden_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub bn_momentum: Option<f64>,
    /// ApproxNDCG smoothing temperature
    #[arg(long)]
    pub temperature: Option<f64>,
}

impl ModelOpts {
    pub fn build(&self) -> RerankerConfig {
        let d = RerankerConfig::default();
        RerankerConfig {
            n_attention_layers: self.attention_layers.unwrap_or(d.n_attention_layers),
            n_heads: self.heads.unwrap_or(d.n_heads),
            feature_embedding: self.embedding.unwrap_or(d.feature_embedding),
            hidden_size: self.hidden_size.unwrap_or(d.hidden_size),
            dropout_p: self.dropout.unwrap_or(d.dropout_p),
            bn_momentum: self.bn_momentum.unwrap_or(d.bn_momentum),
            temperature: self.temperature.unwrap_or(d.temperature),
        }
    }
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOpts {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

impl TrainOpts {
    pub fn build(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            seed,
            ..d
        }
    }
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NullOpts {
    /// Number of random saliency datasets
    #[arg(long)]
    pub datasets: Option<usize>,
    /// Salience threshold in (0,1)
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Largest tolerated fraction of random datasets matching a group
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Simulate every random map instead of sampling match counts
    #[arg(long)]
    pub literal_null: Option<bool>,
}

impl NullOpts {
    pub fn build(&self, seed: u64) -> (NullModelConfig, NullSampling) {
        let d = NullModelConfig::default();
        let cfg = NullModelConfig {
            k: self.datasets.unwrap_or(d.k),
            t: self.threshold.unwrap_or(d.t),
            alpha: self.alpha.unwrap_or(d.alpha),
            seed,
        };
        let sampling = if self.literal_null.unwrap_or(false) {
            NullSampling::Literal
        } else {
            NullSampling::Binomial
        };
        (cfg, sampling)
    }
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectOpts {
    /// Number of features to keep
    #[arg(long, conflicts_with = "keep_percent")]
    pub keep: Option<usize>,
    /// Percentage of features to keep, rounded down
    #[arg(long)]
    pub keep_percent: Option<f64>,
    /// nDCG cutoff for single-feature importance
    #[arg(long)]
    pub cutoff: Option<usize>,
    /// Redundancy penalty of the greedy selectors
    #[arg(long)]
    pub tradeoff: Option<f64>,
    /// Documents sampled for feature correlations
    #[arg(long)]
    pub max_docs: Option<usize>,
}

impl SelectOpts {
    pub fn n_keep(&self, d: usize) -> Result<usize, CliError> {
        match (self.keep, self.keep_percent) {
            (Some(n), _) if n == 0 || n > d => Err(CliError::usage(format!(
                "--keep must lie in 1..={d}, got {n}"
            ))),
            (Some(n), _) => Ok(n),
            (None, Some(p)) => {
                nfs_core::eval::percent_to_count(p, d).map_err(|e| CliError::usage(e.to_string()))
            }
            (None, None) => Err(CliError::usage(
                "one of --keep or --keep-percent is required",
            )),
        }
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff.unwrap_or(3)
    }

    pub fn tradeoff(&self) -> f64 {
        self.tradeoff.unwrap_or(DEFAULT_TRADEOFF)
    }

    pub fn sample(&self, seed: u64) -> CorrelationSample {
        CorrelationSample {
            max_docs: self
                .max_docs
                .unwrap_or(CorrelationSample::default().max_docs),
            seed,
        }
    }
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOpts {
    /// Training queries written to --out
    #[arg(long)]
    pub queries: Option<usize>,
    /// Extra queries written to --test-out
    #[arg(long)]
    pub test_queries: Option<usize>,
    #[arg(long)]
    pub docs: Option<usize>,
    #[arg(long)]
    pub informative: Option<usize>,
    #[arg(long)]
    pub duplicates: Option<usize>,
    #[arg(long)]
    pub noise: Option<usize>,
}

impl SynthOpts {
    pub fn build(&self, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            seed,
            n_queries: self.queries.unwrap_or(50) + self.test_queries.unwrap_or(0),
            docs_per_query: self.docs.unwrap_or(20),
            informative: self.informative.unwrap_or(3),
            duplicates_per_informative: self.duplicates.unwrap_or(2),
            noise: self.noise.unwrap_or(4),
        }
    }
}

/// Top-level layout of a config file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub data: DataOpts,
    pub model: ModelOpts,
    pub train: TrainOpts,
    pub null: NullOpts,
    pub select: SelectOpts,
    pub synth: SynthOpts,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }
}

/// Field-wise overlay: values set in `flags` win over those in `file`.
pub fn overlay<T: Serialize + DeserializeOwned>(file: &T, flags: &T) -> T {
    let mut base = serde_json::to_value(file).expect("option group serializes");
    if let (Value::Object(b), Value::Object(f)) = (
        &mut base,
        serde_json::to_value(flags).expect("option group serializes"),
    ) {
        for (k, v) in f {
            if !v.is_null() {
                b.insert(k, v);
            }
        }
    }
    serde_json::from_value(base).expect("overlay keeps the schema")
}
