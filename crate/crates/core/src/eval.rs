//! Retrain-and-score evaluation of feature subsets.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::QuerySet;
use crate::error::{Error, Result};
use crate::metrics;
use crate::reranker::RerankerConfig;
use crate::trainer::{self, EpochRecord, TrainConfig, TrainedModel};

/// `floor(percent / 100 * d)`; percentages outside `(0, 100]` or a zero
/// count are rejected.
pub fn percent_to_count(percent: f64, d: usize) -> Result<usize> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "percentage {percent} outside (0,100]"
        )));
    }
    // tolerate representation error such as 0.29999999 * 100
    let n = (percent / 100.0 * d as f64 + 1e-9).floor() as usize;
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "{percent}% of {d} features keeps nothing"
        )));
    }
    Ok(n.min(d))
}

/// Published head counts for reduced feature sets, keyed by percentage.
const HEADS_BY_PERCENT: [(f64, usize); 4] = [(5.0, 1), (10.0, 1), (30.0, 4), (40.0, 3)];

/// Attention head count for a model of the given width: the published value
/// when the percentage has one and it divides the width, otherwise the
/// largest divisor of the width not above `configured`.
pub fn heads_for(percent: Option<f64>, width: usize, configured: usize) -> usize {
    if let Some(p) = percent {
        if let Some(&(_, h)) = HEADS_BY_PERCENT.iter().find(|(q, _)| (q - p).abs() < 1e-9) {
            if width.is_multiple_of(h) {
                return h;
            }
        }
    }
    (1..=configured.max(1).min(width.max(1)))
        .rev()
        .find(|h| width.is_multiple_of(*h))
        .unwrap_or(1)
}

/// `n` distinct features drawn uniformly with a fixed seed, ascending.
pub fn random_subset(d: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || n > d {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {n} of {d} features"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, d, n).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Clone, Debug)]
pub struct SubsetEvaluation {
    pub features: Vec<usize>,
    pub n_heads: usize,
    /// Mean nDCG@k on the test set.
    pub ndcg: f64,
    pub model: TrainedModel,
    pub history: Vec<EpochRecord>,
}

/// Trains a reranker on the `features` columns of `train` and reports its
/// mean nDCG@k on `test`. The head count is adapted to the reduced width.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_subset(
    train: &QuerySet,
    valid: &QuerySet,
    test: &QuerySet,
    features: &[usize],
    percent: Option<f64>,
    config: &RerankerConfig,
    train_config: &TrainConfig,
    k: usize,
) -> Result<SubsetEvaluation> {
    if test.feature_count != train.feature_count {
        return Err(Error::InvalidArgument(format!(
            "train has {} features, test has {}",
            train.feature_count, test.feature_count
        )));
    }
    let sub_train = train.project(features)?;
    let sub_valid = if valid.is_empty() {
        valid.clone()
    } else {
        valid.project(features)?
    };
    let sub_test = test.project(features)?;
    let mut cfg = config.clone();
    cfg.n_heads = heads_for(percent, cfg.model_width(features.len()), config.n_heads);
    let (model, history) = trainer::train(&sub_train, &sub_valid, &cfg, train_config)?;
    let scores = model.predict(&sub_test)?;
    let ndcg = metrics::mean_ndcg_at_k(&sub_test, &scores, k)?;
    Ok(SubsetEvaluation {
        features: features.to_vec(),
        n_heads: cfg.n_heads,
        ndcg,
        model,
        history,
    })
}

/// Reads one score per line, aligned with the documents of `qs` in order.
pub fn parse_scores(text: &str, qs: &QuerySet) -> Result<Vec<Vec<f64>>> {
    let mut values = Vec::with_capacity(qs.num_documents());
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line.parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("bad score {line:?}"),
        })?;
        if !v.is_finite() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "score is not finite".into(),
            });
        }
        values.push(v);
    }
    if values.len() != qs.num_documents() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} documents",
            values.len(),
            qs.num_documents()
        )));
    }
    let mut rest = values.as_slice();
    Ok(qs
        .queries
        .iter()
        .map(|q| {
            let (head, tail) = rest.split_at(q.documents.len());
            rest = tail;
            head.to_vec()
        })
        .collect())
}

/// One row of an evaluation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: String,
    pub percent: f64,
    pub n_features: usize,
    /// 1-based ids, ascending; empty for external score files.
    pub features: Vec<usize>,
    pub k: usize,
    pub ndcg: f64,
    pub n_heads: Option<usize>,
}

impl EvalRecord {
    pub fn from_subset(method: &str, d: usize, k: usize, eval: &SubsetEvaluation) -> Self {
        let mut features: Vec<usize> = eval.features.iter().map(|f| f + 1).collect();
        features.sort_unstable();
        EvalRecord {
            method: method.to_string(),
            percent: 100.0 * eval.features.len() as f64 / d as f64,
            n_features: eval.features.len(),
            features,
            k,
            ndcg: eval.ndcg,
            n_heads: Some(eval.n_heads),
        }
    }
}
