//! Reference selectors: greedy importance/redundancy search (with metric or
//! externally supplied importances) and correlation clustering.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::QuerySet;
use crate::error::{Error, Result};
use crate::metrics::{self, RankCorrelation};
use crate::seeds::{derive_seed, STREAM_SUBSAMPLE};
use crate::select::{self, Provenance, SelectionResult, SelectionRule, SimilarityMatrix};

/// Default redundancy penalty of the greedy selectors.
pub const DEFAULT_TRADEOFF: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMetric {
    #[default]
    Ndcg,
    Map,
}

/// Document subsample used for feature-feature correlations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSample {
    pub max_docs: usize,
    pub seed: u64,
}

impl Default for CorrelationSample {
    fn default() -> Self {
        CorrelationSample {
            max_docs: 50_000,
            seed: 0,
        }
    }
}

/// Ranking quality of each feature used alone as the score, taking the
/// better of the two sort directions.
pub fn single_feature_importance(
    qs: &QuerySet,
    k: usize,
    metric: ImportanceMetric,
) -> Result<Vec<f64>> {
    if qs.is_empty() {
        return Err(Error::EmptyInput("query set".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("cutoff k must be positive".into()));
    }
    (0..qs.feature_count)
        .into_par_iter()
        .map(|j| {
            let up: Vec<Vec<f64>> = qs
                .queries
                .iter()
                .map(|q| q.documents.iter().map(|d| d.features[j]).collect())
                .collect();
            let down: Vec<Vec<f64>> = up.iter().map(|s| s.iter().map(|v| -v).collect()).collect();
            let score = |s: &[Vec<f64>]| match metric {
                ImportanceMetric::Ndcg => metrics::mean_ndcg_at_k(qs, s, k),
                ImportanceMetric::Map => metrics::mean_average_precision(qs, s),
            };
            Ok(score(&up)?.max(score(&down)?))
        })
        .collect()
}

/// Indices into the pooled document list (query order) used for
/// correlations: everything, or a seeded uniform subsample.
pub fn sample_documents(total: usize, sample: &CorrelationSample) -> Vec<usize> {
    if total <= sample.max_docs {
        return (0..total).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sample.seed, STREAM_SUBSAMPLE, 0));
    let mut picked = index::sample(&mut rng, total, sample.max_docs).into_vec();
    picked.sort_unstable();
    picked
}

/// `|corr(a, b)|` for every feature pair over the sampled documents.
pub fn absolute_correlations(
    qs: &QuerySet,
    sample: &CorrelationSample,
    corr: fn(&[f64], &[f64]) -> Result<RankCorrelation>,
) -> Result<SimilarityMatrix> {
    let d = qs.feature_count;
    let rows = sample_documents(qs.num_documents(), sample);
    let columns: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let col = qs.column(j);
            rows.iter().map(|&r| col[r]).collect()
        })
        .collect();
    let pairs: Vec<(usize, usize)> = (0..d)
        .flat_map(|a| (a + 1..d).map(move |b| (a, b)))
        .collect();
    let values = pairs
        .par_iter()
        .map(|&(a, b)| Ok(corr(&columns[a], &columns[b])?.value.abs().min(1.0)))
        .collect::<Result<Vec<f64>>>()?;
    let mut m = vec![0.0; d * d];
    for (&(a, b), v) in pairs.iter().zip(values) {
        m[a * d + b] = v;
        m[b * d + a] = v;
    }
    SimilarityMatrix::new(d, m, vec![true; d])
}

/// Greedy selection: repeatedly take the highest current importance (ties
/// to the smallest id), then penalize every remaining feature by
/// `2c * sim(picked, j)`. `kept` is in pick order.
pub fn greedy_select(
    importance: &[f64],
    sim: &SimilarityMatrix,
    n_keep: usize,
    c: f64,
) -> Result<SelectionResult> {
    let d = importance.len();
    if sim.size() != d {
        return Err(Error::shape("greedy_select", &[d], &[sim.size()]));
    }
    if n_keep == 0 || n_keep > d {
        return Err(Error::InvalidArgument(format!(
            "n_keep must lie in 1..={d}, got {n_keep}"
        )));
    }
    if !(c >= 0.0 && c.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "trade-off must be non-negative, got {c}"
        )));
    }
    let mut current = importance.to_vec();
    let mut picked = vec![false; d];
    let mut result = SelectionResult::default();
    for _ in 0..n_keep {
        let mut best: Option<usize> = None;
        for j in (0..d).filter(|&j| !picked[j]) {
            if best.is_none_or(|b| current[j] > current[b]) {
                best = Some(j);
            }
        }
        let p = best.expect("n_keep <= d");
        picked[p] = true;
        result.kept.push(p);
        result.provenance.push(Provenance {
            feature: p,
            cluster: None,
            score: current[p],
            rule: SelectionRule::Greedy,
        });
        for j in (0..d).filter(|&j| !picked[j]) {
            current[j] -= 2.0 * c * sim.get(p, j);
        }
    }
    Ok(result)
}

/// Greedy search with single-feature nDCG@k importance and Kendall tau
/// redundancy.
pub fn gas_select(
    qs: &QuerySet,
    k: usize,
    n_keep: usize,
    c: f64,
    sample: &CorrelationSample,
) -> Result<SelectionResult> {
    let importance = single_feature_importance(qs, k, ImportanceMetric::Ndcg)?;
    xgas_select(qs, &importance, n_keep, c, sample)
}

/// Greedy search with supplied importances.
pub fn xgas_select(
    qs: &QuerySet,
    importances: &[f64],
    n_keep: usize,
    c: f64,
    sample: &CorrelationSample,
) -> Result<SelectionResult> {
    if importances.len() != qs.feature_count {
        return Err(Error::shape(
            "xgas_select",
            &[qs.feature_count],
            &[importances.len()],
        ));
    }
    if n_keep == 0 || n_keep > qs.feature_count {
        return Err(Error::InvalidArgument(format!(
            "n_keep must lie in 1..={}, got {n_keep}",
            qs.feature_count
        )));
    }
    let sim = absolute_correlations(qs, sample, metrics::kendall_tau)?;
    greedy_select(importances, &sim, n_keep, c)
}

/// Spearman single-linkage clustering; each cluster keeps its feature with
/// the best single-feature nDCG@k.
pub fn hcas_select(
    qs: &QuerySet,
    k: usize,
    n_keep: usize,
    sample: &CorrelationSample,
) -> Result<SelectionResult> {
    if n_keep == 0 || n_keep > qs.feature_count {
        return Err(Error::InvalidArgument(format!(
            "n_keep must lie in 1..={}, got {n_keep}",
            qs.feature_count
        )));
    }
    let sim = absolute_correlations(qs, sample, metrics::spearman)?;
    let importance = single_feature_importance(qs, k, ImportanceMetric::Ndcg)?;
    let partition = select::single_linkage(&sim, n_keep)?;
    select::pick_representatives(&partition, &importance, SelectionRule::MaxImportance)
}

/// Parses `fid<TAB>value` lines (1-based ids) into a length-`d` vector;
/// features not listed get 0.
pub fn parse_importances(text: &str, d: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; d];
    let mut seen = vec![false; d];
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| Error::Parse { line: i + 1, msg };
        let mut cols = line.split_whitespace();
        let (Some(fid), Some(value)) = (cols.next(), cols.next()) else {
            return Err(bad("expected fid<TAB>value".into()));
        };
        let fid: usize = fid
            .parse()
            .map_err(|_| bad(format!("bad feature id {fid:?}")))?;
        if fid == 0 || fid > d {
            return Err(bad(format!("feature id {fid} outside 1..={d}")));
        }
        let value: f64 = value
            .parse()
            .map_err(|_| bad(format!("bad value {value:?}")))?;
        if !value.is_finite() || value < 0.0 {
            return Err(bad(format!(
                "importance must be finite and non-negative, got {value}"
            )));
        }
        if std::mem::replace(&mut seen[fid - 1], true) {
            return Err(bad(format!("feature {fid} listed twice")));
        }
        out[fid - 1] = value;
    }
    Ok(out)
}
