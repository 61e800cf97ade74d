//! Co-occurrence similarity, single-linkage clustering and representative
//! picking.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::QuerySet;
use crate::error::{Error, Result};
use crate::groupmine::{self, FeatureGroupSet, NullModelConfig, NullSampling, PruneReport};
use crate::reranker::RerankerConfig;
use crate::saliency;
use crate::trainer::{self, EpochRecord, TrainConfig, TrainedModel};

/// Symmetric `d x d` similarity with unit diagonal. Inactive features take
/// no part in clustering.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    size: usize,
    values: Vec<f64>,
    active: Vec<bool>,
}

impl SimilarityMatrix {
    /// Builds a matrix from row-major values; the diagonal is forced to 1.
    pub fn new(size: usize, mut values: Vec<f64>, active: Vec<bool>) -> Result<Self> {
        if values.len() != size * size || active.len() != size {
            return Err(Error::shape("similarity", &[size, size], &[values.len()]));
        }
        for a in 0..size {
            values[a * size + a] = 1.0;
            for b in 0..a {
                let (x, y) = (values[a * size + b], values[b * size + a]);
                if !(x.is_finite() && (0.0..=1.0).contains(&x)) || (x - y).abs() > 1e-12 {
                    return Err(Error::InvalidArgument(format!(
                        "similarity ({a},{b}) must be symmetric in [0,1], got {x} / {y}"
                    )));
                }
            }
        }
        Ok(SimilarityMatrix {
            size,
            values,
            active,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.size + b]
    }

    pub fn is_active(&self, a: usize) -> bool {
        self.active[a]
    }

    pub fn active_features(&self) -> Vec<usize> {
        (0..self.size).filter(|&a| self.active[a]).collect()
    }
}

/// Count-weighted Jaccard co-occurrence of features across groups.
pub fn similarity(groups: &FeatureGroupSet, d: usize) -> Result<SimilarityMatrix> {
    if groups.is_empty() {
        return Err(Error::NoSurvivingGroups);
    }
    let mut co = vec![0u64; d * d];
    for (g, &count) in &groups.groups {
        let m = g.members();
        if let Some(&last) = m.last() {
            if last >= d {
                return Err(Error::InvalidArgument(format!(
                    "group {} exceeds feature count {d}",
                    g.to_one_based()
                )));
            }
        }
        for &a in m {
            for &b in m {
                co[a * d + b] += count;
            }
        }
    }
    let mut values = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            let both = co[a * d + b];
            if both > 0 {
                let union = co[a * d + a] + co[b * d + b] - both;
                values[a * d + b] = both as f64 / union as f64;
            }
        }
    }
    let active = (0..d).map(|a| co[a * d + a] > 0).collect();
    SimilarityMatrix::new(d, values, active)
}

/// Agglomerative single-linkage clustering of the active features down to
/// `n_clusters` clusters.
///
/// Each step merges the pair with the highest maximum pairwise similarity;
/// ties go to the pair whose smaller-id cluster has the smallest minimum
/// id, then to the smallest minimum id of the other cluster. Clusters are
/// returned sorted, ordered by their smallest member.
#[allow(clippy::needless_range_loop)]
pub fn single_linkage(sim: &SimilarityMatrix, n_clusters: usize) -> Result<Vec<Vec<usize>>> {
    let active = sim.active_features();
    if n_clusters == 0 || n_clusters > active.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot form {n_clusters} clusters from {} active features",
            active.len()
        )));
    }
    // Clusters stay ordered by min id, so index order is the tie order.
    let mut clusters: Vec<Vec<usize>> = active.iter().map(|&a| vec![a]).collect();
    let mut link: Vec<Vec<f64>> = active
        .iter()
        .map(|&a| active.iter().map(|&b| sim.get(a, b)).collect())
        .collect();
    while clusters.len() > n_clusters {
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                if link[i][j] > best.0 {
                    best = (link[i][j], i, j);
                }
            }
        }
        let (_, i, j) = best;
        let absorbed = clusters.remove(j);
        clusters[i].extend(absorbed);
        clusters[i].sort_unstable();
        let row_j = link.remove(j);
        for row in &mut link {
            row.remove(j);
        }
        for (k, &s) in row_j.iter().enumerate().filter(|&(k, _)| k != j) {
            let k = if k > j { k - 1 } else { k };
            let merged = link[i][k].max(s);
            link[i][k] = merged;
            link[k][i] = merged;
        }
    }
    Ok(clusters)
}

/// How a kept feature was chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Most frequent in salient groups within its cluster.
    MostFrequent,
    /// Highest single-feature ranking quality within its cluster.
    MaxImportance,
    /// Picked by the greedy importance/redundancy trade-off.
    Greedy,
}

impl SelectionRule {
    pub fn name(self) -> &'static str {
        match self {
            SelectionRule::MostFrequent => "most_frequent",
            SelectionRule::MaxImportance => "max_importance",
            SelectionRule::Greedy => "greedy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub feature: usize,
    pub cluster: Option<usize>,
    /// Group frequency or importance, depending on `rule`.
    pub score: f64,
    pub rule: SelectionRule,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Selected features in selection order (ascending for cluster methods).
    pub kept: Vec<usize>,
    pub clusters: Vec<Vec<usize>>,
    /// Parallel to `kept`.
    pub provenance: Vec<Provenance>,
    pub warnings: Vec<String>,
}

impl SelectionResult {
    pub fn sorted_kept(&self) -> Vec<usize> {
        let mut k = self.kept.clone();
        k.sort_unstable();
        k
    }

    /// One 1-based feature id per line, ascending.
    pub fn write_features<W: Write>(&self, mut out: W) -> Result<()> {
        for f in self.sorted_kept() {
            writeln!(out, "{}", f + 1)?;
        }
        Ok(())
    }

    /// Cluster membership and scores, 1-based ids.
    pub fn write_sidecar<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# cluster\tmembers\tkept\tscore\trule")?;
        for p in &self.provenance {
            let members = p
                .cluster
                .map(|c| {
                    self.clusters[c]
                        .iter()
                        .map(|m| (m + 1).to_string())
                        .collect::<Vec<_>>()
                        .join(",")
                })
                .unwrap_or_else(|| (p.feature + 1).to_string());
            let cluster = p.cluster.map_or("-".to_string(), |c| c.to_string());
            writeln!(
                out,
                "{cluster}\t{members}\t{}\t{}\t{}",
                p.feature + 1,
                p.score,
                p.rule.name()
            )?;
        }
        for w in &self.warnings {
            writeln!(out, "# warning: {w}")?;
        }
        Ok(())
    }
}

/// Reads a selected-features file (1-based ids) into sorted 0-based indices.
pub fn parse_feature_list(text: &str, d: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let id: usize = line.parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("bad feature id {line:?}"),
        })?;
        if id == 0 || id > d {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("feature id {id} outside 1..={d}"),
            });
        }
        out.push(id - 1);
    }
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        return Err(Error::EmptyInput("feature list".into()));
    }
    Ok(out)
}

/// Keeps the highest-scoring member of each cluster, ties to the smallest
/// id. `kept` is sorted ascending.
pub fn pick_representatives(
    partition: &[Vec<usize>],
    scores: &[f64],
    rule: SelectionRule,
) -> Result<SelectionResult> {
    let mut picks = Vec::with_capacity(partition.len());
    for (c, cluster) in partition.iter().enumerate() {
        let mut best: Option<usize> = None;
        for &f in cluster {
            let s = *scores
                .get(f)
                .ok_or_else(|| Error::InvalidArgument(format!("no score for feature {f}")))?;
            match best {
                Some(b) if scores[b] > s || (scores[b] == s && b < f) => {}
                _ => best = Some(f),
            }
        }
        let f = best.ok_or_else(|| Error::InvalidArgument("empty cluster".into()))?;
        picks.push(Provenance {
            feature: f,
            cluster: Some(c),
            score: scores[f],
            rule,
        });
    }
    picks.sort_by_key(|p| p.feature);
    Ok(SelectionResult {
        kept: picks.iter().map(|p| p.feature).collect(),
        clusters: partition.to_vec(),
        provenance: picks,
        warnings: Vec::new(),
    })
}

/// Clusters the features of surviving groups and keeps the most frequent
/// feature of each cluster.
pub fn select_from_groups(
    survivors: &FeatureGroupSet,
    d: usize,
    n_keep: usize,
) -> Result<SelectionResult> {
    if n_keep == 0 {
        return Err(Error::InvalidArgument("n_keep must be at least 1".into()));
    }
    if survivors.is_empty() {
        return Err(Error::NoSurvivingGroups);
    }
    let sim = similarity(survivors, d)?;
    let active = sim.active_features().len();
    let mut warnings = Vec::new();
    let n_clusters = if active < n_keep {
        let msg =
            format!("only {active} features survive pruning, fewer than the {n_keep} requested");
        log::warn!("{msg}");
        warnings.push(msg);
        active
    } else {
        n_keep
    };
    let partition = single_linkage(&sim, n_clusters)?;
    let freq: Vec<f64> = survivors
        .feature_frequencies(d)
        .into_iter()
        .map(|f| f as f64)
        .collect();
    let mut result = pick_representatives(&partition, &freq, SelectionRule::MostFrequent)?;
    result.warnings = warnings;
    Ok(result)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NfsConfig {
    pub reranker: RerankerConfig,
    pub train: TrainConfig,
    /// Its threshold is also the salience threshold for group extraction.
    pub null: NullModelConfig,
    pub sampling: NullSampling,
}

#[derive(Clone, Debug)]
pub struct NfsOutcome {
    pub selection: SelectionResult,
    pub model: TrainedModel,
    pub history: Vec<EpochRecord>,
    /// All mined groups before pruning.
    pub groups: FeatureGroupSet,
    pub prune: PruneReport,
}

/// Trains a reranker, mines salient groups on the training set, prunes
/// them against the null model and clusters what survives.
pub fn nfs_select(
    train: &QuerySet,
    valid: &QuerySet,
    config: &NfsConfig,
    n_keep: usize,
) -> Result<NfsOutcome> {
    if n_keep == 0 {
        return Err(Error::InvalidArgument("n_keep must be at least 1".into()));
    }
    config.null.validate()?;
    let (model, history) = trainer::train(train, valid, &config.reranker, &config.train)?;
    nfs_select_with_model(train, model, history, config, n_keep)
}

/// The post-training part of [`nfs_select`] for an already trained model.
pub fn nfs_select_with_model(
    train: &QuerySet,
    model: TrainedModel,
    history: Vec<EpochRecord>,
    config: &NfsConfig,
    n_keep: usize,
) -> Result<NfsOutcome> {
    let d = train.feature_count;
    let groups = saliency::mine_groups(&model, train, config.null.t)?;
    let prune = groupmine::prune(&groups, d, &config.null, config.sampling)?;
    let selection = select_from_groups(&prune.survivors, d, n_keep)?;
    Ok(NfsOutcome {
        selection,
        model,
        history,
        groups,
        prune,
    })
}
