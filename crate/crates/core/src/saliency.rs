//! Input-gradient saliency maps and salient feature groups.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::QuerySet;
use crate::diffcore::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::groupmine::FeatureGroupSet;
use crate::reranker::{self, Mode, ModelParams, ParamRole, RerankerConfig, Segment};
use crate::trainer::TrainedModel;

/// Default salience threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.95;

/// Min-max normalized saliency of one document, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub values: Vec<f64>,
}

impl SaliencyMap {
    /// Min-max normalizes raw magnitudes; a constant map becomes all zeros.
    pub fn from_raw(raw: &[f64]) -> SaliencyMap {
        let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = max - min;
        let values = if range > 0.0 && range.is_finite() {
            raw.iter().map(|v| (v - min) / range).collect()
        } else {
            vec![0.0; raw.len()]
        };
        SaliencyMap { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Strictly increasing, non-empty set of 0-based feature indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureGroup {
    members: Vec<usize>,
}

impl FeatureGroup {
    pub fn new(mut members: Vec<usize>) -> Result<Self> {
        members.sort_unstable();
        members.dedup();
        if members.is_empty() {
            return Err(Error::InvalidArgument(
                "feature group must be non-empty".into(),
            ));
        }
        Ok(FeatureGroup { members })
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, feature: usize) -> bool {
        self.members.binary_search(&feature).is_ok()
    }

    /// Comma-separated 1-based ids.
    pub fn to_one_based(&self) -> String {
        self.members
            .iter()
            .map(|m| (m + 1).to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "threshold must lie in (0,1), got {t}"
        )))
    }
}

/// Features whose normalized saliency exceeds `t`; `None` if there are none.
pub fn extract_group(map: &SaliencyMap, t: f64) -> Result<Option<FeatureGroup>> {
    check_threshold(t)?;
    let members: Vec<usize> = map
        .values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > t)
        .map(|(j, _)| j)
        .collect();
    Ok((!members.is_empty()).then_some(FeatureGroup { members }))
}

/// `|∂ score_i / ∂ x_i|` for every document `i` of one query, computed in
/// eval mode on the model's (standardized) inputs.
pub fn raw_saliency(
    params: &ModelParams,
    config: &RerankerConfig,
    docs: &Tensor,
) -> Result<Vec<Vec<f64>>> {
    if !params.is_finite() {
        return Err(Error::Numerical("model parameters are not finite".into()));
    }
    let mut g = Graph::new();
    let x = g.leaf(docs.clone());
    let segments = [Segment {
        start: 0,
        len: docs.rows(),
    }];
    let out = reranker::build_scores(
        &mut g,
        x,
        &segments,
        params,
        config,
        ParamRole::Constants,
        Mode::Eval,
    )?;
    let mut maps = Vec::with_capacity(docs.rows());
    for i in 0..docs.rows() {
        let root = g.slice(out.scores, 0, i, 1)?;
        let grads = g.backward(root)?;
        let raw: Vec<f64> = match grads.get(x) {
            Some(gx) => gx.row(i).iter().map(|v| v.abs()).collect(),
            None => vec![0.0; docs.cols()],
        };
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite saliency for document {i}"
            )));
        }
        maps.push(raw);
    }
    Ok(maps)
}

/// Normalized saliency map of document `doc_index` of a standardized query.
pub fn saliency_map(
    params: &ModelParams,
    config: &RerankerConfig,
    docs: &Tensor,
    doc_index: usize,
) -> Result<SaliencyMap> {
    if doc_index >= docs.rows() {
        return Err(Error::InvalidArgument(format!(
            "document {doc_index} out of range for {} documents",
            docs.rows()
        )));
    }
    let raw = raw_saliency(params, config, docs)?;
    Ok(SaliencyMap::from_raw(&raw[doc_index]))
}

/// Saliency maps of every document, in query then document order.
pub fn dataset_saliency(model: &TrainedModel, qs: &QuerySet) -> Result<Vec<Vec<SaliencyMap>>> {
    let standardized = model.standardizer.apply(qs)?;
    standardized
        .queries
        .par_iter()
        .map(|q| {
            let raw = raw_saliency(&model.params, &model.config, &q.feature_matrix())?;
            Ok(raw.iter().map(|r| SaliencyMap::from_raw(r)).collect())
        })
        .collect()
}

/// Extracts one group per document and aggregates identical groups.
pub fn mine_groups(model: &TrainedModel, qs: &QuerySet, t: f64) -> Result<FeatureGroupSet> {
    check_threshold(t)?;
    let maps = dataset_saliency(model, qs)?;
    groups_from_maps(maps.iter().flatten(), t)
}

pub fn groups_from_maps<'a>(
    maps: impl IntoIterator<Item = &'a SaliencyMap>,
    t: f64,
) -> Result<FeatureGroupSet> {
    let mut set = FeatureGroupSet::default();
    for map in maps {
        set.maps_total += 1;
        if let Some(group) = extract_group(map, t)? {
            *set.groups.entry(group).or_insert(0) += 1;
        }
    }
    Ok(set)
}

/// `qid<TAB>doc<TAB>v1,...,vd`, documents numbered from 0 within a query.
pub fn write_saliency_dump<W: Write>(
    qs: &QuerySet,
    maps: &[Vec<SaliencyMap>],
    mut out: W,
) -> Result<()> {
    for (q, qmaps) in qs.queries.iter().zip(maps) {
        for (i, m) in qmaps.iter().enumerate() {
            let values: Vec<String> = m.values.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}\t{}\t{}", q.qid, i, values.join(","))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config() -> RerankerConfig {
        RerankerConfig {
            hidden_size: 6,
            n_heads: 2,
            ..RerankerConfig::default()
        }
    }

    fn docs(seed: u64, n: usize, d: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(
            n,
            d,
            (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn min_max_arithmetic() {
        assert_eq!(
            SaliencyMap::from_raw(&[0.0, 2.0, 4.0]).values,
            vec![0.0, 0.5, 1.0]
        );
        assert_eq!(SaliencyMap::from_raw(&[3.0, 3.0]).values, vec![0.0, 0.0]);
    }

    #[test]
    fn extraction_examples() {
        let map = SaliencyMap {
            values: vec![0.96, 0.2, 0.97],
        };
        assert_eq!(
            extract_group(&map, 0.95).unwrap().unwrap().members(),
            &[0, 2]
        );
        let low = SaliencyMap {
            values: vec![0.95, 0.2],
        };
        assert!(extract_group(&low, 0.95).unwrap().is_none());
        assert!(extract_group(&map, 1.0).is_err());
        assert!(extract_group(&map, 0.0).is_err());
    }

    #[test]
    fn ignored_feature_has_zero_saliency() {
        let cfg = config();
        let mut params = ModelParams::init(&cfg, 4, 3).unwrap();
        // feature 2 contributes nothing: its attention input rows are zero
        // and it never reaches the rest of the network
        for a in &mut params.attention {
            for w in [&mut a.query, &mut a.key, &mut a.value, &mut a.output] {
                for c in 0..4 {
                    w.set(2, c, 0.0);
                }
            }
            for r in 0..4 {
                a.output.set(r, 2, 0.0);
            }
        }
        for c in 0..cfg.hidden_size {
            params.hidden.weight.set(2, c, 0.0);
        }
        let x = docs(4, 5, 4);
        for i in 0..5 {
            let raw = raw_saliency(&params, &cfg, &x).unwrap();
            assert_eq!(raw[i][2], 0.0);
            assert_eq!(saliency_map(&params, &cfg, &x, i).unwrap().values[2], 0.0);
        }
    }

    #[test]
    fn map_matches_finite_difference_sensitivity() {
        let cfg = RerankerConfig {
            n_attention_layers: 2,
            ..config()
        };
        let params = ModelParams::init(&cfg, 6, 8).unwrap();
        let x = docs(9, 4, 6);
        let h = 1e-5;
        for i in 0..4 {
            let map = saliency_map(&params, &cfg, &x, i).unwrap();
            let mut numeric = Vec::new();
            for j in 0..6 {
                let mut plus = x.clone();
                plus.set(i, j, x.get(i, j) + h);
                let mut minus = x.clone();
                minus.set(i, j, x.get(i, j) - h);
                let sp = reranker::forward(&plus, &params, &cfg, Mode::Eval).unwrap()[i];
                let sm = reranker::forward(&minus, &params, &cfg, Mode::Eval).unwrap()[i];
                numeric.push(((sp - sm) / (2.0 * h)).abs());
            }
            let expected = SaliencyMap::from_raw(&numeric);
            for (a, b) in map.values.iter().zip(&expected.values) {
                assert!((a - b).abs() <= 1e-3 * b.abs().max(1e-2), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn nan_params_are_rejected() {
        let cfg = config();
        let mut params = ModelParams::init(&cfg, 4, 3).unwrap();
        params.output.bias.set(0, 0, f64::NAN);
        assert!(saliency_map(&params, &cfg, &docs(1, 3, 4), 0).is_err());
    }

    #[test]
    fn groups_aggregate_identical_sets() {
        let maps: Vec<SaliencyMap> = (0..3)
            .map(|_| SaliencyMap {
                values: vec![0.1, 1.0, 0.3],
            })
            .chain(std::iter::once(SaliencyMap {
                values: vec![0.0; 3],
            }))
            .collect();
        let set = groups_from_maps(&maps, 0.95).unwrap();
        assert_eq!(set.maps_total, 4);
        assert_eq!(set.groups.len(), 1);
        let g = FeatureGroup::new(vec![1]).unwrap();
        assert_eq!(set.groups[&g], 3);
        assert_eq!(set.total_count(), 3);
    }

    proptest! {
        #[test]
        fn normalization_ignores_positive_affine_maps(
            raw in prop::collection::vec(0.0f64..10.0, 2..20),
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            let moved: Vec<f64> = raw.iter().map(|v| a * v + b).collect();
            let m1 = SaliencyMap::from_raw(&raw);
            let m2 = SaliencyMap::from_raw(&moved);
            for (x, y) in m1.values.iter().zip(&m2.values) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn extraction_is_monotone_and_keeps_argmax(
            raw in prop::collection::vec(0.0f64..1.0, 2..20),
            t1 in 0.01f64..0.99,
            t2 in 0.01f64..0.99,
        ) {
            let map = SaliencyMap::from_raw(&raw);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let g_lo = extract_group(&map, lo).unwrap();
            let g_hi = extract_group(&map, hi).unwrap();
            if let Some(h) = &g_hi {
                let l = g_lo.as_ref().unwrap();
                prop_assert!(h.members().iter().all(|m| l.contains(*m)));
                prop_assert!(h.members().iter().all(|&m| m < raw.len()));
            }
            if map.values.iter().any(|&v| v > 0.0) {
                let argmax = map.values.iter().position(|&v| v == 1.0).unwrap();
                prop_assert!(extract_group(&map, 0.95).unwrap().unwrap().contains(argmax));
            }
        }
    }
}
