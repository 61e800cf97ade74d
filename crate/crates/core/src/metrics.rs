//! Ranking metrics and rank correlations.
//!
//! Rankings sort by descending score with ties resolved by ascending
//! original index, so every metric here is deterministic.

use std::cmp::Ordering;

use crate::data::QuerySet;
use crate::error::{Error, Result};

/// Document positions ordered by descending score, ties by ascending index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// `2^label - 1`.
pub fn gain(label: u32) -> f64 {
    (2f64).powi(label as i32) - 1.0
}

/// `1 / log2(rank + 1)` for a 1-based rank.
pub fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// DCG of labels already in rank order, truncated at `k`.
pub fn dcg(labels_in_rank_order: &[u32], k: usize) -> f64 {
    labels_in_rank_order
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &l)| gain(l) * discount(i + 1))
        .sum()
}

pub fn ideal_dcg(labels: &[u32], k: usize) -> f64 {
    let mut sorted = labels.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    dcg(&sorted, k)
}

fn check_lengths(labels: usize, scores: usize) -> Result<()> {
    if labels != scores {
        return Err(Error::InvalidArgument(format!(
            "{labels} labels but {scores} scores"
        )));
    }
    if labels == 0 {
        return Err(Error::EmptyInput("metric over zero documents".into()));
    }
    Ok(())
}

/// nDCG@k; 0.0 for a query without relevant documents.
pub fn ndcg_at_k(labels: &[u32], scores: &[f64], k: usize) -> Result<f64> {
    check_lengths(labels.len(), scores.len())?;
    if k == 0 {
        return Err(Error::InvalidArgument("cutoff k must be positive".into()));
    }
    let ideal = ideal_dcg(labels, k);
    if ideal == 0.0 {
        return Ok(0.0);
    }
    let ranked: Vec<u32> = ranking(scores).into_iter().map(|i| labels[i]).collect();
    Ok(dcg(&ranked, k) / ideal)
}

/// Mean nDCG@k over the queries that have at least one relevant document.
///
/// Returns 0.0 when no query is judgeable.
pub fn mean_ndcg_at_k(qs: &QuerySet, scores: &[Vec<f64>], k: usize) -> Result<f64> {
    if scores.len() != qs.queries.len() {
        return Err(Error::InvalidArgument(format!(
            "scores for {} queries, dataset has {}",
            scores.len(),
            qs.queries.len()
        )));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for (q, s) in qs.queries.iter().zip(scores) {
        if s.len() != q.documents.len() {
            return Err(Error::InvalidArgument(format!(
                "query {}: {} scores for {} documents",
                q.qid,
                s.len(),
                q.documents.len()
            )));
        }
        if !q.has_relevant() {
            continue;
        }
        total += ndcg_at_k(&q.labels(), s, k)?;
        counted += 1;
    }
    Ok(if counted == 0 {
        0.0
    } else {
        total / counted as f64
    })
}

/// Average precision with binary relevance `label > 0`.
pub fn average_precision(labels: &[u32], scores: &[f64]) -> Result<f64> {
    check_lengths(labels.len(), scores.len())?;
    let relevant = labels.iter().filter(|&&l| l > 0).count();
    if relevant == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, i) in ranking(scores).into_iter().enumerate() {
        if labels[i] > 0 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / relevant as f64)
}

/// Mean average precision over queries with at least one relevant document.
pub fn mean_average_precision(qs: &QuerySet, scores: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    let mut counted = 0usize;
    for (q, s) in qs.queries.iter().zip(scores) {
        if !q.has_relevant() {
            continue;
        }
        total += average_precision(&q.labels(), s)?;
        counted += 1;
    }
    Ok(if counted == 0 {
        0.0
    } else {
        total / counted as f64
    })
}

/// A correlation coefficient; `degenerate` marks an undefined value
/// (a constant input) reported as 0.0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankCorrelation {
    pub value: f64,
    pub degenerate: bool,
}

impl RankCorrelation {
    fn undefined() -> Self {
        RankCorrelation {
            value: 0.0,
            degenerate: true,
        }
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "correlation of sequences with lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument(
            "correlation needs at least two observations".into(),
        ));
    }
    Ok(())
}

fn tied_pairs(sorted: &[f64]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Counts strict inversions while merge-sorting `values` in place.
fn merge_count(values: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = values.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut values[..mid], &mut buf[..mid]);
    swaps += merge_count(&mut values[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if values[j] < values[i] {
            buf[k] = values[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = values[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&values[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&values[j..n]);
    values.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall tau-b in O(n log n) (Knight's algorithm).
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<RankCorrelation> {
    check_pair(x, y)?;
    let n = x.len() as u64;
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let n0 = n * (n - 1) / 2;
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let n1 = tied_pairs(&xs);
    let mut joint = 0u64;
    let mut run = 1u64;
    for w in pairs.windows(2) {
        if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
            run += 1;
        } else {
            joint += run * (run - 1) / 2;
            run = 1;
        }
    }
    joint += run * (run - 1) / 2;

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; ys.len()];
    let swaps = merge_count(&mut ys, &mut buf);
    let n2 = tied_pairs(&ys);

    if n1 == n0 || n2 == n0 {
        return Ok(RankCorrelation::undefined());
    }
    let numerator = n0 as f64 - n1 as f64 - n2 as f64 + joint as f64 - 2.0 * swaps as f64;
    let denom = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
    Ok(RankCorrelation {
        value: (numerator / denom).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// 1-based ranks with ties sharing their mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]].total_cmp(&x[order[i]]) == Ordering::Equal {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mean;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> RankCorrelation {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return RankCorrelation::undefined();
    }
    RankCorrelation {
        value: (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<RankCorrelation> {
    check_pair(x, y)?;
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_letor_str;
    use proptest::prelude::*;

    /// O(n^2) tau-b straight from the pair definition.
    fn kendall_brute(x: &[f64], y: &[f64]) -> f64 {
        let (mut conc, mut disc, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
        for i in 0..x.len() {
            for j in i + 1..x.len() {
                let dx = (x[i] - x[j]).signum() as i64 * ((x[i] != x[j]) as i64);
                let dy = (y[i] - y[j]).signum() as i64 * ((y[i] != y[j]) as i64);
                match (dx, dy) {
                    (0, 0) => {}
                    (0, _) => tx += 1,
                    (_, 0) => ty += 1,
                    _ if dx == dy => conc += 1,
                    _ => disc += 1,
                }
            }
        }
        let denom = (((conc + disc + tx) * (conc + disc + ty)) as f64).sqrt();
        (conc - disc) as f64 / denom
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[3, 2, 0], &[3.0, 2.0, 1.0], 3).unwrap(), 1.0);
        let v = ndcg_at_k(&[0, 1], &[2.0, 1.0], 2).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((v - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&[0, 0, 0], &[1.0, 5.0, 2.0], 3).unwrap(), 0.0);
        assert!(ndcg_at_k(&[1], &[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn ties_break_by_index() {
        // equal scores keep the original order: label 0 first
        let v = ndcg_at_k(&[0, 1], &[1.0, 1.0], 2).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn mean_excludes_unjudged_queries() {
        let qs = parse_letor_str(
            "1 qid:a 1:0\n0 qid:a 1:0\n2 qid:b 1:0\n0 qid:b 1:0\n0 qid:c 1:0\n0 qid:c 1:0\n",
        )
        .unwrap();
        // a: perfect, b: reversed, c: no relevant docs
        let scores = vec![vec![2.0, 1.0], vec![1.0, 2.0], vec![1.0, 2.0]];
        let b = 3.0 / 3f64.log2() / 3.0;
        let m = mean_ndcg_at_k(&qs, &scores, 2).unwrap();
        assert!((m - (1.0 + b) / 2.0).abs() < 1e-12);
        assert!(mean_ndcg_at_k(&qs, &scores[..2], 2).is_err());
    }

    #[test]
    fn average_precision_examples() {
        assert_eq!(average_precision(&[1, 0], &[2.0, 1.0]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0, 1], &[2.0, 1.0]).unwrap(), 0.5);
        assert_eq!(average_precision(&[0, 0], &[2.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn kendall_examples() {
        assert_eq!(
            kendall_tau(&[1., 2., 3.], &[1., 2., 3.]).unwrap().value,
            1.0
        );
        assert_eq!(
            kendall_tau(&[1., 2., 3.], &[3., 2., 1.]).unwrap().value,
            -1.0
        );
        let t = kendall_tau(&[1., 2., 3., 4.], &[1., 3., 2., 4.])
            .unwrap()
            .value;
        assert!((t - 2.0 / 3.0).abs() < 1e-9);
        let c = kendall_tau(&[1., 1., 1.], &[1., 2., 3.]).unwrap();
        assert!(c.degenerate && c.value == 0.0);
        assert!(kendall_tau(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn spearman_examples() {
        let x = [1., 2., 3., 4., 5.];
        assert!((spearman(&x, &x).unwrap().value - 1.0).abs() < 1e-12);
        let rev = [5., 4., 3., 2., 1.];
        assert!((spearman(&x, &rev).unwrap().value + 1.0).abs() < 1e-12);
        let y = [1., 2., 3., 5., 4.];
        assert!((spearman(&x, &y).unwrap().value - 0.9).abs() < 1e-9);
        let c = spearman(&[2., 2.], &[1., 2.]).unwrap();
        assert!(c.degenerate);
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(
            average_ranks(&[10., 20., 10., 30.]),
            vec![1.5, 3.0, 1.5, 4.0]
        );
    }

    fn tied_values() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec((0i32..6).prop_map(|v| v as f64), 2..40)
    }

    proptest! {
        #[test]
        fn kendall_matches_brute_force(x in tied_values(), seed in 0u64..1000) {
            let y: Vec<f64> = x.iter().enumerate()
                .map(|(i, _)| ((i as u64 * 7919 + seed) % 5) as f64)
                .collect();
            let fast = kendall_tau(&x, &y).unwrap();
            if !fast.degenerate {
                prop_assert!((fast.value - kendall_brute(&x, &y)).abs() < 1e-12);
            }
        }

        #[test]
        fn correlations_are_symmetric_and_monotone_invariant(
            x in prop::collection::vec(-100.0f64..100.0, 3..30),
            y_seed in prop::collection::vec(-100.0f64..100.0, 30),
        ) {
            let y = &y_seed[..x.len()];
            let xt: Vec<f64> = x.iter().map(|v| (v / 50.0).exp() * 3.0 - 1.0).collect();
            for f in [kendall_tau, spearman] {
                let a = f(&x, y).unwrap().value;
                prop_assert!((a - f(y, &x).unwrap().value).abs() < 1e-12);
                prop_assert!((a - f(&xt, y).unwrap().value).abs() < 1e-9);
                prop_assert!((-1.0..=1.0).contains(&a));
            }
        }

        #[test]
        fn ndcg_invariant_to_monotone_scores(
            labels in prop::collection::vec(0u32..5, 1..20),
            raw in prop::collection::vec(-5.0f64..5.0, 20),
            k in 1usize..10,
        ) {
            let scores = &raw[..labels.len()];
            let moved: Vec<f64> = scores.iter().map(|s| 2.0 * s + 7.0).collect();
            let a = ndcg_at_k(&labels, scores, k).unwrap();
            prop_assert_eq!(a, ndcg_at_k(&labels, &moved, k).unwrap());
            prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
            if labels.iter().any(|&l| l > 0) {
                let ideal: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
                prop_assert!((ndcg_at_k(&labels, &ideal, k).unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }
}
