//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

#![allow(clippy::needless_range_loop, clippy::type_complexity)]

use std::collections::BTreeSet;
use std::time::Instant;

use nfs_core::baselines::{self, CorrelationSample, ImportanceMetric};
use nfs_core::data::{self, FeatureRole, Query, QuerySet, SyntheticConfig};
use nfs_core::diffcore::{Graph, NodeId, Tensor};
use nfs_core::eval;
use nfs_core::groupmine::{self, FeatureGroupSet, NullModelConfig, NullSampling};
use nfs_core::metrics;
use nfs_core::reranker::{self, Mode, ModelParams, ParamRole, RerankerConfig, Segment};
use nfs_core::saliency::{self, FeatureGroup};
use nfs_core::select::{self, NfsConfig, SimilarityMatrix};
use nfs_core::trainer::{self, TrainConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("1 gradient correctness", gradient_correctness),
        ("2 loss fidelity", loss_fidelity),
        ("3 null-model analytics", null_model_analytics),
        ("4 pruning rule oracle", pruning_oracle),
        ("5 clustering oracle", clustering_oracle),
        ("6 synthetic recovery", synthetic_recovery),
        ("7 subset performance", subset_performance),
        ("8 baseline sanity", baseline_sanity),
        ("9 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let r = check();
        let tag = if r.pass { "PASS" } else { "FAIL" };
        if !r.pass {
            failed += 1;
        }
        println!(
            "{tag} [{name}] {} ({:.1}s)",
            r.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------- 1 ----------

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst relative error between backward and central differences of
/// `sum(w * f(inputs))`.
fn fd_check(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId) -> f64 {
    let h = 1e-4;
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &ids);
        (g, ids, out)
    };
    let (g0, _, out0) = eval(inputs);
    let (r, c) = g0.value(out0).dims().unwrap();
    let w = random_tensor(&mut ChaCha8Rng::seed_from_u64(7), r, c, -1.0, 1.0);
    let objective = |ins: &[Tensor]| {
        let (g, _, out) = eval(ins);
        g.value(out)
            .values()
            .iter()
            .zip(w.values())
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let (mut g, ids, out) = eval(inputs);
    let wn = g.constant(w.clone());
    let prod = g.mul(out, wn).unwrap();
    let root = g.sum(prod, None).unwrap();
    let grads = g.backward(root).unwrap();
    let mut worst: f64 = 0.0;
    for (k, id) in ids.iter().enumerate() {
        let zeros = Tensor::zeros_like(&inputs[k]);
        let analytic = grads.get(*id).unwrap_or(&zeros);
        for e in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].values_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[k].values_mut()[e] -= h;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic.values()[e], numeric));
        }
    }
    worst
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut rt = |r, c, lo, hi| random_tensor(&mut rng, r, c, lo, hi);
    let a = rt(3, 4, -1.0, 1.0);
    let b = rt(3, 4, -1.0, 1.0);
    let m = rt(4, 2, -1.0, 1.0);
    let pos = rt(3, 4, 0.5, 2.0);
    let row = rt(1, 4, -1.0, 1.0);
    let col = rt(3, 1, -1.0, 1.0);
    // keep relu inputs away from the kink
    let away = a.map_values(|v| if v.abs() < 0.1 { v + 0.3 } else { v });

    type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>;
    let cases: Vec<(&str, Vec<Tensor>, Build)> = vec![
        (
            "matmul",
            vec![a.clone(), m.clone()],
            Box::new(|g, x| g.matmul(x[0], x[1]).unwrap()),
        ),
        (
            "add",
            vec![a.clone(), b.clone()],
            Box::new(|g, x| g.add(x[0], x[1]).unwrap()),
        ),
        (
            "add_row_broadcast",
            vec![a.clone(), row.clone()],
            Box::new(|g, x| g.add(x[0], x[1]).unwrap()),
        ),
        (
            "sub_col_broadcast",
            vec![a.clone(), col.clone()],
            Box::new(|g, x| g.sub(x[0], x[1]).unwrap()),
        ),
        (
            "mul",
            vec![a.clone(), b.clone()],
            Box::new(|g, x| g.mul(x[0], x[1]).unwrap()),
        ),
        (
            "div",
            vec![a.clone(), pos.clone()],
            Box::new(|g, x| g.div(x[0], x[1]).unwrap()),
        ),
        ("relu", vec![away], Box::new(|g, x| g.relu(x[0]))),
        ("sigmoid", vec![a.clone()], Box::new(|g, x| g.sigmoid(x[0]))),
        ("log1p", vec![pos.clone()], Box::new(|g, x| g.log1p(x[0]))),
        (
            "signed_log1p",
            vec![a.clone()],
            Box::new(|g, x| g.signed_log1p(x[0])),
        ),
        (
            "soft_sign",
            vec![a.clone()],
            Box::new(|g, x| g.soft_sign(x[0])),
        ),
        ("sqrt", vec![pos.clone()], Box::new(|g, x| g.sqrt(x[0]))),
        (
            "softmax",
            vec![a.clone()],
            Box::new(|g, x| g.softmax(x[0]).unwrap()),
        ),
        (
            "transpose",
            vec![a.clone()],
            Box::new(|g, x| g.transpose(x[0]).unwrap()),
        ),
        (
            "concat_rows",
            vec![a.clone(), b.clone()],
            Box::new(|g, x| g.concat(&[x[0], x[1]], 0).unwrap()),
        ),
        (
            "concat_cols",
            vec![a.clone(), col.clone()],
            Box::new(|g, x| g.concat(&[x[0], x[1]], 1).unwrap()),
        ),
        (
            "slice",
            vec![a.clone()],
            Box::new(|g, x| g.slice(x[0], 1, 1, 2).unwrap()),
        ),
        (
            "sum_all",
            vec![a.clone()],
            Box::new(|g, x| g.sum(x[0], None).unwrap()),
        ),
        (
            "sum_rows",
            vec![a.clone()],
            Box::new(|g, x| g.sum(x[0], Some(0)).unwrap()),
        ),
        (
            "sum_cols",
            vec![a.clone()],
            Box::new(|g, x| g.sum(x[0], Some(1)).unwrap()),
        ),
        (
            "mean_rows",
            vec![a.clone()],
            Box::new(|g, x| g.mean(x[0], Some(0)).unwrap()),
        ),
        (
            "scale",
            vec![a.clone()],
            Box::new(|g, x| g.scale(x[0], -2.5)),
        ),
        (
            "add_scalar",
            vec![a.clone()],
            Box::new(|g, x| g.add_scalar(x[0], 0.7)),
        ),
        (
            "reused_operand",
            vec![a.clone()],
            Box::new(|g, x| {
                let s = g.sigmoid(x[0]);
                g.mul(s, x[0]).unwrap()
            }),
        ),
    ];
    let mut worst = (0.0f64, "");
    for (name, inputs, build) in &cases {
        let e = fd_check(inputs, build.as_ref());
        if e > worst.0 || e.is_nan() {
            worst = (e, name);
        }
    }

    let e2e = reranker_fd();
    let pass = worst.0 < 1e-3 && e2e < 1e-3;
    outcome(
        pass,
        format!(
            "{} primitives, worst rel err {:.2e} ({}); reranker end to end {:.2e}; tol 1e-3",
            cases.len(),
            worst.0,
            worst.1,
            e2e
        ),
    )
}

/// Scores of a two-layer reranker against inputs and every parameter.
fn reranker_fd() -> f64 {
    let config = RerankerConfig {
        n_attention_layers: 2,
        n_heads: 2,
        hidden_size: 8,
        ..RerankerConfig::default()
    };
    let d = 4;
    let params = ModelParams::init(&config, d, 11).unwrap();
    let docs = random_tensor(&mut ChaCha8Rng::seed_from_u64(12), 5, d, -1.5, 1.5);
    let w: Vec<f64> = {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        (0..docs.rows())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect()
    };
    let objective = |x: &Tensor, p: &ModelParams| {
        let s = reranker::forward(x, p, &config, Mode::Eval).unwrap();
        s.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
    };

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
        &params,
        &config,
        ParamRole::Leaves,
        Mode::Eval,
    )
    .unwrap();
    let wn = g.constant(Tensor::matrix(w.len(), 1, w.clone()).unwrap());
    let prod = g.mul(out.scores, wn).unwrap();
    let root = g.sum(prod, None).unwrap();
    let grads = g.backward(root).unwrap();

    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let gx = grads.get(x).unwrap();
    for e in 0..docs.len() {
        let mut plus = docs.clone();
        plus.values_mut()[e] += h;
        let mut minus = docs.clone();
        minus.values_mut()[e] -= h;
        let numeric = (objective(&plus, &params) - objective(&minus, &params)) / (2.0 * h);
        worst = worst.max(rel_err(gx.values()[e], numeric));
    }
    for (k, id) in out.params.iter().enumerate() {
        let n = params.trainable()[k].len();
        let zeros = Tensor::zeros_like(params.trainable()[k]);
        let analytic = grads.get(*id).unwrap_or(&zeros);
        for e in 0..n {
            let mut plus = params.clone();
            plus.trainable_mut()[k].values_mut()[e] += h;
            let mut minus = params.clone();
            minus.trainable_mut()[k].values_mut()[e] -= h;
            let numeric = (objective(&docs, &plus) - objective(&docs, &minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic.values()[e], numeric));
        }
    }
    worst
}

// ---------- 2 ----------

fn loss_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    while n < 100 {
        let scores: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[1] - w[0] < 0.02) {
            continue;
        }
        let labels: Vec<u32> = (0..10).map(|_| rng.random_range(0..5)).collect();
        if labels.iter().all(|&l| l == 0) {
            continue;
        }
        let approx = reranker::approx_ndcg_value(&scores, &labels, 1e-3).unwrap();
        let exact = -metrics::ndcg_at_k(&labels, &scores, 10).unwrap();
        worst = worst.max((approx - exact).abs());
        n += 1;
    }
    outcome(
        worst < 1e-3,
        format!("100 queries, max |approx - exact| {worst:.2e}; tol 1e-3"),
    )
}

// ---------- 3 ----------

fn null_model_analytics() -> Outcome {
    let (d, t, k, maps) = (10, 0.95, 500, 1000u64);
    let mut targets: Vec<FeatureGroup> = (0..d)
        .map(|j| FeatureGroup::new(vec![j]).unwrap())
        .collect();
    for (a, b) in [(0, 1), (2, 7), (4, 9), (3, 5), (6, 8)] {
        targets.push(FeatureGroup::new(vec![a, b]).unwrap());
    }
    let mut worst_z: f64 = 0.0;
    for sampling in [NullSampling::Literal, NullSampling::Binomial] {
        let freqs =
            groupmine::random_group_frequencies(d, maps, k, t, 77, &targets, sampling).unwrap();
        for (g, f) in targets.iter().zip(&freqs) {
            let p = groupmine::exact_match_probability(g.len(), d, t);
            let mean = maps as f64 * p;
            let sd = (maps as f64 * p * (1.0 - p)).sqrt();
            let emp = f.iter().sum::<u64>() as f64 / k as f64;
            let z = (emp - mean).abs() / (sd / (k as f64).sqrt());
            worst_z = worst_z.max(z);
        }
    }
    outcome(
        worst_z <= 3.0,
        format!(
            "{} groups x 2 modes, worst |mean - expected| = {worst_z:.2} standard errors; tol 3",
            targets.len()
        ),
    )
}

// ---------- 4 ----------

fn pruning_fixture() -> FeatureGroupSet {
    let mut set = FeatureGroupSet {
        maps_total: 500,
        ..Default::default()
    };
    let groups: [(&[usize], u64); 8] = [
        (&[0], 60),
        (&[1], 34),
        (&[2], 20),
        (&[3], 3),
        (&[0, 1], 8),
        (&[2, 3], 1),
        (&[0, 1, 2], 3),
        (&[4, 5, 6, 7], 1),
    ];
    for (members, count) in groups {
        set.groups
            .insert(FeatureGroup::new(members.to_vec()).unwrap(), count);
    }
    set
}

fn pruning_oracle() -> Outcome {
    let real = pruning_fixture();
    let mut disagreements = Vec::new();
    let mut survivors = 0;
    for seed in 1..=20u64 {
        let cfg = NullModelConfig {
            k: 1000,
            t: 0.95,
            alpha: 0.02,
            seed,
        };
        let lit = groupmine::prune(&real, 8, &cfg, NullSampling::Literal).unwrap();
        let bin = groupmine::prune(&real, 8, &cfg, NullSampling::Binomial).unwrap();
        for (a, b) in lit.decisions.iter().zip(&bin.decisions) {
            if a.survived != b.survived {
                disagreements.push(format!("seed {seed} group {}", a.group.to_one_based()));
            }
        }
        survivors += bin.survivors.len();
    }
    outcome(
        disagreements.is_empty(),
        format!(
            "8 groups x 20 seeds, {} disagreements, mean survivors {:.1}{}",
            disagreements.len(),
            survivors as f64 / 20.0,
            if disagreements.is_empty() {
                String::new()
            } else {
                format!(": {disagreements:?}")
            }
        ),
    )
}

// ---------- 5 ----------

/// Every partition reachable by some sequence of max-link merges.
fn enumerate_partitions(
    sim: &[Vec<f64>],
    clusters: Vec<Vec<usize>>,
    target: usize,
    out: &mut BTreeSet<Vec<Vec<usize>>>,
) {
    if clusters.len() == target {
        let mut p: Vec<Vec<usize>> = clusters
            .into_iter()
            .map(|mut c| {
                c.sort_unstable();
                c
            })
            .collect();
        p.sort();
        out.insert(p);
        return;
    }
    let link = |a: &[usize], b: &[usize]| {
        a.iter()
            .flat_map(|&x| b.iter().map(move |&y| (x, y)))
            .map(|(x, y)| sim[x][y])
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut best = f64::NEG_INFINITY;
    let mut pairs = Vec::new();
    for i in 0..clusters.len() {
        for j in i + 1..clusters.len() {
            let l = link(&clusters[i], &clusters[j]);
            if l > best {
                best = l;
                pairs.clear();
            }
            if l == best {
                pairs.push((i, j));
            }
        }
    }
    for (i, j) in pairs {
        let mut next = clusters.clone();
        let b = next.remove(j);
        next[i].extend(b);
        enumerate_partitions(sim, next, target, out);
    }
}

fn clustering_oracle() -> Outcome {
    let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut checked, mut unique, mut mismatches) = (0, 0, 0);
    for n in 1..=5usize {
        for _ in 0..150 {
            let mut sim = vec![vec![1.0; n]; n];
            for i in 0..n {
                for j in i + 1..n {
                    let v = grid[rng.random_range(0..grid.len())];
                    sim[i][j] = v;
                    sim[j][i] = v;
                }
            }
            let matrix =
                SimilarityMatrix::new(n, sim.iter().flatten().copied().collect(), vec![true; n])
                    .unwrap();
            for target in 1..=n {
                let got = select::single_linkage(&matrix, target).unwrap();
                let mut all = BTreeSet::new();
                enumerate_partitions(&sim, (0..n).map(|i| vec![i]).collect(), target, &mut all);
                let mut sorted = got.clone();
                sorted.sort();
                if !all.contains(&sorted) {
                    mismatches += 1;
                }
                if all.len() == 1 {
                    unique += 1;
                }
                checked += 1;
            }
        }
    }
    outcome(
        mismatches == 0,
        format!("{checked} (matrix, cluster count) cases, {unique} with a unique answer, {mismatches} outside the enumerated set"),
    )
}

// ---------- 6 & 7 ----------

/// Desk-scale training setup used for the synthetic criteria.
fn synthetic_nfs_config(seed: u64) -> NfsConfig {
    NfsConfig {
        reranker: RerankerConfig {
            hidden_size: 8,
            ..RerankerConfig::default()
        },
        train: TrainConfig {
            epochs: 20,
            batch_size: 8,
            learning_rate: 0.02,
            seed,
            ..TrainConfig::default()
        },
        null: NullModelConfig {
            seed,
            ..NullModelConfig::default()
        },
        sampling: NullSampling::Binomial,
    }
}

fn synthetic(seed: u64, n_queries: usize) -> (QuerySet, Vec<FeatureRole>) {
    data::generate_synthetic(&SyntheticConfig {
        seed,
        n_queries,
        docs_per_query: 20,
        informative: 3,
        duplicates_per_informative: 2,
        noise: 4,
    })
    .unwrap()
}

struct SeedRun {
    seed: u64,
    kept: Vec<usize>,
    recovered: bool,
}

fn nfs_on_seed(seed: u64) -> SeedRun {
    let (train, roles) = synthetic(seed, 50);
    let empty = QuerySet::new(Vec::new(), train.feature_count).unwrap();
    let out = select::nfs_select(&train, &empty, &synthetic_nfs_config(seed), 3).unwrap();
    let kept = out.selection.sorted_kept();
    let families: BTreeSet<usize> = kept
        .iter()
        .filter_map(|&f| data::family_of(&roles, f))
        .collect();
    let recovered =
        families.len() == 3 && kept.iter().all(|&f| data::family_of(&roles, f).is_some());
    SeedRun {
        seed,
        kept,
        recovered,
    }
}

fn nfs_runs() -> &'static [SeedRun] {
    static RUNS: std::sync::OnceLock<Vec<SeedRun>> = std::sync::OnceLock::new();
    RUNS.get_or_init(|| SEEDS.iter().map(|&s| nfs_on_seed(s)).collect())
}

fn synthetic_recovery() -> Outcome {
    let runs = nfs_runs();
    let ok = runs.iter().filter(|r| r.recovered).count();
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| {
            let ids: Vec<usize> = r.kept.iter().map(|f| f + 1).collect();
            format!(
                "seed {} {:?} {}",
                r.seed,
                ids,
                if r.recovered { "ok" } else { "miss" }
            )
        })
        .collect();
    outcome(
        ok >= 4,
        format!(
            "{ok}/5 seeds recover one feature per family, need 4; {}",
            per_seed.join("; ")
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn subset_performance() -> Outcome {
    let runs = nfs_runs();
    let (mut full, mut nfs, mut random) = (Vec::new(), Vec::new(), Vec::new());
    for r in runs {
        // prefix-stable: the first 50 queries are the selection data
        let (all, _) = synthetic(r.seed, 100);
        let d = all.feature_count;
        let train = QuerySet::new(all.queries[..50].to_vec(), d).unwrap();
        let test = QuerySet::new(all.queries[50..].to_vec(), d).unwrap();
        let empty = QuerySet::new(Vec::new(), d).unwrap();
        let cfg = synthetic_nfs_config(r.seed);
        let run = |features: &[usize]| {
            eval::evaluate_subset(
                &train,
                &empty,
                &test,
                features,
                None,
                &cfg.reranker,
                &cfg.train,
                3,
            )
            .unwrap()
            .ndcg
        };
        full.push(run(&(0..d).collect::<Vec<_>>()));
        nfs.push(run(&r.kept));
        random.push(run(&eval::random_subset(d, 3, r.seed).unwrap()));
    }
    let (mf, mn, mr) = (
        median(full.clone()),
        median(nfs.clone()),
        median(random.clone()),
    );
    let pass = (mf - mn).abs() <= 0.05 && mn - mr >= 0.05;
    outcome(
        pass,
        format!(
            "median nDCG@3 full {mf:.4}, nfs {mn:.4}, random {mr:.4}; need |full-nfs|<=0.05 and nfs-random>=0.05; per seed nfs {:?}",
            nfs.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    )
}

// ---------- 8 ----------

fn dataset_from_columns(cols: &[Vec<f64>], labels: &[u32], per_query: usize) -> QuerySet {
    let n = labels.len();
    let d = cols.len();
    let queries = (0..n / per_query)
        .map(|q| Query {
            qid: q.to_string(),
            documents: (q * per_query..(q + 1) * per_query)
                .map(|i| data::Document {
                    features: (0..d).map(|j| cols[j][i]).collect(),
                    label: labels[i],
                    doc_id: None,
                })
                .collect(),
        })
        .collect();
    QuerySet::new(queries, d).unwrap()
}

fn perfect_classes(corr: &SimilarityMatrix) -> usize {
    let d = corr.size();
    let mut class: Vec<usize> = (0..d).collect();
    for a in 0..d {
        for b in a + 1..d {
            if corr.get(a, b) >= 1.0 - 1e-12 {
                let (from, to) = (class[b], class[a]);
                class
                    .iter_mut()
                    .filter(|c| **c == from)
                    .for_each(|c| *c = to);
            }
        }
    }
    class.iter().collect::<BTreeSet<_>>().len()
}

fn baseline_sanity() -> Outcome {
    let config = PropConfig {
        cases: 48,
        failure_persistence: None,
        rng_algorithm: proptest::test_runner::RngAlgorithm::ChaCha,
        ..PropConfig::default()
    };
    let strategy = (
        proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 24), 2..5),
        proptest::collection::vec(0u32..3, 24),
        proptest::collection::vec(0usize..6, 1..4),
        1usize..5,
    );
    let sample = CorrelationSample::default();

    // hcas: monotone copies (|spearman| = 1) never end up kept together
    let mut runner = TestRunner::new_with_rng(
        config.clone(),
        proptest::test_runner::TestRng::deterministic_rng(config.rng_algorithm),
    );
    let hcas = runner.run(&strategy, |(base, labels, copies, n_keep)| {
        let mut cols = base.clone();
        for &c in &copies {
            let src = &base[c % base.len()];
            cols.push(src.iter().map(|v| 2.0 * v.powi(3) + 1.0).collect());
        }
        let d = cols.len();
        let qs = dataset_from_columns(&cols, &labels, 6);
        let corr = baselines::absolute_correlations(&qs, &sample, metrics::spearman).unwrap();
        // only as many features as there are |rho| = 1 classes can be kept apart
        let n_keep = n_keep.min(d - 1).min(perfect_classes(&corr));
        let sel = baselines::hcas_select(&qs, 3, n_keep, &sample).unwrap();
        for (i, &a) in sel.kept.iter().enumerate() {
            for &b in &sel.kept[i + 1..] {
                prop_assert!(
                    corr.get(a, b) < 1.0 - 1e-12,
                    "kept {a} and {b} with |rho| = 1"
                );
            }
        }
        Ok(())
    });

    // gas with no redundancy penalty is a plain importance sort
    let mut runner = TestRunner::new_with_rng(
        config.clone(),
        proptest::test_runner::TestRng::deterministic_rng(config.rng_algorithm),
    );
    let gas = runner.run(&strategy, |(cols, labels, _, n_keep)| {
        let qs = dataset_from_columns(&cols, &labels, 6);
        let d = qs.feature_count;
        let n_keep = n_keep.min(d);
        let sel = baselines::gas_select(&qs, 3, n_keep, 0.0, &sample).unwrap();
        let imp = baselines::single_feature_importance(&qs, 3, ImportanceMetric::Ndcg).unwrap();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| imp[b].total_cmp(&imp[a]).then(a.cmp(&b)));
        prop_assert_eq!(&sel.kept, &order[..n_keep].to_vec());
        Ok(())
    });
    let describe = |r: &Result<(), _>| match r {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("{e}"),
    };
    outcome(
        hcas.is_ok() && gas.is_ok(),
        format!(
            "48 cases each; hcas never keeps |rho|=1 pairs: {}; gas(c=0) = importance sort: {}",
            describe(&hcas),
            describe(&gas)
        ),
    )
}

// ---------- 9 ----------

/// Everything the pipeline produces for one seed, serialized.
fn pipeline_fingerprint(seed: u64) -> Vec<String> {
    let (all, _) = synthetic(seed, 24);
    let d = all.feature_count;
    let train = QuerySet::new(all.queries[..16].to_vec(), d).unwrap();
    let test = QuerySet::new(all.queries[16..].to_vec(), d).unwrap();
    let cfg = NfsConfig {
        reranker: RerankerConfig {
            hidden_size: 8,
            n_heads: 1,
            ..RerankerConfig::default()
        },
        train: TrainConfig {
            epochs: 4,
            batch_size: 4,
            learning_rate: 0.01,
            seed,
            ..TrainConfig::default()
        },
        null: NullModelConfig {
            k: 300,
            seed,
            ..NullModelConfig::default()
        },
        sampling: NullSampling::Binomial,
    };
    let j = |v: &dyn erased::Ser| v.json();
    let mut out = Vec::new();
    let (model, history) = trainer::train(&train, &test, &cfg.reranker, &cfg.train).unwrap();
    out.push(j(&model));
    out.push(j(&history));
    let maps = saliency::dataset_saliency(&model, &train).unwrap();
    out.push(j(&maps
        .iter()
        .flatten()
        .map(|m| m.values.clone())
        .collect::<Vec<_>>()));
    let groups = saliency::mine_groups(&model, &train, cfg.null.t).unwrap();
    let mut report = Vec::new();
    groups.write_report(&mut report).unwrap();
    out.push(String::from_utf8(report).unwrap());
    for sampling in [NullSampling::Binomial, NullSampling::Literal] {
        let pruned = groupmine::prune(&groups, d, &cfg.null, sampling).unwrap();
        out.push(j(&pruned.decisions));
    }
    let nfs = select::nfs_select_with_model(&train, model, history, &cfg, 3).unwrap();
    out.push(j(&nfs.selection));
    let sample = CorrelationSample {
        max_docs: 200,
        seed,
    };
    out.push(j(
        &baselines::gas_select(&train, 3, 4, 0.01, &sample).unwrap()
    ));
    out.push(j(&baselines::hcas_select(&train, 3, 4, &sample).unwrap()));
    let empty = QuerySet::new(Vec::new(), d).unwrap();
    let ev = eval::evaluate_subset(
        &train,
        &empty,
        &test,
        &[0, 2, 5],
        Some(30.0),
        &cfg.reranker,
        &cfg.train,
        3,
    )
    .unwrap();
    out.push(format!("{:?} {}", ev.ndcg.to_bits(), ev.n_heads));
    out
}

mod erased {
    pub trait Ser {
        fn json(&self) -> String;
    }
    impl<T: serde::Serialize> Ser for T {
        fn json(&self) -> String {
            serde_json::to_string(self).unwrap()
        }
    }
}

fn determinism() -> Outcome {
    let stages = [
        "model",
        "history",
        "saliency",
        "groups",
        "prune binomial",
        "prune literal",
        "nfs",
        "gas",
        "hcas",
        "eval",
    ];
    let first = pipeline_fingerprint(9);
    let again = pipeline_fingerprint(9);
    // a single worker thread must give the same bits as the default pool
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let single = pool.install(|| pipeline_fingerprint(9));
    let other = pipeline_fingerprint(10);
    let differing: Vec<&str> = stages
        .iter()
        .zip(first.iter().zip(again.iter().zip(&single)))
        .filter(|(_, (a, (b, c)))| a != b || a != c)
        .map(|(s, _)| *s)
        .collect();
    let seed_sensitive = first[0] != other[0];
    outcome(
        differing.is_empty() && seed_sensitive,
        format!(
            "{} stages compared over two runs and a 1-thread run; differing: {:?}; other seed changes the model: {seed_sensitive}",
            stages.len(),
            differing
        ),
    )
}
