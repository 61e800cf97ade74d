//! Attention-based listwise reranker and the ApproxNDCG loss.
//!
//! Layout, per query of `n` documents with `d` features:
//!
//! 1. feature transformation: per feature, a softmax-weighted mix of the
//!    identity, `sign(x)·ln(1+|x|)` and `x/(1+|x|)`, optionally projected to
//!    an embedding width;
//! 2. `n_attention_layers` multi-head self-attention layers across the
//!    documents of the query, each with a residual connection;
//! 3. batch norm, a ReLU hidden layer with dropout, batch norm, and a linear
//!    output producing one score per document.
//!
//! There is no positional encoding, so the model is permutation-equivariant
//! over documents in eval mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::metrics;

const BN_EPS: f64 = 1e-5;
const N_TRANSFORMS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankerConfig {
    pub n_attention_layers: usize,
    pub n_heads: usize,
    /// Width of the projection after the transformation layer; 0 disables it.
    pub feature_embedding: usize,
    pub hidden_size: usize,
    pub dropout_p: f64,
    pub bn_momentum: f64,
    /// ApproxNDCG smoothing temperature.
    pub temperature: f64,
}

impl Default for RerankerConfig {
    fn default() -> Self {
        RerankerConfig {
            n_attention_layers: 1,
            n_heads: 1,
            feature_embedding: 0,
            hidden_size: 128,
            dropout_p: 0.5,
            bn_momentum: 0.4,
            temperature: 0.1,
        }
    }
}

impl RerankerConfig {
    /// Width the attention layers operate at.
    pub fn model_width(&self, feature_count: usize) -> usize {
        if self.feature_embedding > 0 {
            self.feature_embedding
        } else {
            feature_count
        }
    }

    pub fn validate(&self, feature_count: usize) -> Result<()> {
        let width = self.model_width(feature_count);
        if feature_count == 0 || self.n_heads == 0 || self.hidden_size == 0 {
            return Err(Error::InvalidArgument(
                "feature count, heads and hidden size must be positive".into(),
            ));
        }
        if !width.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "{} heads do not divide model width {width}",
                self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidArgument(format!(
                "dropout {}",
                self.dropout_p
            )));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "batch-norm momentum {}",
                self.bn_momentum
            )));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Weight `in x out` and bias `1 x out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: glorot(rng, fan_in, fan_out),
            bias: Tensor::zeros(1, fan_out),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub output: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        BatchNorm {
            gamma: Tensor::filled(1, width, 1.0),
            beta: Tensor::zeros(1, width),
            running_mean: Tensor::zeros(1, width),
            running_var: Tensor::filled(1, width, 1.0),
        }
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    fn update(&mut self, stats: &BatchStats, momentum: f64) {
        let blend = |run: &mut Tensor, batch: &Tensor| {
            for (r, b) in run.values_mut().iter_mut().zip(batch.values()) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
        };
        blend(&mut self.running_mean, &stats.mean);
        blend(&mut self.running_var, &stats.var);
    }
}

/// Every array of the reranker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub feature_count: usize,
    /// `d x 3` logits of the per-feature transformation mix.
    pub transform_logits: Tensor,
    pub embedding: Option<Linear>,
    pub attention: Vec<AttentionParams>,
    pub input_norm: BatchNorm,
    pub hidden: Linear,
    pub hidden_norm: BatchNorm,
    pub output: Linear,
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let values = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::matrix(fan_in, fan_out, values).expect("positive dims")
}

impl ModelParams {
    pub fn init(config: &RerankerConfig, feature_count: usize, seed: u64) -> Result<Self> {
        config.validate(feature_count)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = config.model_width(feature_count);
        let embedding =
            (config.feature_embedding > 0).then(|| Linear::glorot(&mut rng, feature_count, width));
        let attention = (0..config.n_attention_layers)
            .map(|_| AttentionParams {
                query: glorot(&mut rng, width, width),
                key: glorot(&mut rng, width, width),
                value: glorot(&mut rng, width, width),
                output: glorot(&mut rng, width, width),
            })
            .collect();
        Ok(ModelParams {
            feature_count,
            transform_logits: Tensor::zeros(feature_count, N_TRANSFORMS),
            embedding,
            attention,
            input_norm: BatchNorm::new(width),
            hidden: Linear::glorot(&mut rng, width, config.hidden_size),
            hidden_norm: BatchNorm::new(config.hidden_size),
            output: Linear::glorot(&mut rng, config.hidden_size, 1),
        })
    }

    /// Learnable arrays in a fixed order (running statistics excluded).
    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.transform_logits];
        if let Some(e) = &self.embedding {
            out.extend([&e.weight, &e.bias]);
        }
        for a in &self.attention {
            out.extend([&a.query, &a.key, &a.value, &a.output]);
        }
        out.extend([
            &self.input_norm.gamma,
            &self.input_norm.beta,
            &self.hidden.weight,
            &self.hidden.bias,
            &self.hidden_norm.gamma,
            &self.hidden_norm.beta,
            &self.output.weight,
            &self.output.bias,
        ]);
        out
    }

    /// Same order as [`ModelParams::trainable`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.transform_logits];
        if let Some(e) = &mut self.embedding {
            out.extend([&mut e.weight, &mut e.bias]);
        }
        for a in &mut self.attention {
            out.extend([&mut a.query, &mut a.key, &mut a.value, &mut a.output]);
        }
        out.extend([
            &mut self.input_norm.gamma,
            &mut self.input_norm.beta,
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.hidden_norm.gamma,
            &mut self.hidden_norm.beta,
            &mut self.output.weight,
            &mut self.output.bias,
        ]);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.trainable().iter().all(|t| t.is_finite())
            && [&self.input_norm, &self.hidden_norm]
                .iter()
                .all(|bn| bn.running_mean.is_finite() && bn.running_var.is_finite())
    }

    /// Softmax of the transformation logits, `d x 3`.
    pub fn transform_weights(&self) -> Vec<[f64; 3]> {
        (0..self.feature_count)
            .map(|j| {
                let row = self.transform_logits.row(j);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let s: f64 = e.iter().sum();
                [e[0] / s, e[1] / s, e[2] / s]
            })
            .collect()
    }
}

/// Train mode draws dropout masks from the supplied generator and
/// normalizes with batch statistics; eval mode is deterministic.
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

/// Whether parameters enter the graph as differentiable leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Leaves,
    Constants,
}

/// Batch mean and biased variance seen by a batch-norm layer in train mode.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Graph handles produced by [`build_scores`].
#[derive(Debug)]
pub struct ScoreGraph {
    /// `rows x 1` scores for all documents of the batch.
    pub scores: NodeId,
    /// Parameter nodes, in [`ModelParams::trainable`] order.
    pub params: Vec<NodeId>,
    /// Batch statistics of the two batch-norm layers (train mode only).
    pub norm_stats: Option<(BatchStats, BatchStats)>,
}

/// Row range of one query inside a stacked batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Stacks per-query documents into one matrix and returns the segments.
pub fn stack_queries(matrices: &[Tensor]) -> Result<(Tensor, Vec<Segment>)> {
    let cols = matrices
        .first()
        .map(Tensor::cols)
        .ok_or_else(|| Error::EmptyInput("no queries to stack".into()))?;
    let mut values = Vec::new();
    let mut segments = Vec::with_capacity(matrices.len());
    let mut start = 0;
    for m in matrices {
        if m.cols() != cols {
            return Err(Error::shape("stack", &[start, cols], m.shape()));
        }
        segments.push(Segment {
            start,
            len: m.rows(),
        });
        start += m.rows();
        values.extend_from_slice(m.values());
    }
    Ok((Tensor::matrix(start, cols, values)?, segments))
}

fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let xw = g.matmul(x, w)?;
    g.add(xw, b)
}

/// Per-feature transformation mix on a `rows x d` input node.
pub fn transform_node(g: &mut Graph, x: NodeId, logits: NodeId) -> Result<NodeId> {
    let d = g.value(logits).rows();
    if g.value(x).cols() != d {
        return Err(Error::shape(
            "feature_transform",
            g.value(x).shape(),
            g.value(logits).shape(),
        ));
    }
    let weights = g.softmax(logits)?;
    let by_transform = g.transpose(weights)?;
    let identity = x;
    let log_like = g.signed_log1p(x);
    let saturating = g.soft_sign(x);
    let mut acc = None;
    for (m, t) in [identity, log_like, saturating].into_iter().enumerate() {
        let w = g.slice(by_transform, 0, m, 1)?;
        let term = g.mul(t, w)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => g.add(prev, term)?,
        });
    }
    Ok(acc.expect("three transforms"))
}

fn batch_norm(
    g: &mut Graph,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    bn: &BatchNorm,
    train: bool,
) -> Result<(NodeId, Option<BatchStats>)> {
    let (centered, std, stats) = if train {
        let mean = g.mean(x, Some(0))?;
        let centered = g.sub(x, mean)?;
        let sq = g.mul(centered, centered)?;
        let var = g.mean(sq, Some(0))?;
        let var_eps = g.add_scalar(var, BN_EPS);
        let std = g.sqrt(var_eps);
        let stats = BatchStats {
            mean: g.value(mean).clone(),
            var: g.value(var).clone(),
        };
        (centered, std, Some(stats))
    } else {
        let mean = g.constant(bn.running_mean.clone());
        let centered = g.sub(x, mean)?;
        let std = g.constant(bn.running_var.map_values(|v| (v + BN_EPS).sqrt()));
        (centered, std, None)
    };
    let normed = g.div(centered, std)?;
    let scaled = g.mul(normed, gamma)?;
    Ok((g.add(scaled, beta)?, stats))
}

fn self_attention(
    g: &mut Graph,
    x: NodeId,
    p: &[NodeId],
    n_heads: usize,
    segments: &[Segment],
) -> Result<NodeId> {
    let width = g.value(x).cols();
    let head = width / n_heads;
    let inv_scale = 1.0 / (head as f64).sqrt();
    let q = g.matmul(x, p[0])?;
    let k = g.matmul(x, p[1])?;
    let v = g.matmul(x, p[2])?;
    let mut blocks = Vec::with_capacity(segments.len());
    for seg in segments {
        let (qs, ks, vs) = if segments.len() == 1 {
            (q, k, v)
        } else {
            (
                g.slice(q, 0, seg.start, seg.len)?,
                g.slice(k, 0, seg.start, seg.len)?,
                g.slice(v, 0, seg.start, seg.len)?,
            )
        };
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let (qh, kh, vh) = if n_heads == 1 {
                (qs, ks, vs)
            } else {
                (
                    g.slice(qs, 1, h * head, head)?,
                    g.slice(ks, 1, h * head, head)?,
                    g.slice(vs, 1, h * head, head)?,
                )
            };
            let kt = g.transpose(kh)?;
            let logits = g.matmul(qh, kt)?;
            let logits = g.scale(logits, inv_scale);
            let attn = g.softmax(logits)?;
            heads.push(g.matmul(attn, vh)?);
        }
        blocks.push(if heads.len() == 1 {
            heads[0]
        } else {
            g.concat(&heads, 1)?
        });
    }
    let mixed = if blocks.len() == 1 {
        blocks[0]
    } else {
        g.concat(&blocks, 0)?
    };
    let projected = g.matmul(mixed, p[3])?;
    g.add(x, projected)
}

/// Builds the scoring graph for a stacked batch of queries.
///
/// `x` must be a `rows x d` node whose rows are partitioned by `segments`;
/// attention never crosses segment boundaries. In train mode batch-norm
/// statistics are pooled over every row of the batch.
pub fn build_scores(
    g: &mut Graph,
    x: NodeId,
    segments: &[Segment],
    params: &ModelParams,
    config: &RerankerConfig,
    role: ParamRole,
    mode: Mode<'_>,
) -> Result<ScoreGraph> {
    let (rows, d) = g.value(x).dims()?;
    if d != params.feature_count {
        return Err(Error::shape(
            "forward",
            g.value(x).shape(),
            &[rows, params.feature_count],
        ));
    }
    if segments.iter().map(|s| s.len).sum::<usize>() != rows || segments.is_empty() {
        return Err(Error::InvalidArgument(
            "segments do not cover the batch".into(),
        ));
    }
    let ids: Vec<NodeId> = params
        .trainable()
        .into_iter()
        .map(|t| match role {
            ParamRole::Leaves => g.leaf(t.clone()),
            ParamRole::Constants => g.constant(t.clone()),
        })
        .collect();
    let mut cursor = ids.iter().copied();
    let mut next = || cursor.next().expect("parameter layout");

    let mut h = transform_node(g, x, next())?;
    if params.embedding.is_some() {
        let (w, b) = (next(), next());
        h = linear(g, h, w, b)?;
    }
    for _ in &params.attention {
        let p = [next(), next(), next(), next()];
        h = self_attention(g, h, &p, config.n_heads, segments)?;
    }

    let train = matches!(mode, Mode::Train(_));
    let (gamma, beta) = (next(), next());
    let (h_in, in_stats) = batch_norm(g, h, gamma, beta, &params.input_norm, train)?;
    let (w1, b1) = (next(), next());
    let hidden = linear(g, h_in, w1, b1)?;
    let mut hidden = g.relu(hidden);
    if let Mode::Train(rng) = mode {
        if config.dropout_p > 0.0 {
            let (r, c) = g.value(hidden).dims()?;
            let keep = 1.0 - config.dropout_p;
            let mask: Vec<f64> = (0..r * c)
                .map(|_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect();
            let mask = g.constant(Tensor::matrix(r, c, mask)?);
            hidden = g.mul(hidden, mask)?;
        }
    }
    let (gamma, beta) = (next(), next());
    let (h_hid, hid_stats) = batch_norm(g, hidden, gamma, beta, &params.hidden_norm, train)?;
    let (w2, b2) = (next(), next());
    let scores = linear(g, h_hid, w2, b2)?;

    if !g.value(scores).is_finite() {
        return Err(Error::Numerical("non-finite scores in forward pass".into()));
    }
    Ok(ScoreGraph {
        scores,
        params: ids,
        norm_stats: in_stats.zip(hid_stats),
    })
}

impl ModelParams {
    /// Folds batch statistics from a train-mode pass into the running
    /// estimates.
    pub fn update_running_stats(&mut self, stats: &(BatchStats, BatchStats), momentum: f64) {
        self.input_norm.update(&stats.0, momentum);
        self.hidden_norm.update(&stats.1, momentum);
    }
}

/// Scores one query (`docs x d`).
pub fn forward(
    docs: &Tensor,
    params: &ModelParams,
    config: &RerankerConfig,
    mode: Mode<'_>,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.constant(docs.clone());
    let segments = [Segment {
        start: 0,
        len: docs.rows(),
    }];
    let out = build_scores(
        &mut g,
        x,
        &segments,
        params,
        config,
        ParamRole::Constants,
        mode,
    )?;
    Ok(g.value(out.scores).values().to_vec())
}

/// Output of the transformation layer (and embedding, when enabled).
pub fn feature_transform(docs: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(docs.clone());
    let logits = g.constant(params.transform_logits.clone());
    let mut h = transform_node(&mut g, x, logits)?;
    if let Some(e) = &params.embedding {
        let w = g.constant(e.weight.clone());
        let b = g.constant(e.bias.clone());
        h = linear(&mut g, h, w, b)?;
    }
    Ok(g.value(h).clone())
}

/// ApproxNDCG loss of a `n x 1` score node.
///
/// Approximate ranks are `1 + Σ_{j≠i} sigmoid((s_j - s_i) / temperature)`;
/// the loss is minus the DCG over those ranks divided by the ideal DCG of
/// the full list. Queries without relevant documents give a constant zero.
pub fn approx_ndcg_loss(
    g: &mut Graph,
    scores: NodeId,
    labels: &[u32],
    temperature: f64,
) -> Result<NodeId> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let (n, c) = g.value(scores).dims()?;
    if c != 1 || n != labels.len() {
        return Err(Error::shape(
            "approx_ndcg_loss",
            g.value(scores).shape(),
            &[labels.len(), 1],
        ));
    }
    let ideal = metrics::ideal_dcg(labels, n);
    if ideal == 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let row = g.transpose(scores)?;
    let diff = g.sub(row, scores)?; // [i][j] = s_j - s_i
    let diff = g.scale(diff, 1.0 / temperature);
    let pairwise = g.sigmoid(diff);
    let off_diag = g.constant(Tensor::identity(n).map_values(|v| 1.0 - v));
    let pairwise = g.mul(pairwise, off_diag)?;
    let above = g.sum(pairwise, Some(1))?;
    let rank = g.add_scalar(above, 1.0);
    let log_term = g.log1p(rank);
    let discount = g.scale(log_term, std::f64::consts::LN_2.recip());
    let gains = g.constant(Tensor::matrix(
        n,
        1,
        labels.iter().map(|&l| metrics::gain(l)).collect(),
    )?);
    let terms = g.div(gains, discount)?;
    let total = g.sum(terms, None)?;
    Ok(g.scale(total, -1.0 / ideal))
}

/// Value of [`approx_ndcg_loss`] for plain scores.
pub fn approx_ndcg_value(scores: &[f64], labels: &[u32], temperature: f64) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(Tensor::matrix(scores.len().max(1), 1, scores.to_vec())?);
    let loss = approx_ndcg_loss(&mut g, s, labels, temperature)?;
    Ok(g.value(loss).values()[0])
}
