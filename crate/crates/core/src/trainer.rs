//! Mini-batch training of the reranker with Adam.
//!
//! Each epoch draws its shuffle order and dropout masks from a generator
//! seeded by `(seed, epoch)`, so a run resumed from a checkpoint replays
//! the uninterrupted run bit for bit.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Query, QuerySet};
use crate::diffcore::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::metrics;
use crate::reranker::{self, Mode, ModelParams, ParamRole, RerankerConfig};
use crate::seeds::{derive_seed, STREAM_EPOCH, STREAM_INIT};

/// Cutoff of the validation metric recorded each epoch.
pub const VALIDATION_CUTOFF: usize = 3;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Queries per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 128,
            learning_rate: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch size must be positive".into(),
            ));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument(
                "learning rate must be positive".into(),
            ));
        }
        for (name, b) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "adam {name} must lie in (0,1)"
                )));
            }
        }
        Ok(())
    }
}

/// Per-feature statistics fitted on the training corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population standard deviation; 0 for constant features.
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(qs: &QuerySet) -> Result<Self> {
        let n = qs.num_documents();
        if n == 0 {
            return Err(Error::EmptyInput(
                "cannot standardize an empty dataset".into(),
            ));
        }
        let d = qs.feature_count;
        let mut mean = vec![0.0; d];
        for doc in qs.queries.iter().flat_map(|q| &q.documents) {
            for (m, v) in mean.iter_mut().zip(&doc.features) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for doc in qs.queries.iter().flat_map(|q| &q.documents) {
            for ((s, v), m) in var.iter_mut().zip(&doc.features).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
        Ok(Standardizer { mean, std })
    }

    fn divisor(&self, j: usize) -> f64 {
        if self.std[j] > 0.0 {
            self.std[j]
        } else {
            1.0
        }
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, v)| {
                if self.std[j] > 0.0 {
                    (v - self.mean[j]) / self.divisor(j)
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn apply(&self, qs: &QuerySet) -> Result<QuerySet> {
        if qs.feature_count != self.mean.len() {
            return Err(Error::InvalidArgument(format!(
                "standardizer fitted on {} features, dataset has {}",
                self.mean.len(),
                qs.feature_count
            )));
        }
        let mut out = qs.clone();
        for doc in out.queries.iter_mut().flat_map(|q| q.documents.iter_mut()) {
            doc.features = self.apply_row(&doc.features);
        }
        Ok(out)
    }

    /// Restriction to a feature subset, in the given order.
    pub fn project(&self, features: &[usize]) -> Standardizer {
        Standardizer {
            mean: features.iter().map(|&f| self.mean[f]).collect(),
            std: features.iter().map(|&f| self.std[f]).collect(),
        }
    }
}

/// Zero-mean, unit-variance features; constant features become 0.
pub fn standardize(qs: &QuerySet) -> Result<(QuerySet, Standardizer)> {
    let st = Standardizer::fit(qs)?;
    Ok((st.apply(qs)?, st))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first_moment: Vec<Tensor> = params.into_iter().map(Tensor::zeros_like).collect();
        AdamState {
            second_moment: first_moment.clone(),
            first_moment,
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        AdamHyper {
            learning_rate: c.learning_rate,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: Vec<&mut Tensor>,
    grads: &[Tensor],
    state: &mut AdamState,
    hp: AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::InvalidArgument(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.first_moment[i].shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient for parameter array {i} at step {}",
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let correction1 = 1.0 - hp.beta1.powi(t);
    let correction2 = 1.0 - hp.beta2.powi(t);
    for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
        let m = state.first_moment[i].values_mut();
        let v = state.second_moment[i].values_mut();
        for (((pv, &gv), mv), vv) in p.values_mut().iter_mut().zip(g.values()).zip(m).zip(v) {
            *mv = hp.beta1 * *mv + (1.0 - hp.beta1) * gv;
            *vv = hp.beta2 * *vv + (1.0 - hp.beta2) * gv * gv;
            let m_hat = *mv / correction1;
            let v_hat = *vv / correction2;
            *pv -= hp.learning_rate * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Mean validation nDCG@3; `None` without validation queries.
    pub valid_ndcg3: Option<f64>,
}

/// A trained model ready for inference on raw (unstandardized) features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub config: RerankerConfig,
    pub params: ModelParams,
    pub standardizer: Standardizer,
}

impl TrainedModel {
    /// Eval-mode scores for every query of a raw dataset.
    pub fn predict(&self, qs: &QuerySet) -> Result<Vec<Vec<f64>>> {
        let standardized = self.standardizer.apply(qs)?;
        predict_standardized(&self.params, &self.config, &standardized)
    }
}

pub fn predict_standardized(
    params: &ModelParams,
    config: &RerankerConfig,
    qs: &QuerySet,
) -> Result<Vec<Vec<f64>>> {
    qs.queries
        .par_iter()
        .map(|q| reranker::forward(&q.feature_matrix(), params, config, Mode::Eval))
        .collect()
}

/// On-disk training state: enough to score and to resume training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: TrainedModel,
    pub train_config: TrainConfig,
    pub adam: AdamState,
    pub epochs_done: usize,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)
            .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ck.format_version
            )));
        }
        Ok(ck)
    }
}

/// Stateful training loop; one call to [`Trainer::run_epoch`] per epoch.
pub struct Trainer {
    train: QuerySet,
    valid: QuerySet,
    model: TrainedModel,
    train_config: TrainConfig,
    adam: AdamState,
    epochs_done: usize,
    history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(
        train: &QuerySet,
        valid: &QuerySet,
        config: &RerankerConfig,
        train_config: &TrainConfig,
    ) -> Result<Self> {
        train_config.validate()?;
        let standardizer = Standardizer::fit(train)?;
        let params = ModelParams::init(
            config,
            train.feature_count,
            derive_seed(train_config.seed, STREAM_INIT, 0),
        )?;
        let model = TrainedModel {
            config: config.clone(),
            params,
            standardizer,
        };
        let adam = AdamState::new(model.params.trainable());
        Self::assemble(
            train,
            valid,
            model,
            train_config.clone(),
            adam,
            0,
            Vec::new(),
        )
    }

    pub fn resume(train: &QuerySet, valid: &QuerySet, checkpoint: Checkpoint) -> Result<Self> {
        checkpoint.train_config.validate()?;
        let standardizer = Standardizer::fit(train)?;
        if standardizer != checkpoint.model.standardizer {
            return Err(Error::Checkpoint(
                "training data differs from the data the checkpoint was trained on".into(),
            ));
        }
        Self::assemble(
            train,
            valid,
            checkpoint.model,
            checkpoint.train_config,
            checkpoint.adam,
            checkpoint.epochs_done,
            checkpoint.history,
        )
    }

    fn assemble(
        train: &QuerySet,
        valid: &QuerySet,
        model: TrainedModel,
        train_config: TrainConfig,
        adam: AdamState,
        epochs_done: usize,
        history: Vec<EpochRecord>,
    ) -> Result<Self> {
        if valid.feature_count != train.feature_count && !valid.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "train has {} features, validation has {}",
                train.feature_count, valid.feature_count
            )));
        }
        if train.is_empty() {
            return Err(Error::EmptyInput("no training queries".into()));
        }
        let train = model.standardizer.apply(train)?;
        let valid = if valid.is_empty() {
            valid.clone()
        } else {
            model.standardizer.apply(valid)?
        };
        Ok(Trainer {
            train,
            valid,
            model,
            train_config,
            adam,
            epochs_done,
            history,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done >= self.train_config.epochs
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn model(&self) -> &TrainedModel {
        &self.model
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            model: self.model.clone(),
            train_config: self.train_config.clone(),
            adam: self.adam.clone(),
            epochs_done: self.epochs_done,
            history: self.history.clone(),
        }
    }

    /// Runs one epoch and records its summary.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.epochs_done;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.train_config.seed,
            STREAM_EPOCH,
            epoch as u64,
        ));
        let mut order: Vec<usize> = (0..self.train.queries.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(self.train_config.batch_size).enumerate() {
            let batch: Vec<&Query> = chunk.iter().map(|&i| &self.train.queries[i]).collect();
            let loss = step_batch(
                &mut self.model,
                &mut self.adam,
                &self.train_config,
                &batch,
                &mut rng,
            )
            .map_err(|e| match e {
                Error::Numerical(msg) => Error::Divergence {
                    epoch,
                    batch: b,
                    msg,
                },
                other => other,
            })?;
            total += loss;
            batches += 1;
        }

        let valid_ndcg3 = if self.valid.is_empty() {
            None
        } else {
            let scores = predict_standardized(&self.model.params, &self.model.config, &self.valid)?;
            Some(metrics::mean_ndcg_at_k(
                &self.valid,
                &scores,
                VALIDATION_CUTOFF,
            )?)
        };
        let record = EpochRecord {
            epoch,
            mean_loss: total / batches as f64,
            valid_ndcg3,
        };
        self.epochs_done += 1;
        self.history.push(record.clone());
        Ok(record)
    }

    pub fn into_parts(self) -> (TrainedModel, Vec<EpochRecord>) {
        (self.model, self.history)
    }
}

fn step_batch(
    model: &mut TrainedModel,
    adam: &mut AdamState,
    train_config: &TrainConfig,
    batch: &[&Query],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let matrices: Vec<Tensor> = batch.iter().map(|q| q.feature_matrix()).collect();
    let (stacked, segments) = reranker::stack_queries(&matrices)?;
    let mut g = Graph::new();
    let x = g.constant(stacked);
    let config = &model.config;
    let out = reranker::build_scores(
        &mut g,
        x,
        &segments,
        &model.params,
        config,
        ParamRole::Leaves,
        Mode::Train(rng),
    )?;
    let mut losses = Vec::with_capacity(batch.len());
    for (q, seg) in batch.iter().zip(&segments) {
        let s = g.slice(out.scores, 0, seg.start, seg.len)?;
        losses.push(reranker::approx_ndcg_loss(
            &mut g,
            s,
            &q.labels(),
            config.temperature,
        )?);
    }
    let stacked_losses = g.concat(&losses, 0)?;
    let loss = g.mean(stacked_losses, None)?;
    let value = g.value(loss).values()[0];
    if !value.is_finite() {
        return Err(Error::Numerical("non-finite loss".into()));
    }
    let mut grads = g.backward(loss)?;
    let grads: Vec<Tensor> = out
        .params
        .iter()
        .zip(model.params.trainable())
        .map(|(&id, p)| grads.take(id).unwrap_or_else(|| Tensor::zeros_like(p)))
        .collect();
    adam_step(
        model.params.trainable_mut(),
        &grads,
        adam,
        AdamHyper::from(train_config),
    )?;
    if let Some(stats) = &out.norm_stats {
        model.params.update_running_stats(stats, config.bn_momentum);
    }
    if !model.params.is_finite() {
        return Err(Error::Numerical(
            "non-finite parameters after update".into(),
        ));
    }
    Ok(value)
}

/// Trains for `train_config.epochs` epochs and returns the final model and
/// per-epoch history.
pub fn train(
    train: &QuerySet,
    valid: &QuerySet,
    config: &RerankerConfig,
    train_config: &TrainConfig,
) -> Result<(TrainedModel, Vec<EpochRecord>)> {
    let mut trainer = Trainer::new(train, valid, config, train_config)?;
    while !trainer.is_finished() {
        trainer.run_epoch()?;
    }
    Ok(trainer.into_parts())
}
