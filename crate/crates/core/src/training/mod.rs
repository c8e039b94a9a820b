//! Losses, the Adam optimizer with per-epoch step decay, minibatching, and
//! the epoch loop.

mod adam;
mod loss;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, global_norm, AdamState};
pub use loss::{logistic_loss, multitask_loss, LOSS_CLAMP};

use crate::autodiff::{Tape, Tensor};
use crate::data::UserTrail;
use crate::error::{Error, Result};
use crate::model::{Batch, SequenceModel};

/// Batches whose order is shuffled together; within a group trails are sorted
/// by length so padding stays small.
const BUCKET_GROUP: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplicative step decay applied once per epoch.
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub gradient_clip_norm: Option<f64>,
    /// Share of the training trails held out for threshold selection.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            decay: 0.95,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 256,
            epochs: 10,
            seed: 0,
            gradient_clip_norm: Some(5.0),
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0) {
            return fail(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return fail(format!("decay must lie in (0, 1], got {}", self.decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.epsilon > 0.0) {
            return fail("epsilon must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if let Some(c) = self.gradient_clip_norm {
            if !(c > 0.0) {
                return fail(format!("gradient_clip_norm must be positive, got {c}"));
            }
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return fail(format!(
                "validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            ));
        }
        Ok(())
    }

    /// Step size used during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay.powi(epoch as i32)
    }
}

/// Loss trajectory of one training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Mean training loss per epoch, weighted by batch size.
    pub epoch_losses: Vec<f64>,
    /// Loss of every batch, grouped by epoch, measured before its update.
    pub batch_losses: Vec<Vec<f64>>,
    pub learning_rates: Vec<f64>,
}

/// Mean loss of `model` over one batch, recorded on `tape`.
pub fn batch_loss(
    model: &dyn SequenceModel,
    tape: &mut Tape,
    bound: &[crate::autodiff::Var],
    batch: &Batch,
) -> Result<crate::autodiff::Var> {
    let out = model.forward_batch(tape, bound, batch)?;
    if model.num_tasks() == 1 {
        logistic_loss(tape, out.probs, &batch.labels)
    } else {
        multitask_loss(tape, out.probs, &batch.labels)
    }
}

/// Gradients of the mean batch loss for every parameter, in store order.
pub fn loss_and_gradients(model: &dyn SequenceModel, batch: &Batch) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, true);
    let loss = batch_loss(model, &mut tape, &bound, batch)?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    let params = model.params();
    let grads = bound
        .iter()
        .enumerate()
        .map(|(i, &v)| grads.get_or_zeros(v, params.get(i)))
        .collect();
    Ok((value, grads))
}

/// Batch composition for `epoch`: a seeded shuffle, length bucketing within
/// groups of batches, and a second shuffle of batch order.
pub fn plan_batches(lengths: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut rng);
    let mut batches = Vec::new();
    for group in order.chunks(batch_size * BUCKET_GROUP) {
        let mut group = group.to_vec();
        group.sort_by_key(|&i| lengths[i]);
        batches.extend(group.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    batches
}

/// Trains `model` in place on `trails`.
pub fn train(model: &mut dyn SequenceModel, trails: &[UserTrail], config: &TrainConfig) -> Result<History> {
    train_with_callback(model, trails, config, |_, _| {})
}

/// As [`train`], invoking `on_epoch(epoch, mean_loss)` after every epoch.
pub fn train_with_callback(
    model: &mut dyn SequenceModel,
    trails: &[UserTrail],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<History> {
    config.validate()?;
    if trails.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let (max_len, time_unit) = (model.config().max_len, model.config().time_unit);
    let lengths: Vec<usize> = trails.iter().map(|t| t.len().min(max_len)).collect();
    let mut state = AdamState::new(model.params());
    let mut history = History::default();
    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        let mut losses = Vec::new();
        let mut weighted = 0.0;
        for idx in plan_batches(&lengths, config.batch_size, config.seed, epoch) {
            let refs: Vec<&UserTrail> = idx.iter().map(|&i| &trails[i]).collect();
            let batch = Batch::from_trails(&refs, max_len, time_unit)?;
            let (loss, grads) = loss_and_gradients(&*model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {loss} in epoch {epoch}")));
            }
            adam_step(model.params_mut(), &grads, &mut state, lr, config)?;
            losses.push(loss);
            weighted += loss * idx.len() as f64;
        }
        let mean = weighted / trails.len() as f64;
        on_epoch(epoch, mean);
        history.epoch_losses.push(mean);
        history.batch_losses.push(losses);
        history.learning_rates.push(lr);
    }
    Ok(history)
}
