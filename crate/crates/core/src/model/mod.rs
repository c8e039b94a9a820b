//! The time-gated recurrent attention model and the plumbing shared with
//! the baselines: parameter storage, batching, layers, and checkpoints.

mod batch;
mod checkpoint;
mod config;
mod dtain;
pub mod layers;
mod params;

use serde::{Deserialize, Serialize};

pub use batch::Batch;
pub use checkpoint::{Checkpoint, ModelConfig, CHECKPOINT_FORMAT};
pub use config::DtainConfig;
pub use dtain::{apply_gate, temporal_deltas, temporal_gate, DtainModel};
pub use params::{Initializer, NamedTensor, ParamStore, INIT_STDDEV};

use crate::autodiff::{Tape, Var};
use crate::data::UserTrail;
use crate::error::Result;

/// Every trainable architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dtain,
    Cnn,
    Gru,
    GruAttn,
    GruSelfAttn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Dtain,
        ModelKind::Cnn,
        ModelKind::Gru,
        ModelKind::GruAttn,
        ModelKind::GruSelfAttn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Dtain => "dtain",
            ModelKind::Cnn => "cnn",
            ModelKind::Gru => "gru",
            ModelKind::GruAttn => "gru_attn",
            ModelKind::GruSelfAttn => "gru_self_attn",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| crate::Error::Config(format!("unknown model kind {s:?}")))
    }
}

/// Tape handles produced by a batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `[B]` conversion probabilities, or `[B×K]` outcome distributions.
    pub probs: Var,
    /// `[B×T]` attention weights, when the model pools with attention.
    pub attention: Option<Var>,
    /// Time-major `[T·B]` temporal gate values.
    pub gate: Option<Var>,
    /// Time-major `[T·B]` per-event initial-influence parameters.
    pub theta: Option<Var>,
    /// Time-major `[T·B]` per-event time-slope parameters.
    pub mu: Option<Var>,
}

/// A sequence classifier over vocabulary-id trails.
pub trait SequenceModel {
    fn kind(&self) -> ModelKind;
    fn config(&self) -> &DtainConfig;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// Runs the model on `batch` with parameters already bound on `tape` (in
    /// [`ParamStore`] order).
    fn forward_batch(&self, tape: &mut Tape, bound: &[Var], batch: &Batch) -> Result<ForwardOutput>;

    fn num_tasks(&self) -> usize {
        self.config().num_tasks
    }

    fn model_config(&self) -> ModelConfig;
}

/// Per-event interpretability values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventExplanation {
    pub event_id: usize,
    pub delta_t: f64,
    pub theta: Option<f64>,
    pub mu: Option<f64>,
    pub gate: Option<f64>,
    pub attention: Option<f64>,
}

/// Everything captured for one trail; one entry per unpadded event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub events: Vec<EventExplanation>,
    pub prediction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// `[pCVR]` in binary mode, the K outcome probabilities otherwise.
    pub probs: Vec<f64>,
    pub explanation: Option<ExplanationRecord>,
}

impl Prediction {
    /// Probability of any conversion.
    pub fn pcvr(&self) -> f64 {
        if self.probs.len() == 1 {
            self.probs[0]
        } else {
            1.0 - self.probs[0]
        }
    }
}

/// Inference over one batch with parameters bound as constants.
pub fn predict_batch(
    model: &dyn SequenceModel,
    batch: &Batch,
    capture_explanation: bool,
) -> Result<Vec<Prediction>> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, false);
    let out = model.forward_batch(&mut tape, &bound, batch)?;
    let probs = tape.value(out.probs);
    let width = if probs.rank() == 1 { 1 } else { probs.shape()[1] };
    let value_of = |v: Option<Var>, idx: usize| v.map(|v| tape.value(v).data()[idx]);
    let mut preds = Vec::with_capacity(batch.size);
    for b in 0..batch.size {
        let row = probs.data()[b * width..(b + 1) * width].to_vec();
        let explanation = capture_explanation.then(|| ExplanationRecord {
            events: (0..batch.lengths[b])
                .map(|t| {
                    let tm = t * batch.size + b;
                    EventExplanation {
                        event_id: batch.ids[tm],
                        delta_t: batch.deltas[tm],
                        theta: value_of(out.theta, tm),
                        mu: value_of(out.mu, tm),
                        gate: value_of(out.gate, tm),
                        attention: value_of(out.attention, b * batch.steps + t),
                    }
                })
                .collect(),
            prediction: row.clone(),
        });
        preds.push(Prediction {
            probs: row,
            explanation,
        });
    }
    Ok(preds)
}

/// Scores `trails` in order, `batch_size` at a time.
pub fn predict(
    model: &dyn SequenceModel,
    trails: &[UserTrail],
    batch_size: usize,
    capture_explanation: bool,
) -> Result<Vec<Prediction>> {
    let cfg = model.config();
    let mut out = Vec::with_capacity(trails.len());
    for chunk in trails.chunks(batch_size.max(1)) {
        let refs: Vec<&UserTrail> = chunk.iter().collect();
        let batch = Batch::from_trails(&refs, cfg.max_len, cfg.time_unit)?;
        out.extend(predict_batch(model, &batch, capture_explanation)?);
    }
    Ok(out)
}
