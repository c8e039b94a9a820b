use crate::autodiff::{Tape, Tensor, Var};
use crate::data::UserTrail;
use crate::error::{Error, Result};

use super::layers::{Attention, Gru, Head};
use super::params::{Initializer, ParamStore};
use super::{
    predict_batch, Batch, DtainConfig, ForwardOutput, ModelConfig, ModelKind, Prediction, SequenceModel,
};

/// Elapsed time from each event to the prediction time, in `time_unit`s.
pub fn temporal_deltas(trail: &UserTrail, time_unit: f64) -> Result<Vec<f64>> {
    if let Some(w) = trail.timestamps.windows(2).position(|w| w[1] < w[0]) {
        return Err(Error::DataOrdering(format!(
            "trail {}: event {} at {} precedes event {} at {}",
            trail.id,
            w + 1,
            trail.timestamps[w + 1],
            w,
            trail.timestamps[w]
        )));
    }
    trail
        .timestamps
        .iter()
        .map(|&ts| {
            let d = (trail.prediction_time - ts) / time_unit;
            if d < 0.0 {
                Err(Error::DataOrdering(format!(
                    "trail {}: event at {ts} is after prediction time {}",
                    trail.id, trail.prediction_time
                )))
            } else {
                Ok(d)
            }
        })
        .collect()
}

/// Gate values together with the per-position parameters that produced them.
#[derive(Debug, Clone, Copy)]
pub struct TemporalGate {
    pub gate: Var,
    pub theta: Var,
    pub mu: Var,
}

/// `σ(θ[id] − μ[id]·Δt)` for each event.
pub fn temporal_gate(
    tape: &mut Tape,
    theta: Var,
    mu: Var,
    ids: &[usize],
    deltas: &[f64],
) -> Result<TemporalGate> {
    if ids.len() != deltas.len() {
        return Err(Error::dim("temporal_gate", &[ids.len()], &[deltas.len()]));
    }
    if let Some(d) = deltas.iter().find(|d| !(**d >= 0.0)) {
        return Err(Error::DataOrdering(format!("negative elapsed time {d}")));
    }
    let theta_e = tape.embedding_lookup(theta, ids)?;
    let mu_e = tape.embedding_lookup(mu, ids)?;
    let dt = tape.constant(Tensor::vector(deltas.to_vec()));
    let decay = tape.mul(mu_e, dt)?;
    let arg = tape.sub(theta_e, decay)?;
    Ok(TemporalGate {
        gate: tape.sigmoid(arg),
        theta: theta_e,
        mu: mu_e,
    })
}

/// Scales each embedding row by its gate value.
pub fn apply_gate(tape: &mut Tape, embeddings: Var, gate: Var) -> Result<Var> {
    tape.scale_rows(embeddings, gate)
}

/// Time-gated bidirectional GRU with attention pooling.
#[derive(Debug, Clone)]
pub struct DtainModel {
    config: DtainConfig,
    params: ParamStore,
    pub(crate) embedding: usize,
    pub(crate) theta: usize,
    pub(crate) mu: usize,
    pub(crate) gru_fwd: Gru,
    pub(crate) gru_bwd: Gru,
    pub(crate) attention: Attention,
    pub(crate) head: Head,
}

impl DtainModel {
    /// Fresh parameters: truncated-normal weights, zero biases, θ = μ = 0.
    pub fn new(config: DtainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let v = config.vocab_size;
        let half = config.model_dim / 2;
        let embedding = store.add("embedding", init.truncated_normal(&[v, config.embed_dim]));
        let theta = store.add("theta", Tensor::zeros(&[v]));
        let mu = store.add("mu", Tensor::zeros(&[v]));
        let gru_fwd = Gru::new(&mut store, &mut init, "gru_fwd", config.embed_dim, half);
        let gru_bwd = Gru::new(&mut store, &mut init, "gru_bwd", config.embed_dim, half);
        let attention = Attention::new(
            &mut store,
            &mut init,
            "attn",
            config.model_dim,
            config.attention_hidden,
        );
        let head = Head::new(
            &mut store,
            &mut init,
            config.model_dim,
            &config.head_layers,
            config.num_tasks,
        );
        Ok(Self {
            config,
            params: store,
            embedding,
            theta,
            mu,
            gru_fwd,
            gru_bwd,
            attention,
            head,
        })
    }

    /// Rebuilds a model around previously trained parameters.
    pub fn with_params(config: DtainConfig, params: &ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.load_from(params)?;
        Ok(model)
    }

    pub fn theta(&self) -> &Tensor {
        self.params.get(self.theta)
    }

    pub fn mu(&self) -> &Tensor {
        self.params.get(self.mu)
    }

    /// Bidirectional pass over time-major inputs; returns time-major stacked
    /// `[steps·size × model_dim]` outputs.
    pub fn bigru_forward(&self, tape: &mut Tape, bound: &[Var], inputs: Var, batch: &Batch) -> Result<Var> {
        let fwd = self
            .gru_fwd
            .run(tape, bound, inputs, batch.size, batch.steps, &batch.mask, false)?;
        let bwd = self
            .gru_bwd
            .run(tape, bound, inputs, batch.size, batch.steps, &batch.mask, true)?;
        let per_step = fwd
            .iter()
            .zip(&bwd)
            .map(|(&f, &b)| tape.concat_cols(&[f, b]))
            .collect::<Result<Vec<_>>>()?;
        tape.concat_rows(&per_step)
    }

    /// Scores a single trail.
    pub fn forward(&self, trail: &UserTrail, capture_explanation: bool) -> Result<Prediction> {
        let batch = Batch::from_trails(&[trail], self.config.max_len, self.config.time_unit)?;
        let mut preds = predict_batch(self, &batch, capture_explanation)?;
        Ok(preds.remove(0))
    }
}

impl SequenceModel for DtainModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Dtain
    }

    fn config(&self) -> &DtainConfig {
        &self.config
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig::Dtain(self.config.clone())
    }

    fn forward_batch(&self, tape: &mut Tape, bound: &[Var], batch: &Batch) -> Result<ForwardOutput> {
        if batch.steps == 0 {
            return Err(Error::EmptySequence("batch has no events".into()));
        }
        let embedded = tape.embedding_lookup(bound[self.embedding], &batch.ids)?;
        let gate = temporal_gate(tape, bound[self.theta], bound[self.mu], &batch.ids, &batch.deltas)?;
        let gated = apply_gate(tape, embedded, gate.gate)?;
        let states = self.bigru_forward(tape, bound, gated, batch)?;
        let (weights, summary) =
            self.attention
                .pool(tape, bound, states, batch.size, batch.steps, &batch.mask)?;
        let probs = self.head.forward(tape, bound, summary)?;
        Ok(ForwardOutput {
            probs,
            attention: Some(weights),
            gate: Some(gate.gate),
            theta: Some(gate.theta),
            mu: Some(gate.mu),
        })
    }
}
