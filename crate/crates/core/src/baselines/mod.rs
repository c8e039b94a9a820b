//! Comparison architectures sharing the embedding, head, loss and trainer
//! with the time-gated model:
//!
//! * `cnn`: 1-d convolution over time, ReLU, global max-pool.
//! * `gru`: unidirectional GRU, final state.
//! * `gru_attn`: unidirectional GRU with attention pooling.
//! * `gru_self_attn`: scaled dot-product self-attention with a residual
//!   connection ahead of the `gru_attn` path.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::layers::{Attention, Gru, Head, Linear};
use crate::model::{
    Batch, DtainConfig, ForwardOutput, Initializer, ModelConfig, ModelKind, ParamStore, SequenceModel,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub kind: ModelKind,
    pub base: DtainConfig,
    pub conv_filters: usize,
    pub kernel_sizes: Vec<usize>,
    pub self_attn_heads: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::GruAttn,
            base: DtainConfig::default(),
            conv_filters: 128,
            kernel_sizes: vec![3],
            self_attn_heads: 1,
        }
    }
}

impl BaselineConfig {
    pub fn new(kind: ModelKind, base: DtainConfig) -> Self {
        Self {
            kind,
            base,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        match self.kind {
            ModelKind::Dtain => Err(Error::Config("dtain is not a baseline kind".into())),
            ModelKind::Cnn => {
                if self.conv_filters == 0 {
                    return Err(Error::Config("conv_filters must be positive".into()));
                }
                if self.kernel_sizes.is_empty() || self.kernel_sizes.contains(&0) {
                    return Err(Error::Config(
                        "kernel_sizes must be non-empty and positive".into(),
                    ));
                }
                Ok(())
            }
            ModelKind::GruSelfAttn => {
                if self.self_attn_heads == 0 || self.base.embed_dim % self.self_attn_heads != 0 {
                    return Err(Error::Config(format!(
                        "self_attn_heads ({}) must divide embed_dim ({})",
                        self.self_attn_heads, self.base.embed_dim
                    )));
                }
                Ok(())
            }
            ModelKind::Gru | ModelKind::GruAttn => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
struct Conv {
    kernel: usize,
    layer: Linear,
}

/// Multi-head scaled dot-product self-attention without output projection.
#[derive(Debug, Clone, Copy)]
pub struct SelfAttention {
    pub query: usize,
    pub key: usize,
    pub value: usize,
    pub heads: usize,
}

impl SelfAttention {
    fn new(store: &mut ParamStore, init: &mut Initializer, dim: usize, heads: usize) -> Self {
        Self {
            query: store.add("self_attn.wq", init.truncated_normal(&[dim, dim])),
            key: store.add("self_attn.wk", init.truncated_normal(&[dim, dim])),
            value: store.add("self_attn.wv", init.truncated_normal(&[dim, dim])),
            heads,
        }
    }

    /// Attends within one sequence `[n×d]`. Returns the attended values
    /// `[n×d]` and the `[n×n]` attention matrix of each head.
    pub fn apply_sequence(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<(Var, Vec<Var>)> {
        let q = tape.matmul(x, bound[self.query])?;
        let k = tape.matmul(x, bound[self.key])?;
        let v = tape.matmul(x, bound[self.value])?;
        self.attend(tape, q, k, v)
    }

    fn attend(&self, tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Vec<Var>)> {
        let dim = tape.shape(q)[1];
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, lo, hi)?,
                    tape.slice_cols(k, lo, hi)?,
                    tape.slice_cols(v, lo, hi)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores)?;
            outs.push(tape.matmul(attn, vh)?);
            maps.push(attn);
        }
        let out = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        Ok((out, maps))
    }

    /// Applies attention to each sequence of a time-major stacked batch and
    /// returns time-major results; padded rows come back as zeros.
    fn apply_batch(&self, tape: &mut Tape, bound: &[Var], x: Var, batch: &Batch) -> Result<Var> {
        let dim = tape.shape(x)[1];
        let q_all = tape.matmul(x, bound[self.query])?;
        let k_all = tape.matmul(x, bound[self.key])?;
        let v_all = tape.matmul(x, bound[self.value])?;
        let mut pieces = Vec::with_capacity(batch.size + 1);
        let mut offsets = Vec::with_capacity(batch.size);
        let mut offset = 0;
        for b in 0..batch.size {
            let rows: Vec<usize> = (0..batch.lengths[b]).map(|t| t * batch.size + b).collect();
            let q = tape.embedding_lookup(q_all, &rows)?;
            let k = tape.embedding_lookup(k_all, &rows)?;
            let v = tape.embedding_lookup(v_all, &rows)?;
            let (out, _) = self.attend(tape, q, k, v)?;
            pieces.push(out);
            offsets.push(offset);
            offset += rows.len();
        }
        let zero_row = offset;
        pieces.push(tape.constant(Tensor::zeros(&[1, dim])));
        let packed = tape.concat_rows(&pieces)?;
        let mut index = Vec::with_capacity(batch.steps * batch.size);
        for t in 0..batch.steps {
            for b in 0..batch.size {
                index.push(if t < batch.lengths[b] {
                    offsets[b] + t
                } else {
                    zero_row
                });
            }
        }
        tape.embedding_lookup(packed, &index)
    }
}

#[derive(Debug, Clone)]
enum Body {
    Cnn(Vec<Conv>),
    Gru(Gru),
    GruAttn(Gru, Attention),
    GruSelfAttn(SelfAttention, Gru, Attention),
}

/// One of the four comparison models.
#[derive(Debug, Clone)]
pub struct BaselineModel {
    config: BaselineConfig,
    params: ParamStore,
    embedding: usize,
    body: Body,
    head: Head,
}

impl BaselineModel {
    pub fn new(config: BaselineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let base = &config.base;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let embedding = store.add(
            "embedding",
            init.truncated_normal(&[base.vocab_size, base.embed_dim]),
        );
        let hidden = base.model_dim;
        let (body, head_input) = match config.kind {
            ModelKind::Cnn => {
                let convs = config
                    .kernel_sizes
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| Conv {
                        kernel: k,
                        layer: Linear::new(
                            &mut store,
                            &mut init,
                            &format!("conv.{i}"),
                            k * base.embed_dim,
                            config.conv_filters,
                        ),
                    })
                    .collect::<Vec<_>>();
                let width = convs.len() * config.conv_filters;
                (Body::Cnn(convs), width)
            }
            ModelKind::Gru => (
                Body::Gru(Gru::new(&mut store, &mut init, "gru", base.embed_dim, hidden)),
                hidden,
            ),
            ModelKind::GruAttn => {
                let gru = Gru::new(&mut store, &mut init, "gru", base.embed_dim, hidden);
                let attn = Attention::new(&mut store, &mut init, "attn", hidden, base.attention_hidden);
                (Body::GruAttn(gru, attn), hidden)
            }
            ModelKind::GruSelfAttn => {
                let sa = SelfAttention::new(&mut store, &mut init, base.embed_dim, config.self_attn_heads);
                let gru = Gru::new(&mut store, &mut init, "gru", base.embed_dim, hidden);
                let attn = Attention::new(&mut store, &mut init, "attn", hidden, base.attention_hidden);
                (Body::GruSelfAttn(sa, gru, attn), hidden)
            }
            ModelKind::Dtain => unreachable!("rejected by validate"),
        };
        let head = Head::new(
            &mut store,
            &mut init,
            head_input,
            &base.head_layers,
            base.num_tasks,
        );
        Ok(Self {
            config,
            params: store,
            embedding,
            body,
            head,
        })
    }

    pub fn baseline_config(&self) -> &BaselineConfig {
        &self.config
    }

    /// The self-attention sub-layer, for `gru_self_attn` models.
    pub fn self_attention(&self) -> Option<SelfAttention> {
        match &self.body {
            Body::GruSelfAttn(sa, _, _) => Some(*sa),
            _ => None,
        }
    }

    /// The recurrent layer and attention pooling, for `gru_attn` models.
    pub fn gru_attention_parts(&self) -> Option<(Gru, Attention, &Head, usize)> {
        match &self.body {
            Body::GruAttn(g, a) => Some((*g, *a, &self.head, self.embedding)),
            _ => None,
        }
    }

    fn cnn_forward(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        embedded: Var,
        convs: &[Conv],
        batch: &Batch,
    ) -> Result<Var> {
        let (size, steps) = (batch.size, batch.steps);
        let dim = self.config.base.embed_dim;
        // Same padding: positions outside a sequence read as zero vectors.
        let zeros = tape.constant(Tensor::zeros(&[steps * size, dim]));
        let embedded = tape.select_rows(&batch.mask, embedded, zeros)?;
        let zero_step = tape.constant(Tensor::zeros(&[size, dim]));
        let rows = (0..steps)
            .map(|t| tape.slice_rows(embedded, t * size, (t + 1) * size))
            .collect::<Result<Vec<_>>>()?;
        let valid: Vec<Vec<bool>> = (0..steps).map(|t| batch.step_mask(t).to_vec()).collect();
        let mut pooled = Vec::with_capacity(convs.len());
        for conv in convs {
            let left = (conv.kernel - 1) / 2;
            let mut windows = Vec::with_capacity(steps);
            for t in 0..steps {
                let parts: Vec<Var> = (0..conv.kernel)
                    .map(|j| {
                        let src = t as isize + j as isize - left as isize;
                        if src >= 0 && (src as usize) < steps {
                            rows[src as usize]
                        } else {
                            zero_step
                        }
                    })
                    .collect();
                windows.push(if parts.len() == 1 {
                    parts[0]
                } else {
                    tape.concat_cols(&parts)?
                });
            }
            let stacked = tape.concat_rows(&windows)?;
            let features = conv.layer.apply(tape, bound, stacked)?;
            let features = tape.relu(features);
            let per_step = (0..steps)
                .map(|t| tape.slice_rows(features, t * size, (t + 1) * size))
                .collect::<Result<Vec<_>>>()?;
            pooled.push(tape.masked_max(&per_step, &valid)?);
        }
        if pooled.len() == 1 {
            Ok(pooled[0])
        } else {
            tape.concat_cols(&pooled)
        }
    }

    /// Max-pooled convolution features `[B × filters·kernels]`, exposed for
    /// inspection.
    pub fn cnn_features(&self, tape: &mut Tape, bound: &[Var], batch: &Batch) -> Result<Var> {
        let Body::Cnn(convs) = &self.body else {
            return Err(Error::Config(format!("{} has no convolution", self.config.kind)));
        };
        let embedded = tape.embedding_lookup(bound[self.embedding], &batch.ids)?;
        self.cnn_forward(tape, bound, embedded, convs, batch)
    }
}

fn stack_steps(tape: &mut Tape, steps: &[Var]) -> Result<Var> {
    tape.concat_rows(steps)
}

impl SequenceModel for BaselineModel {
    fn kind(&self) -> ModelKind {
        self.config.kind
    }

    fn config(&self) -> &DtainConfig {
        &self.config.base
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig::Baseline(self.config.clone())
    }

    fn forward_batch(&self, tape: &mut Tape, bound: &[Var], batch: &Batch) -> Result<ForwardOutput> {
        if batch.steps == 0 {
            return Err(Error::EmptySequence("batch has no events".into()));
        }
        let (size, steps) = (batch.size, batch.steps);
        let embedded = tape.embedding_lookup(bound[self.embedding], &batch.ids)?;
        let mut attention = None;
        let summary = match &self.body {
            Body::Cnn(convs) => self.cnn_forward(tape, bound, embedded, convs, batch)?,
            Body::Gru(gru) => {
                let states = gru.run(tape, bound, embedded, size, steps, &batch.mask, false)?;
                *states.last().expect("steps > 0")
            }
            Body::GruAttn(gru, attn) => {
                let states = gru.run(tape, bound, embedded, size, steps, &batch.mask, false)?;
                let stacked = stack_steps(tape, &states)?;
                let (weights, summary) = attn.pool(tape, bound, stacked, size, steps, &batch.mask)?;
                attention = Some(weights);
                summary
            }
            Body::GruSelfAttn(sa, gru, attn) => {
                let attended = sa.apply_batch(tape, bound, embedded, batch)?;
                let mixed = tape.add(embedded, attended)?;
                let states = gru.run(tape, bound, mixed, size, steps, &batch.mask, false)?;
                let stacked = stack_steps(tape, &states)?;
                let (weights, summary) = attn.pool(tape, bound, stacked, size, steps, &batch.mask)?;
                attention = Some(weights);
                summary
            }
        };
        let probs = self.head.forward(tape, bound, summary)?;
        Ok(ForwardOutput {
            probs,
            attention,
            gate: None,
            theta: None,
            mu: None,
        })
    }
}

#[cfg(test)]
mod tests;
