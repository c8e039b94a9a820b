use crate::data::UserTrail;
use crate::error::{Error, Result};

use super::dtain::temporal_deltas;

/// Right-padded minibatch in time-major layout.
///
/// Entry `(t, b)` lives at flat index `t * size + b`. Padded cells carry id 0,
/// elapsed time 0 and a false mask; every model ignores them.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub steps: usize,
    pub ids: Vec<usize>,
    pub deltas: Vec<f64>,
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    /// Builds a batch, keeping the `max_len` most recent events of each trail.
    pub fn from_trails(trails: &[&UserTrail], max_len: usize, time_unit: f64) -> Result<Self> {
        if trails.is_empty() {
            return Err(Error::EmptySequence("batch has no trails".into()));
        }
        let mut prepared = Vec::with_capacity(trails.len());
        for trail in trails {
            if trail.is_empty() {
                return Err(Error::EmptySequence(format!("trail {} has no events", trail.id)));
            }
            let recent = trail.most_recent(max_len);
            let deltas = temporal_deltas(&recent, time_unit)?;
            prepared.push((recent, deltas));
        }
        let size = trails.len();
        let steps = prepared.iter().map(|(t, _)| t.len()).max().unwrap_or(0);
        let mut ids = vec![0; steps * size];
        let mut delta_grid = vec![0.0; steps * size];
        let mut mask = vec![false; steps * size];
        for (b, (trail, deltas)) in prepared.iter().enumerate() {
            for t in 0..trail.len() {
                ids[t * size + b] = trail.event_ids[t];
                delta_grid[t * size + b] = deltas[t];
                mask[t * size + b] = true;
            }
        }
        Ok(Self {
            size,
            steps,
            ids,
            deltas: delta_grid,
            mask,
            lengths: prepared.iter().map(|(t, _)| t.len()).collect(),
            labels: trails.iter().map(|t| t.label).collect(),
        })
    }

    /// Mask of step `t`, one entry per batch row.
    pub fn step_mask(&self, t: usize) -> &[bool] {
        &self.mask[t * self.size..(t + 1) * self.size]
    }

    /// Mask in batch-major `[B×T]` order.
    pub fn mask_batch_major(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.mask.len());
        for b in 0..self.size {
            for t in 0..self.steps {
                out.push(self.mask[t * self.size + b]);
            }
        }
        out
    }

    pub fn is_full(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }
}
