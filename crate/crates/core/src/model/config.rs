use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the time-gated model; the non-temporal fields are shared
/// with every baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DtainConfig {
    pub vocab_size: usize,
    /// Event embedding width.
    pub embed_dim: usize,
    /// Recurrent output width per position (both directions together).
    pub model_dim: usize,
    pub attention_hidden: usize,
    pub head_layers: Vec<usize>,
    /// Longest trail fed to the model; older events are dropped.
    pub max_len: usize,
    /// 1 for binary conversion, K >= 2 for a K-way outcome head.
    pub num_tasks: usize,
    /// Seconds per unit of elapsed time in the gate.
    pub time_unit: f64,
}

impl Default for DtainConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1,
            embed_dim: 300,
            model_dim: 200,
            attention_hidden: 64,
            head_layers: vec![128, 64],
            max_len: 64,
            num_tasks: 1,
            time_unit: 3600.0,
        }
    }
}

impl DtainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive");
        }
        if self.embed_dim == 0 {
            return fail("embed_dim must be positive");
        }
        if self.model_dim == 0 || self.model_dim % 2 != 0 {
            return fail("model_dim must be positive and even");
        }
        if self.attention_hidden == 0 {
            return fail("attention_hidden must be positive");
        }
        if self.head_layers.contains(&0) {
            return fail("head layer widths must be positive");
        }
        if self.max_len == 0 {
            return fail("max_len must be at least 1");
        }
        if self.num_tasks == 0 {
            return fail("num_tasks must be at least 1");
        }
        if !(self.time_unit > 0.0 && self.time_unit.is_finite()) {
            return fail("time_unit must be positive");
        }
        Ok(())
    }

    /// Width of the head's output layer.
    pub fn output_width(&self) -> usize {
        if self.num_tasks == 1 {
            1
        } else {
            self.num_tasks
        }
    }
}
