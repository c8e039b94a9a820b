//! Building blocks shared by the time-gated model and the baselines.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

use super::params::{Initializer, ParamStore};

/// Dense affine map `x·W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        input: usize,
        output: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.w"), init.truncated_normal(&[input, output]));
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[output]));
        Self { weight, bias }
    }

    pub fn apply(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        let xw = tape.matmul(x, bound[self.weight])?;
        tape.add_row(xw, bound[self.bias])
    }
}

/// Gated recurrent unit with the reset gate applied to the previous state
/// before the candidate projection:
///
/// ```text
/// z = σ(x·Wz + h·Uz + bz)
/// r = σ(x·Wr + h·Ur + br)
/// n = tanh(x·Wn + (r ⊙ h)·Un + bn)
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, Copy)]
pub struct Gru {
    /// `[input × 3h]`, gate order z, r, n.
    pub input_weight: usize,
    /// `[h × 2h]` recurrent weights of z and r.
    pub recurrent_gates: usize,
    /// `[h × h]` recurrent weight of the candidate.
    pub recurrent_candidate: usize,
    /// `[3h]`.
    pub bias: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        Self {
            input_weight: store.add(format!("{name}.w"), init.truncated_normal(&[input, 3 * hidden])),
            recurrent_gates: store.add(
                format!("{name}.u_zr"),
                init.truncated_normal(&[hidden, 2 * hidden]),
            ),
            recurrent_candidate: store.add(format!("{name}.u_n"), init.truncated_normal(&[hidden, hidden])),
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[3 * hidden])),
            hidden,
        }
    }

    /// Runs the recurrence over time-major stacked inputs `[steps·size × input]`
    /// from a zero state. Where `mask` is false the state is carried through
    /// unchanged. Returns the state after each step, indexed by original
    /// position even when `reverse` is set.
    pub fn run(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        inputs: Var,
        size: usize,
        steps: usize,
        mask: &[bool],
        reverse: bool,
    ) -> Result<Vec<Var>> {
        let h = self.hidden;
        let projected = tape.matmul(inputs, bound[self.input_weight])?;
        let projected = tape.add_row(projected, bound[self.bias])?;
        let mut state = tape.constant(Tensor::zeros(&[size, h]));
        let mut outputs = vec![state; steps];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..steps).rev())
        } else {
            Box::new(0..steps)
        };
        for t in order {
            let x_t = tape.slice_rows(projected, t * size, (t + 1) * size)?;
            let x_z = tape.slice_cols(x_t, 0, h)?;
            let x_r = tape.slice_cols(x_t, h, 2 * h)?;
            let x_n = tape.slice_cols(x_t, 2 * h, 3 * h)?;

            let h_zr = tape.matmul(state, bound[self.recurrent_gates])?;
            let h_z = tape.slice_cols(h_zr, 0, h)?;
            let h_r = tape.slice_cols(h_zr, h, 2 * h)?;
            let z = tape.add(x_z, h_z)?;
            let z = tape.sigmoid(z);
            let r = tape.add(x_r, h_r)?;
            let r = tape.sigmoid(r);

            let reset = tape.mul(r, state)?;
            let h_n = tape.matmul(reset, bound[self.recurrent_candidate])?;
            let n = tape.add(x_n, h_n)?;
            let n = tape.tanh(n);

            // (1 − z)·n + z·h  ==  n + z·(h − n)
            let diff = tape.sub(state, n)?;
            let keep = tape.mul(z, diff)?;
            let next = tape.add(n, keep)?;

            let step_mask = &mask[t * size..(t + 1) * size];
            state = if step_mask.iter().all(|&m| m) {
                next
            } else {
                tape.select_rows(step_mask, next, state)?
            };
            outputs[t] = state;
        }
        Ok(outputs)
    }
}

/// Two-layer scorer (tanh hidden layer, scalar output) with masked softmax
/// pooling over positions.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub hidden: Linear,
    pub score: Linear,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        Self {
            hidden: Linear::new(store, init, &format!("{name}.l1"), input, hidden),
            score: Linear::new(store, init, &format!("{name}.l2"), hidden, 1),
        }
    }

    /// Scores every position of time-major `states` `[steps·size × d]`,
    /// normalizes over unmasked positions, and returns the weights `[size ×
    /// steps]` together with the weighted sum `[size × d]`.
    pub fn pool(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        states: Var,
        size: usize,
        steps: usize,
        mask: &[bool],
    ) -> Result<(Var, Var)> {
        let d = tape.shape(states)[1];
        let hidden = self.hidden.apply(tape, bound, states)?;
        let hidden = tape.tanh(hidden);
        let scores = self.score.apply(tape, bound, hidden)?;
        let scores = tape.reshape(scores, &[steps, size])?;
        let scores = tape.transpose(scores)?;
        let mask_bt = batch_major(mask, size, steps);
        let weights = tape.masked_softmax(scores, &mask_bt)?;

        let weights_tm = tape.transpose(weights)?;
        let weights_flat = tape.reshape(weights_tm, &[steps * size])?;
        let weighted = tape.scale_rows(states, weights_flat)?;
        let weighted = tape.reshape(weighted, &[steps, size * d])?;
        let summary = tape.sum(weighted, Some(0))?;
        let summary = tape.reshape(summary, &[size, d])?;
        Ok((weights, summary))
    }
}

/// ReLU MLP ending in a sigmoid (one output) or a softmax (K outputs).
#[derive(Debug, Clone)]
pub struct Head {
    pub layers: Vec<Linear>,
    pub output: Linear,
    pub num_tasks: usize,
}

impl Head {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        input: usize,
        widths: &[usize],
        num_tasks: usize,
    ) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = input;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::new(store, init, &format!("head.{i}"), prev, w));
            prev = w;
        }
        let out_width = if num_tasks == 1 { 1 } else { num_tasks };
        let output = Linear::new(store, init, "head.out", prev, out_width);
        Self {
            layers,
            output,
            num_tasks,
        }
    }

    /// `[size × d] → [size]` probabilities (binary) or `[size × K]` rows.
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], summary: Var) -> Result<Var> {
        let mut x = summary;
        for layer in &self.layers {
            x = layer.apply(tape, bound, x)?;
            x = tape.relu(x);
        }
        let logits = self.output.apply(tape, bound, x)?;
        if self.num_tasks == 1 {
            let size = tape.shape(logits)[0];
            let flat = tape.reshape(logits, &[size])?;
            Ok(tape.sigmoid(flat))
        } else {
            tape.softmax_rows(logits)
        }
    }
}

/// Transposes a time-major `[steps × size]` mask into batch-major order.
pub fn batch_major(mask: &[bool], size: usize, steps: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(mask.len());
    for b in 0..size {
        for t in 0..steps {
            out.push(mask[t * size + b]);
        }
    }
    out
}
