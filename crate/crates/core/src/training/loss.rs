use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Predictions are clamped into `[LOSS_CLAMP, 1 − LOSS_CLAMP]` before the log.
pub const LOSS_CLAMP: f64 = 1e-12;

/// Mean binary cross-entropy of `[N]` probabilities against 0/1 labels.
pub fn logistic_loss(tape: &mut Tape, preds: Var, labels: &[usize]) -> Result<Var> {
    let n = tape.value(preds).numel();
    if tape.shape(preds).len() != 1 || n != labels.len() {
        return Err(Error::Contract(format!(
            "logistic_loss: predictions {:?} vs {} labels",
            tape.shape(preds),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Contract(format!("binary label {bad} is not 0 or 1")));
    }
    let y: Vec<f64> = labels.iter().map(|&y| y as f64).collect();
    let not_y: Vec<f64> = y.iter().map(|y| 1.0 - y).collect();
    let y = tape.constant(Tensor::vector(y));
    let not_y = tape.constant(Tensor::vector(not_y));
    let one = tape.constant(Tensor::scalar(1.0));

    let p = tape.clamp(preds, LOSS_CLAMP, 1.0 - LOSS_CLAMP);
    let log_p = tape.log(p);
    let q = tape.sub(one, p)?;
    let log_q = tape.log(q);
    let pos = tape.mul(y, log_p)?;
    let neg = tape.mul(not_y, log_q)?;
    let ll = tape.add(pos, neg)?;
    let mean = tape.mean(ll, None)?;
    Ok(tape.neg(mean))
}

/// Mean negative log-likelihood of the true class under `[N×K]` outcome
/// distributions.
pub fn multitask_loss(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    let [n, k] = shape[..] else {
        return Err(Error::Contract(format!(
            "multitask_loss expects [N×K], got {shape:?}"
        )));
    };
    if n != labels.len() {
        return Err(Error::Contract(format!(
            "multitask_loss: {n} rows vs {} labels",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Contract(format!("label {bad} outside {k} classes")));
    }
    let picked = tape.pick(probs, labels)?;
    let clamped = tape.clamp(picked, LOSS_CLAMP, 1.0);
    let ll = tape.log(clamped);
    let mean = tape.mean(ll, None)?;
    Ok(tape.neg(mean))
}
