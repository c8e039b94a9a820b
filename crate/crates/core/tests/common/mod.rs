#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dtain::autodiff::Tape;
use dtain::baselines::{BaselineConfig, BaselineModel};
use dtain::data::UserTrail;
use dtain::metrics::{roc_auc, ScoredSet};
use dtain::model::{predict, Batch, DtainConfig, DtainModel, ModelKind, SequenceModel};
use dtain::training::{batch_loss, loss_and_gradients};

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/recsys")
}

pub fn trail(id: &str, label: usize, ids: &[usize], times: &[f64], prediction_time: f64) -> UserTrail {
    UserTrail {
        id: id.into(),
        label,
        prediction_time,
        event_ids: ids.to_vec(),
        timestamps: times.to_vec(),
    }
}

/// Trails of 2..=8 events over ids 2..10; odd-indexed trails contain id 1
/// and are positive.
pub fn separable_trails(n: usize, seed: u64) -> Vec<UserTrail> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.random_range(2..=8);
            let mut ids: Vec<usize> = (0..len).map(|_| rng.random_range(2..10)).collect();
            let label = i % 2;
            if label == 1 {
                ids[rng.random_range(0..len)] = 1;
            }
            let times: Vec<f64> = (0..len).map(|k| 1000.0 + 600.0 * k as f64).collect();
            let pred = times[len - 1] + 1800.0;
            trail(&format!("t{i}"), label, &ids, &times, pred)
        })
        .collect()
}

pub fn small_config(vocab: usize, num_tasks: usize) -> DtainConfig {
    DtainConfig {
        vocab_size: vocab,
        embed_dim: 4,
        model_dim: 4,
        attention_hidden: 3,
        head_layers: vec![5],
        max_len: 8,
        num_tasks,
        ..DtainConfig::default()
    }
}

/// One model of every kind on `base`, with all parameters (biases and the
/// temporal parameters included) drawn away from their zero initial values.
pub fn every_model(base: &DtainConfig, seed: u64) -> Vec<Box<dyn SequenceModel>> {
    let mut models: Vec<Box<dyn SequenceModel>> =
        vec![Box::new(DtainModel::new(base.clone(), seed).unwrap())];
    for kind in [
        ModelKind::Cnn,
        ModelKind::Gru,
        ModelKind::GruAttn,
        ModelKind::GruSelfAttn,
    ] {
        let mut cfg = BaselineConfig::new(kind, base.clone());
        cfg.conv_filters = 4;
        cfg.kernel_sizes = vec![2, 3];
        models.push(Box::new(BaselineModel::new(cfg, seed).unwrap()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    for m in &mut models {
        for p in m.params_mut().iter_mut() {
            for v in p.tensor.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    models
}

fn loss_value(model: &dyn SequenceModel, batch: &Batch) -> f64 {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, false);
    let loss = batch_loss(model, &mut tape, &bound, batch).unwrap();
    tape.value(loss).item().unwrap()
}

/// Worst relative error between backprop gradients and central differences
/// over every parameter element, with the offending parameter's name.
pub fn gradient_check(model: &mut dyn SequenceModel, batch: &Batch, step: f64) -> (f64, String) {
    let (_, grads) = loss_and_gradients(&*model, batch).unwrap();
    let mut worst = (0.0, String::new());
    for i in 0..grads.len() {
        for k in 0..grads[i].numel() {
            let original = model.params().get(i).data()[k];
            model.params_mut().get_mut(i).data_mut()[k] = original + step;
            let up = loss_value(&*model, batch);
            model.params_mut().get_mut(i).data_mut()[k] = original - step;
            let down = loss_value(&*model, batch);
            model.params_mut().get_mut(i).data_mut()[k] = original;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads[i].data()[k];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if err > worst.0 {
                worst = (err, format!("{}[{k}]", model.params().name(i)));
            }
        }
    }
    worst
}

pub fn test_auc(model: &dyn SequenceModel, test: &[UserTrail]) -> f64 {
    let preds = predict(model, test, 512, false).unwrap();
    let labels: Vec<usize> = test.iter().map(|t| t.label).collect();
    let set = ScoredSet::from_binary(preds.iter().map(|p| p.pcvr()).collect(), &labels).unwrap();
    roc_auc(&set).unwrap()
}
