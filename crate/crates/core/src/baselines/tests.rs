use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::UserTrail;
use crate::model::{apply_gate, predict, temporal_gate};

fn base(vocab: usize) -> DtainConfig {
    DtainConfig {
        vocab_size: vocab,
        embed_dim: 6,
        model_dim: 4,
        attention_hidden: 4,
        head_layers: vec![5],
        max_len: 32,
        ..DtainConfig::default()
    }
}

fn model(kind: ModelKind, vocab: usize, seed: u64) -> BaselineModel {
    BaselineModel::new(BaselineConfig::new(kind, base(vocab)), seed).unwrap()
}

fn trail(ids: &[usize]) -> UserTrail {
    UserTrail {
        id: "x".into(),
        label: 0,
        prediction_time: ids.len() as f64 * 60.0,
        event_ids: ids.to_vec(),
        timestamps: (0..ids.len()).map(|i| i as f64 * 60.0).collect(),
    }
}

fn batch(trails: &[UserTrail]) -> Batch {
    let refs: Vec<&UserTrail> = trails.iter().collect();
    Batch::from_trails(&refs, 32, 3600.0).unwrap()
}

fn score(m: &BaselineModel, ids: &[usize]) -> f64 {
    predict(m, &[trail(ids)], 1, false).unwrap()[0].probs[0]
}

fn zero_where(m: &mut BaselineModel, pred: impl Fn(&str) -> bool) {
    for p in m.params_mut().iter_mut() {
        if pred(&p.name) {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[test]
fn cnn_zero_embeddings_score_one_half() {
    let mut m = model(ModelKind::Cnn, 5, 1);
    zero_where(&mut m, |n| n == "embedding" || n.ends_with(".b"));
    assert_eq!(score(&m, &[1, 2, 3, 4]), 0.5);
}

#[test]
fn cnn_max_pool_ignores_pattern_position() {
    let mut m = model(ModelKind::Cnn, 6, 2);
    // Id 5 is a blank event: a zero embedding, indistinguishable from padding.
    let emb = m.params_mut().by_name_mut("embedding").unwrap();
    let d = emb.shape()[1];
    emb.data_mut()[5 * d..6 * d].iter_mut().for_each(|v| *v = 0.0);
    let features = |ids: &[usize]| {
        let mut tape = Tape::new();
        let bound = m.params().bind(&mut tape, false);
        let f = m.cnn_features(&mut tape, &bound, &batch(&[trail(ids)])).unwrap();
        tape.value(f).data().to_vec()
    };
    // Each copy keeps a blank margin so every window touching it is present.
    let a = features(&[5, 1, 2, 3, 5, 5, 5, 5]);
    let b = features(&[5, 5, 5, 1, 2, 3, 5, 5]);
    let c = features(&[5, 5, 5, 5, 1, 2, 3, 5]);
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn cnn_handles_sequences_shorter_than_kernel() {
    let cfg = BaselineConfig {
        kernel_sizes: vec![2, 5],
        conv_filters: 3,
        ..BaselineConfig::new(ModelKind::Cnn, base(4))
    };
    let m = BaselineModel::new(cfg, 0).unwrap();
    let mut tape = Tape::new();
    let bound = m.params().bind(&mut tape, false);
    let f = m
        .cnn_features(&mut tape, &bound, &batch(&[trail(&[1]), trail(&[2, 3])]))
        .unwrap();
    assert_eq!(tape.shape(f), &[2, 6]);
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn gru_single_event_is_one_cell_step() {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(4);
    let gru = Gru::new(&mut store, &mut init, "g", 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    store
        .get_mut(gru.bias)
        .data_mut()
        .iter_mut()
        .for_each(|b| *b = rng.random_range(-1.0..1.0));
    let x = [0.4, -1.2, 0.9];
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let xv = tape.constant(Tensor::new(vec![1, 3], x.to_vec()).unwrap());
    let states = gru.run(&mut tape, &bound, xv, 1, 1, &[true], false).unwrap();
    let got = tape.value(states[0]).data().to_vec();

    let w = store.get(gru.input_weight);
    let b = store.get(gru.bias).data();
    let proj = |col: usize| (0..3).map(|i| x[i] * w.get2(i, col)).sum::<f64>() + b[col];
    for k in 0..2 {
        let z = sig(proj(k));
        // From a zero state the reset gate has nothing to act on.
        let n = proj(4 + k).tanh();
        let expect = (1.0 - z) * n;
        assert!(
            (got[k] - expect).abs() <= 1e-15,
            "unit {k}: {} vs {expect}",
            got[k]
        );
    }
}

#[test]
fn gru_zero_weights_ignore_appended_event() {
    let mut m = model(ModelKind::Gru, 5, 3);
    zero_where(&mut m, |n| n.starts_with("gru."));
    assert_eq!(score(&m, &[1, 2]), score(&m, &[1, 2, 4]));
}

#[test]
fn recurrent_baselines_reject_empty_trails() {
    for kind in [
        ModelKind::Gru,
        ModelKind::GruAttn,
        ModelKind::GruSelfAttn,
        ModelKind::Cnn,
    ] {
        let m = model(kind, 4, 0);
        let r = predict(&m, &[trail(&[])], 1, false);
        assert!(matches!(r, Err(crate::Error::EmptySequence(_))), "{kind}");
    }
}

#[test]
fn gru_attn_single_event_and_uniform_attention() {
    let m = model(ModelKind::GruAttn, 5, 6);
    let p = predict(&m, &[trail(&[3])], 1, true).unwrap();
    assert_eq!(p[0].explanation.as_ref().unwrap().events[0].attention, Some(1.0));

    let mut m = model(ModelKind::GruAttn, 5, 6);
    zero_where(&mut m, |n| n.starts_with("gru."));
    let p = predict(&m, &[trail(&[1, 2, 3, 4])], 1, true).unwrap();
    for e in &p[0].explanation.as_ref().unwrap().events {
        assert_eq!(e.attention, Some(0.25));
    }
}

#[test]
fn gru_attn_equals_time_gated_path_with_unit_gate() {
    let m = model(ModelKind::GruAttn, 7, 8);
    let (gru, attn, head, emb) = m.gru_attention_parts().unwrap();
    let trails = vec![trail(&[1, 4, 6, 2]), trail(&[3]), trail(&[5, 5, 0])];
    let b = batch(&trails);
    let direct = predict(&m, &trails, 3, false).unwrap();

    let mut tape = Tape::new();
    let bound = m.params().bind(&mut tape, false);
    // σ(40) rounds to exactly 1.0 in f64, so every gate is the identity.
    let theta = tape.constant(Tensor::full(&[7], 40.0));
    let mu = tape.constant(Tensor::zeros(&[7]));
    let embedded = tape.embedding_lookup(bound[emb], &b.ids).unwrap();
    let gate = temporal_gate(&mut tape, theta, mu, &b.ids, &b.deltas).unwrap();
    assert!(tape.value(gate.gate).data().iter().all(|&g| g == 1.0));
    let gated = apply_gate(&mut tape, embedded, gate.gate).unwrap();
    let states = gru
        .run(&mut tape, &bound, gated, b.size, b.steps, &b.mask, false)
        .unwrap();
    let stacked = tape.concat_rows(&states).unwrap();
    let (_, summary) = attn
        .pool(&mut tape, &bound, stacked, b.size, b.steps, &b.mask)
        .unwrap();
    let probs = head.forward(&mut tape, &bound, summary).unwrap();
    for (i, p) in direct.iter().enumerate() {
        assert!((p.probs[0] - tape.value(probs).data()[i]).abs() <= 1e-12);
    }
}

fn self_attend(sa: &SelfAttention, store: &ParamStore, x: &Tensor) -> (Tensor, Vec<Tensor>) {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let (out, maps) = sa.apply_sequence(&mut tape, &bound, xv).unwrap();
    (
        tape.value(out).clone(),
        maps.iter().map(|&m| tape.value(m).clone()).collect(),
    )
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(
        vec![r, c],
        (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn self_attention_singleton_returns_value_projection() {
    let m = model(ModelKind::GruSelfAttn, 4, 9);
    let sa = m.self_attention().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_matrix(&mut rng, 1, 6);
    let (out, _) = self_attend(&sa, m.params(), &x);
    let wv = m.params().get(sa.value);
    for j in 0..6 {
        let expect: f64 = (0..6).map(|i| x.data()[i] * wv.get2(i, j)).sum();
        assert!((out.data()[j] - expect).abs() <= 1e-15);
    }
}

#[test]
fn self_attention_rows_are_distributions() {
    for heads in [1, 2, 3] {
        let cfg = BaselineConfig {
            self_attn_heads: heads,
            ..BaselineConfig::new(ModelKind::GruSelfAttn, base(4))
        };
        let m = BaselineModel::new(cfg, 2).unwrap();
        let sa = m.self_attention().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(heads as u64);
        let (out, maps) = self_attend(&sa, m.params(), &random_matrix(&mut rng, 5, 6));
        assert_eq!(out.shape(), &[5, 6]);
        assert_eq!(maps.len(), heads);
        for map in maps {
            for r in 0..5 {
                assert!((map.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn self_attention_is_permutation_equivariant() {
    let m = model(ModelKind::GruSelfAttn, 4, 12);
    let sa = m.self_attention().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..10 {
        let n = rng.random_range(2..8);
        let x = random_matrix(&mut rng, n, 6);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let px = Tensor::from_rows(&perm.iter().map(|&p| x.row(p).to_vec()).collect::<Vec<_>>()).unwrap();
        let (out, _) = self_attend(&sa, m.params(), &x);
        let (pout, _) = self_attend(&sa, m.params(), &px);
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in pout.row(i).iter().zip(out.row(p)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn baselines_are_padding_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let trails: Vec<UserTrail> = (0..5)
        .map(|n| trail(&(0..1 + 2 * n).map(|_| rng.random_range(0..9)).collect::<Vec<_>>()))
        .collect();
    for kind in [
        ModelKind::Cnn,
        ModelKind::Gru,
        ModelKind::GruAttn,
        ModelKind::GruSelfAttn,
    ] {
        let m = model(kind, 9, 31);
        let together = predict(&m, &trails, 5, false).unwrap();
        for (t, p) in trails.iter().zip(&together) {
            let alone = predict(&m, std::slice::from_ref(t), 1, false).unwrap();
            assert!((alone[0].probs[0] - p.probs[0]).abs() <= 1e-12, "{kind}");
        }
    }
}

#[test]
fn config_is_validated_per_kind() {
    assert!(BaselineModel::new(BaselineConfig::new(ModelKind::Dtain, base(3)), 0).is_err());
    let bad_heads = BaselineConfig {
        self_attn_heads: 4,
        ..BaselineConfig::new(ModelKind::GruSelfAttn, base(3))
    };
    assert!(bad_heads.validate().is_err());
    // Irrelevant fields are not checked for other kinds.
    assert!(BaselineConfig {
        self_attn_heads: 4,
        ..BaselineConfig::new(ModelKind::Gru, base(3))
    }
    .validate()
    .is_ok());
    let bad_kernel = BaselineConfig {
        kernel_sizes: vec![3, 0],
        ..BaselineConfig::new(ModelKind::Cnn, base(3))
    };
    assert!(bad_kernel.validate().is_err());
}

#[test]
fn multitask_baselines_emit_distributions() {
    for kind in [
        ModelKind::Cnn,
        ModelKind::Gru,
        ModelKind::GruAttn,
        ModelKind::GruSelfAttn,
    ] {
        let cfg = BaselineConfig::new(
            kind,
            DtainConfig {
                num_tasks: 3,
                ..base(5)
            },
        );
        let m = BaselineModel::new(cfg, 1).unwrap();
        let p = predict(&m, &[trail(&[1, 2]), trail(&[4])], 2, false).unwrap();
        for row in p {
            assert_eq!(row.probs.len(), 3);
            assert!((row.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
