use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

type Build = dyn Fn(&mut Tape, &[Var]) -> crate::Result<Var>;

fn eval(inputs: &[Tensor], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.value(out).item().unwrap()
}

/// Largest relative error between tape gradients and central differences.
fn max_grad_error(inputs: &[Tensor], build: &Build) -> f64 {
    let h = 1e-5;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], t);
        for k in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= h;
            let numeric = (eval(&plus, build) - eval(&minus, build)) / (2.0 * h);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .unwrap()
}

fn matrix(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn matmul_identity_and_small_product() {
    let mut tape = Tape::new();
    let eye = tape.constant(matrix(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let m = tape.constant(matrix(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let p = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(matrix(&[&[1.0, 2.0]]));
    let b = tape.constant(matrix(&[&[3.0], &[4.0]]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).shape(), &[1, 1]);
    assert_eq!(tape.value(c).data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![random(&mut rng, &[4, 3]), random(&mut rng, &[3, 2])];
    let err = max_grad_error(&inputs, &|t, v| {
        let p = t.matmul(v[0], v[1])?;
        t.sum(p, None)
    });
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn pointwise_values() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s).item().unwrap(), 0.5);
    let x = tape.constant(Tensor::vector(vec![-3.0, 3.0]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 3.0]);

    let big = tape.constant(Tensor::vector(vec![-800.0, 800.0]));
    let s = tape.sigmoid(big);
    let v = tape.value(s).data();
    assert!(v.iter().all(|x| x.is_finite()));
}

#[test]
fn sigmoid_derivative_at_zero() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(0.0));
    let s = tape.sigmoid(x);
    let g = tape.backward(s).unwrap();
    let analytic = g.get(x).unwrap().item().unwrap();
    assert_eq!(analytic, 0.25);
    let h = 1e-5;
    let numeric = (sigmoid(h) - sigmoid(-h)) / (2.0 * h);
    assert!((analytic - numeric).abs() <= 1e-8);
}

#[test]
fn elementwise_dispatch_and_shape_errors() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
    let c = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let s = tape.constant(Tensor::scalar(10.0));
    let sum = tape.elementwise(ElementwiseOp::Add, &[a, b]).unwrap();
    assert_eq!(tape.value(sum).data(), &[4.0, 6.0]);
    let diff = tape.elementwise(ElementwiseOp::Sub, &[s, a]).unwrap();
    assert_eq!(tape.value(diff).data(), &[9.0, 8.0]);
    let prod = tape.elementwise(ElementwiseOp::Mul, &[a, s]).unwrap();
    assert_eq!(tape.value(prod).data(), &[10.0, 20.0]);
    assert!(matches!(
        tape.elementwise(ElementwiseOp::Mul, &[a, c]),
        Err(Error::Dimension { .. })
    ));
    assert!(matches!(
        tape.elementwise(ElementwiseOp::Tanh, &[a, b]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn masked_softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, 1.0, 1.0]));
    let y = tape.masked_softmax(x, &[true, true, true]).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = tape.constant(Tensor::vector(vec![5.0, 0.0]));
    let y = tape.masked_softmax(x, &[true, false]).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 0.0]);

    // softmax is shift invariant, so [1000, 999] has the closed form of [1, 0].
    let e = std::f64::consts::E;
    let x = tape.constant(Tensor::vector(vec![1000.0, 999.0]));
    let y = tape.masked_softmax(x, &[true, true]).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] - e / (1.0 + e)).abs() < 1e-15);
    assert!((v[1] - 1.0 / (1.0 + e)).abs() < 1e-15);
    assert!((v[0] - 0.7311).abs() < 1e-4);
}

#[test]
fn masked_softmax_all_masked_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(
        tape.masked_softmax(x, &[false, false]),
        Err(Error::EmptySequence(_))
    ));
}

#[test]
fn embedding_lookup_gathers_and_scatters() {
    let mut tape = Tape::new();
    let table = tape.param(matrix(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
    let rows = tape.embedding_lookup(table, &[2, 0]).unwrap();
    assert_eq!(tape.value(rows).data(), &[5.0, 6.0, 1.0, 2.0]);

    let mut tape = Tape::new();
    let table = tape.param(matrix(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
    let rows = tape.embedding_lookup(table, &[1, 1]).unwrap();
    let weights = tape.constant(matrix(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let prod = tape.mul(rows, weights).unwrap();
    let loss = tape.sum(prod, None).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(table).unwrap().data(), &[0.0, 0.0, 4.0, 6.0, 0.0, 0.0]);
}

#[test]
fn embedding_lookup_rejects_out_of_range_ids() {
    let mut tape = Tape::new();
    let table = tape.param(Tensor::zeros(&[3, 2]));
    match tape.embedding_lookup(table, &[0, 3]) {
        Err(Error::Vocabulary { id, size }) => assert_eq!((id, size), (3, 3)),
        other => panic!("expected vocabulary error, got {other:?}"),
    }
}

#[test]
fn embedding_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = vec![random(&mut rng, &[5, 3]), random(&mut rng, &[4, 3])];
    let err = max_grad_error(&inputs, &|t, v| {
        let rows = t.embedding_lookup(v[0], &[4, 1, 1, 0])?;
        let p = t.mul(rows, v[1])?;
        let s = t.tanh(p);
        t.sum(s, None)
    });
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn reductions() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let s = tape.sum(x, None).unwrap();
    assert_eq!(tape.value(s).item().unwrap(), 6.0);
    let y = tape.constant(Tensor::vector(vec![2.0, 4.0]));
    let m = tape.mean(y, None).unwrap();
    assert_eq!(tape.value(m).item().unwrap(), 3.0);

    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, -2.0, 3.0, 9.0]));
    let m = tape.mean(x, Some(0)).unwrap();
    let g = tape.backward(m).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);

    let mut tape = Tape::new();
    let x = tape.constant(matrix(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let cols = tape.sum(x, Some(0)).unwrap();
    assert_eq!(tape.value(cols).data(), &[4.0, 6.0]);
    let rows = tape.mean(x, Some(1)).unwrap();
    assert_eq!(tape.value(rows).data(), &[1.5, 3.5]);
    assert!(matches!(tape.sum(x, Some(2)), Err(Error::InvalidAxis { .. })));
}

#[test]
fn backward_power_rule_and_fan_out() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let sq = tape.mul(x, x).unwrap();
    let g = tape.backward(sq).unwrap();
    assert_eq!(g.get(x).unwrap().item().unwrap(), 6.0);

    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(1.0));
    let y = tape.add(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item().unwrap(), 2.0);
}

#[test]
fn backward_contract_errors() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));

    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(2.0));
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
}

#[test]
fn composite_sigmoid_matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![
        random(&mut rng, &[3, 4]),
        random(&mut rng, &[4, 2]),
        random(&mut rng, &[2]),
    ];
    let err = max_grad_error(&inputs, &|t, v| {
        let p = t.matmul(v[0], v[1])?;
        let p = t.add_row(p, v[2])?;
        let s = t.sigmoid(p);
        let s2 = t.mul(s, s)?;
        t.mean(s2, None)
    });
    assert!(err <= 1e-5, "rel err {err}");
}

/// Every primitive against central differences on 20 seeds.
#[test]
fn every_primitive_passes_gradient_check_on_many_seeds() {
    let cases: Vec<(&str, Vec<Vec<usize>>, Box<Build>)> = vec![
        (
            "matmul",
            vec![vec![3, 4], vec![4, 2]],
            Box::new(|t, v| {
                let p = t.matmul(v[0], v[1])?;
                let q = t.mul(p, p)?;
                t.sum(q, None)
            }),
        ),
        (
            "add/sub/mul",
            vec![vec![3, 2], vec![3, 2], vec![]],
            Box::new(|t, v| {
                let a = t.add(v[0], v[1])?;
                let b = t.sub(a, v[2])?;
                let c = t.mul(b, v[0])?;
                let d = t.mul(c, v[2])?;
                t.sum(d, None)
            }),
        ),
        (
            "sigmoid/tanh/exp",
            vec![vec![5]],
            Box::new(|t, v| {
                let a = t.sigmoid(v[0]);
                let b = t.tanh(v[0]);
                let c = t.scale(v[0], 0.3);
                let c = t.exp(c);
                let ab = t.mul(a, b)?;
                let abc = t.mul(ab, c)?;
                t.sum(abc, None)
            }),
        ),
        (
            "relu",
            vec![vec![6]],
            Box::new(|t, v| {
                let r = t.relu(v[0]);
                let s = t.mul(r, v[0])?;
                t.sum(s, None)
            }),
        ),
        (
            "log/clamp",
            vec![vec![4]],
            Box::new(|t, v| {
                let s = t.sigmoid(v[0]);
                let c = t.clamp(s, 1e-12, 1.0 - 1e-12);
                let l = t.log(c);
                t.mean(l, None)
            }),
        ),
        (
            "masked_softmax",
            vec![vec![2, 4], vec![2, 4]],
            Box::new(|t, v| {
                let s = t.masked_softmax(v[0], &[true, false, true, true, false, true, true, true])?;
                let p = t.mul(s, v[1])?;
                t.sum(p, None)
            }),
        ),
        (
            "embedding",
            vec![vec![4, 3], vec![5, 3]],
            Box::new(|t, v| {
                let e = t.embedding_lookup(v[0], &[0, 3, 3, 1, 0])?;
                let p = t.mul(e, v[1])?;
                let p = t.mul(p, e)?;
                t.sum(p, None)
            }),
        ),
        (
            "reduce axis",
            vec![vec![3, 4]],
            Box::new(|t, v| {
                let a = t.sum(v[0], Some(0))?;
                let b = t.mean(v[0], Some(1))?;
                let a2 = t.mul(a, a)?;
                let b2 = t.mul(b, b)?;
                let sa = t.sum(a2, None)?;
                let sb = t.sum(b2, None)?;
                t.add(sa, sb)
            }),
        ),
        (
            "scale_rows",
            vec![vec![3, 2], vec![3]],
            Box::new(|t, v| {
                let s = t.scale_rows(v[0], v[1])?;
                let q = t.mul(s, s)?;
                t.sum(q, None)
            }),
        ),
        (
            "concat/slice",
            vec![vec![2, 3], vec![2, 2]],
            Box::new(|t, v| {
                let c = t.concat_cols(&[v[0], v[1]])?;
                let r = t.concat_rows(&[c, c])?;
                let s = t.slice_cols(r, 1, 4)?;
                let s = t.slice_rows(s, 1, 3)?;
                let q = t.mul(s, s)?;
                let q = t.tanh(q);
                t.sum(q, None)
            }),
        ),
        (
            "transpose/reshape",
            vec![vec![2, 3], vec![3, 2]],
            Box::new(|t, v| {
                let tr = t.transpose(v[0])?;
                let p = t.mul(tr, v[1])?;
                let r = t.reshape(p, &[2, 3])?;
                let m = t.matmul(r, tr)?;
                t.sum(m, None)
            }),
        ),
        (
            "select_rows",
            vec![vec![3, 2], vec![3, 2]],
            Box::new(|t, v| {
                let s = t.select_rows(&[true, false, true], v[0], v[1])?;
                let q = t.mul(s, v[1])?;
                t.sum(q, None)
            }),
        ),
        (
            "masked_max",
            vec![vec![2, 3], vec![2, 3], vec![2, 3]],
            Box::new(|t, v| {
                let valid = vec![vec![true, true], vec![true, false], vec![false, true]];
                let m = t.masked_max(&[v[0], v[1], v[2]], &valid)?;
                let q = t.mul(m, m)?;
                t.sum(q, None)
            }),
        ),
        (
            "pick",
            vec![vec![3, 3]],
            Box::new(|t, v| {
                let s = t.softmax_rows(v[0])?;
                let p = t.pick(s, &[2, 0, 1])?;
                let l = t.log(p);
                t.mean(l, None)
            }),
        ),
    ];
    for (name, shapes, build) in &cases {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
            let err = max_grad_error(&inputs, build.as_ref());
            assert!(err <= 1e-4, "{name} seed {seed}: rel err {err}");
        }
    }
}

#[test]
fn masked_softmax_is_a_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let len = rng.random_range(1..12);
        let mut mask: Vec<bool> = (0..len).map(|_| rng.random_bool(0.6)).collect();
        mask[rng.random_range(0..len)] = true;
        let scores: Vec<f64> = (0..len).map(|_| rng.random_range(-50.0..50.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(scores));
        let y = tape.masked_softmax(x, &mask).unwrap();
        let v = tape.value(y).data();
        let total: f64 = v.iter().sum();
        assert!((total - 1.0).abs() <= 1e-12);
        for (p, &keep) in v.iter().zip(&mask) {
            assert!((0.0..=1.0).contains(p));
            if !keep {
                assert_eq!(*p, 0.0);
            }
        }
    }
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape = Tape::new();
        let a = tape.param(random(&mut rng, &[6, 5]));
        let b = tape.param(random(&mut rng, &[5, 4]));
        let p = tape.matmul(a, b).unwrap();
        let s = tape.tanh(p);
        let l = tape.mean(s, None).unwrap();
        let g = tape.backward(l).unwrap();
        (g.get(a).unwrap().clone(), g.get(b).unwrap().clone())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(2.0));
    let c = tape.constant(Tensor::scalar(5.0));
    let y = tape.mul(x, c).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item().unwrap(), 5.0);
    assert!(g.get(c).is_none());
}
