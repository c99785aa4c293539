use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sttran_core::numerics::{
    clip_global_norm, grad_check, linear, softmax, ConvGeom, GradCheckOptions, Graph, ParamId,
    ParamStore, Precision, Tensor, Var,
};

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn add_param(s: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> ParamId {
    let n = shape.iter().product();
    s.insert(name, Tensor::new(shape.to_vec(), rand_vec(rng, n)).unwrap(), true)
        .unwrap()
}

/// Contracts an op output with fixed random weights so every output element
/// contributes a distinct amount to the scalar.
fn contract(g: &mut Graph, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = (g.rows(y), g.cols(y));
    let w = g.matrix(r, c, rand_vec(&mut rng, r * c)).unwrap();
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

fn check(s: &mut ParamStore, f: impl Fn(&mut Graph) -> sttran_core::Result<Var>) -> f64 {
    grad_check(s, f, GradCheckOptions::default())
        .unwrap()
        .max_rel_error
}

const TRIALS: u64 = 100;

#[test]
fn linear_examples() {
    let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
    let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(linear(&x, &w, None).unwrap().data(), &[1.0, 2.0]);

    let x = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
    let w = Tensor::matrix(2, 1, vec![2.0, 3.0]).unwrap();
    let b = Tensor::new(vec![1], vec![1.0]).unwrap();
    assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[6.0]);

    let x = Tensor::zeros(&[10, 1936]);
    let w = Tensor::zeros(&[1936, 2048]);
    assert_eq!(linear(&x, &w, None).unwrap().shape(), &[10, 2048]);
}

#[test]
fn linear_shape_error_reports_both_shapes() {
    let x = Tensor::zeros(&[2, 3]);
    let w = Tensor::zeros(&[4, 5]);
    let err = linear(&x, &w, None).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
}

fn ln_row(row: Vec<f64>, gain: f64, bias: f64) -> Vec<f64> {
    let n = row.len();
    let mut s = ParamStore::new(0, Precision::F64);
    let gi = s.insert("g", Tensor::full(&[n], gain), true).unwrap();
    let bi = s.insert("b", Tensor::full(&[n], bias), true).unwrap();
    let mut g = Graph::new(&s);
    let x = g.matrix(1, n, row).unwrap();
    let (gv, bv) = (g.param(gi), g.param(bi));
    let y = g.layer_norm(x, gv, bv).unwrap();
    g.data(y).to_vec()
}

#[test]
fn layer_norm_examples() {
    assert!(ln_row(vec![1.0, 1.0, 1.0], 1.0, 0.0).iter().all(|v| v.abs() < 1e-9));
    let y = ln_row(vec![1.0, -1.0], 1.0, 0.0);
    assert!((y[0] - 1.0).abs() < 1e-5 && (y[1] + 1.0).abs() < 1e-5);
    let y = ln_row(vec![0.0, 2.0], 2.0, 1.0);
    assert!((y[0] + 1.0).abs() < 1e-4 && (y[1] - 3.0).abs() < 1e-4);
}

#[test]
fn batch_norm_examples() {
    let mut s = ParamStore::new(0, Precision::F64);
    let gi = s.ones("g", &[1]).unwrap();
    let bi = s.zeros("b", &[1]).unwrap();
    let rm = s.buffer("rm", Tensor::zeros(&[1])).unwrap();
    let rv = s.buffer("rv", Tensor::full(&[1], 1.0)).unwrap();

    let updates = {
        let mut g = Graph::new(&s);
        let x = g.matrix(2, 1, vec![0.0, 2.0]).unwrap();
        let (gv, bv) = (g.param(gi), g.param(bi));
        let y = g.batch_norm(x, gv, bv, rm, rv, 0.1, true).unwrap();
        let out = g.data(y).to_vec();
        assert!((out[0] + 1.0).abs() < 1e-4 && (out[1] - 1.0).abs() < 1e-4);
        g.take_buffer_updates()
    };
    s.apply_buffer_updates(updates);
    // batch mean 1 with momentum 0.1 from 0
    assert!((s.value(rm).data()[0] - 0.1).abs() < 1e-12);

    let mut s = ParamStore::new(0, Precision::F64);
    let gi = s.ones("g", &[2]).unwrap();
    let bi = s.zeros("b", &[2]).unwrap();
    let rm = s.buffer("rm", Tensor::zeros(&[2])).unwrap();
    let rv = s.buffer("rv", Tensor::full(&[2], 1.0)).unwrap();
    let mut g = Graph::new(&s);
    let x = g.matrix(3, 2, vec![0.5, -1.0, 2.0, 3.0, 0.0, 0.25]).unwrap();
    let (gv, bv) = (g.param(gi), g.param(bi));
    let y = g.batch_norm(x, gv, bv, rm, rv, 0.1, false).unwrap();
    for (a, b) in g.data(y).iter().zip(g.data(x)) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn batch_norm_single_row_uses_running_stats() {
    let mut s = ParamStore::new(0, Precision::F64);
    let gi = s.ones("g", &[1]).unwrap();
    let bi = s.zeros("b", &[1]).unwrap();
    let rm = s.buffer("rm", Tensor::full(&[1], 1.0)).unwrap();
    let rv = s.buffer("rv", Tensor::full(&[1], 4.0)).unwrap();
    let mut g = Graph::new(&s);
    let x = g.matrix(1, 1, vec![5.0]).unwrap();
    let (gv, bv) = (g.param(gi), g.param(bi));
    let y = g.batch_norm(x, gv, bv, rm, rv, 0.1, true).unwrap();
    assert!((g.data(y)[0] - 2.0).abs() < 1e-5);
    assert!(g.take_buffer_updates().is_empty());
}

#[test]
fn backward_examples() {
    let mut s = ParamStore::new(0, Precision::F64);
    let w = s.insert("w", Tensor::new(vec![1], vec![3.0]).unwrap(), true).unwrap();
    let mut g = Graph::new(&s);
    let wv = g.param(w);
    let sq = g.mul(wv, wv).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap().data(), &[6.0]);

    let mut g = Graph::new(&s);
    let _ = g.param(w);
    let c = g.matrix(1, 1, vec![2.0]).unwrap();
    let loss = g.sum(c);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(w).is_none_or(|t| t.data() == [0.0]));
}

#[test]
fn backward_rejects_non_scalar() {
    let s = ParamStore::new(0, Precision::F64);
    let mut g = Graph::new(&s);
    let x = g.matrix(1, 2, vec![1.0, 2.0]).unwrap();
    assert!(matches!(
        g.backward(x),
        Err(sttran_core::Error::Contract(_))
    ));
}

#[test]
fn composite_linear_softmax_margin_matches_finite_differences() {
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let mut s = ParamStore::new(trial, Precision::F64);
        let w = add_param(&mut s, &mut rng, "w", &[4, 5]);
        let b = add_param(&mut s, &mut rng, "b", &[5]);
        let xs = rand_vec(&mut rng, 12);
        let err = check(&mut s, |g| {
            let x = g.matrix(3, 4, xs.clone())?;
            let (wv, bv) = (g.param(w), g.param(b));
            let y = g.linear(x, wv, Some(bv))?;
            let p = g.softmax_rows(y)?;
            g.multilabel_margin(p, &[vec![0, 2], vec![1], vec![4]], &[vec![1, 3], vec![0, 2, 3, 4], vec![0]])
        });
        assert!(err <= 1e-4, "trial {trial}: rel err {err}");
    }
}

#[test]
fn gradcheck_quadratic_form_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut s = ParamStore::new(0, Precision::F64);
    let w = add_param(&mut s, &mut rng, "w", &[1, 6]);
    let a = rand_vec(&mut rng, 36);
    let err = check(&mut s, |g| {
        let wv = g.param(w);
        let am = g.matrix(6, 6, a.clone())?;
        let aw = g.matmul(wv, am)?;
        let q = g.mul(aw, wv)?;
        Ok(g.sum(q))
    });
    assert!(err < 1e-8, "{err}");
}

#[test]
fn gradcheck_detects_corrupted_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut s = ParamStore::new(0, Precision::F64);
    let w = add_param(&mut s, &mut rng, "w", &[3, 3]);
    let xs = rand_vec(&mut rng, 6);
    let opts = GradCheckOptions {
        corrupt_backward: true,
        ..Default::default()
    };
    let report = grad_check(
        &mut s,
        |g| {
            let x = g.matrix(2, 3, xs.clone())?;
            let wv = g.param(w);
            let y = g.matmul(x, wv)?;
            let y = g.matmul(y, wv)?;
            Ok(contract(g, y, 5))
        },
        opts,
    )
    .unwrap();
    assert!(report.max_rel_error > 1e-2, "{report:?}");
}

/// Every differentiable op, checked on random inputs.
#[test]
fn every_op_passes_gradcheck() {
    type OpFn = fn(&mut Graph, &[Var]) -> sttran_core::Result<Var>;
    // (name, input shapes, op)
    let cases: Vec<(&str, Vec<Vec<usize>>, OpFn)> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("transpose", vec![vec![3, 4]], |g, v| Ok(g.transpose(v[0]))),
        ("add", vec![vec![2, 3], vec![2, 3]], |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![2, 3], vec![2, 3]], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![vec![2, 3], vec![2, 3]], |g, v| g.mul(v[0], v[1])),
        ("add_row", vec![vec![3, 4], vec![4]], |g, v| g.add_row(v[0], v[1])),
        ("scale", vec![vec![2, 2]], |g, v| Ok(g.scale(v[0], -1.7))),
        ("relu", vec![vec![3, 3]], |g, v| Ok(g.relu(v[0]))),
        ("sigmoid", vec![vec![3, 3]], |g, v| Ok(g.sigmoid(v[0]))),
        ("softmax", vec![vec![3, 5]], |g, v| g.softmax_rows(v[0])),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |g, v| {
            g.layer_norm(v[0], v[1], v[2])
        }),
        ("gather_rows", vec![vec![4, 3]], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3])),
        ("concat_cols", vec![vec![2, 3], vec![2, 1]], |g, v| g.concat_cols(&[v[0], v[1]])),
        ("slice_cols", vec![vec![2, 5]], |g, v| g.slice_cols(v[0], 1, 3)),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], |g, v| g.concat_rows(&[v[0], v[1]])),
        ("sum", vec![vec![2, 3]], |g, v| Ok(g.sum(v[0]))),
        ("cross_entropy", vec![vec![3, 4]], |g, v| g.cross_entropy(v[0], &[1, 0, 3])),
        ("margin", vec![vec![2, 4]], |g, v| {
            g.multilabel_margin(v[0], &[vec![0], vec![1, 2]], &[vec![1, 2, 3], vec![0, 3]])
        }),
        ("conv2d", vec![vec![2, 2 * 5 * 5], vec![3, 2 * 3 * 3], vec![3]], |g, v| {
            let geom = ConvGeom {
                in_channels: 2,
                out_channels: 3,
                height: 5,
                width: 5,
                kernel: 3,
                stride: 2,
                padding: 1,
            };
            g.conv2d(v[0], v[1], v[2], geom)
        }),
    ];
    for (name, shapes, op) in cases {
        for trial in 0..TRIALS {
            let mut rng = ChaCha8Rng::seed_from_u64(trial * 7919 + name.len() as u64);
            let mut s = ParamStore::new(trial, Precision::F64);
            let ids: Vec<ParamId> = shapes
                .iter()
                .enumerate()
                .map(|(i, sh)| add_param(&mut s, &mut rng, &format!("in{i}"), sh))
                .collect();
            let err = check(&mut s, |g| {
                let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
                let y = op(g, &vars)?;
                Ok(contract(g, y, trial))
            });
            assert!(err <= 1e-4, "{name} trial {trial}: rel err {err}");
        }
    }
}

#[test]
fn batch_norm_gradcheck_both_modes() {
    for train in [true, false] {
        for trial in 0..TRIALS {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let mut s = ParamStore::new(trial, Precision::F64);
            let x = add_param(&mut s, &mut rng, "x", &[4, 3]);
            let gi = add_param(&mut s, &mut rng, "g", &[3]);
            let bi = add_param(&mut s, &mut rng, "b", &[3]);
            let rm = s.buffer("rm", Tensor::new(vec![3], rand_vec(&mut rng, 3)).unwrap()).unwrap();
            let rv = s.buffer("rv", Tensor::full(&[3], 1.3)).unwrap();
            let err = check(&mut s, |g| {
                let (xv, gv, bv) = (g.param(x), g.param(gi), g.param(bi));
                let y = g.batch_norm(xv, gv, bv, rm, rv, 0.1, train)?;
                Ok(contract(g, y, trial + 100))
            });
            assert!(err <= 1e-4, "train={train} trial {trial}: {err}");
        }
    }
}

#[test]
fn same_seed_bit_identical_forward() {
    let run = || {
        let mut s = ParamStore::new(42, Precision::F32);
        let w = s.weight("w", 4, 3).unwrap();
        let mut g = Graph::new(&s);
        let x = g.matrix(2, 4, vec![0.1, 0.2, 0.3, 0.4, -1.0, 0.5, 0.0, 2.0]).unwrap();
        let wv = g.param(w);
        let y = g.matmul(x, wv).unwrap();
        let y = g.softmax_rows(y).unwrap();
        g.data(y).to_vec()
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(xs in prop::collection::vec(-1e4f64..1e4, 1..12)) {
        let n = xs.len();
        let s = softmax(&Tensor::new(vec![n], xs).unwrap(), 0).unwrap();
        prop_assert!(s.data().iter().all(|&v| v >= 0.0));
        prop_assert!((s.data().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn linear_is_additive(
        x1 in prop::collection::vec(-10f64..10.0, 6),
        x2 in prop::collection::vec(-10f64..10.0, 6),
        w in prop::collection::vec(-2f64..2.0, 6),
        b in prop::collection::vec(-2f64..2.0, 2),
    ) {
        let t = |v: Vec<f64>| Tensor::matrix(2, 3, v).unwrap();
        let wt = Tensor::matrix(3, 2, w).unwrap();
        let bt = Tensor::new(vec![2], b.clone()).unwrap();
        let sum: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a + b).collect();
        let lhs = linear(&t(sum), &wt, Some(&bt)).unwrap();
        let a = linear(&t(x1), &wt, Some(&bt)).unwrap();
        let c = linear(&t(x2), &wt, Some(&bt)).unwrap();
        for i in 0..4 {
            let rhs = a.data()[i] + c.data()[i] - b[i % 2];
            prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-5);
        }
    }

    #[test]
    fn clipping_is_idempotent(g in prop::collection::vec(-20f64..20.0, 1..10), max in 0.1f64..10.0) {
        let mut s = ParamStore::new(0, Precision::F64);
        let n = g.len();
        let id = s.insert("w", Tensor::zeros(&[n]), true).unwrap();
        s.get_mut(id).grad = Some(Tensor::new(vec![n], g).unwrap());
        clip_global_norm(&mut s, max);
        let once = s.get(id).grad.clone().unwrap();
        prop_assert!(once.l2_norm() <= max + 1e-6);
        clip_global_norm(&mut s, max);
        let twice = s.get(id).grad.clone().unwrap();
        prop_assert!(once.max_abs_diff(&twice) <= 1e-12);
    }
}
