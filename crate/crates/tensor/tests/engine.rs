use std::cell::Cell;
use std::rc::Rc;

use mmsc_tensor::{finite_diff_check, Activation, ParamStore, Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn triple_loop(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn mat(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

#[test]
fn matmul_identity_and_projector() {
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::identity(2));
    let x = tape.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let y = tape.matmul(i, x).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let p = tape.constant(mat(&[vec![1.0, 0.0], vec![0.0, 0.0]]));
    let z = tape.constant(mat(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
    let y = tape.matmul(p, z).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 4, 2);
        let expected = triple_loop(&a.to_rows(), &b.to_rows());
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a), tape.constant(b));
        let got = tape.matmul(va, vb).unwrap();
        for (r, row) in expected.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!((tape.value(got).get(r, c) - v).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::Dimension {
            op: "matmul",
            left: vec![2, 3],
            right: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(mat(&[vec![0.0, 0.0], vec![1.0, 1.0]]));
    let y = tape.softmax_rows(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);

    for c in [-700.0, 0.0, 3.5, 900.0] {
        let x = tape.constant(mat(&[vec![c, c, c]]));
        let y = tape.softmax_rows(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    // Reference from a 40-digit evaluation of exp(k) / (e + e² + e³).
    let reference = [
        0.090_030_573_170_380_457_998_022_101_484_491_797_867_931_92,
        0.244_728_471_054_797_652_472_959_618_340_762_797_199_300_5,
        0.665_240_955_774_821_889_529_018_280_174_745_404_932_763_3,
    ];
    let x = tape.constant(mat(&[vec![1.0, 2.0, 3.0]]));
    let y = tape.softmax_rows(x).unwrap();
    for (got, want) in tape.value(y).data().iter().zip(reference) {
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }
}

#[test]
fn activation_fixed_points() {
    let mut tape = Tape::new();
    let zero = tape.constant(Tensor::scalar(0.0).unwrap());
    for (kind, want) in [
        (Activation::Sigmoid, 0.5),
        (Activation::Tanh, 0.0),
        (Activation::Elu, 0.0),
        (Activation::LeakyRelu, 0.0),
    ] {
        let y = tape.activation(kind, zero).unwrap();
        assert_eq!(tape.value(y).data(), &[want]);
    }
    let neg = tape.constant(Tensor::scalar(-2.0).unwrap());
    let y = tape.activation(Activation::LeakyRelu, neg).unwrap();
    assert!((tape.value(y).data()[0] + 0.02).abs() < 1e-16);
    let y = tape.activation(Activation::Elu, neg).unwrap();
    assert!((tape.value(y).data()[0] - ((-2.0f64).exp() - 1.0)).abs() < 1e-15);
}

#[test]
fn cosine_sim_examples_and_zero_norm() {
    let mut tape = Tape::new();
    let mut cos = |u: Vec<f64>, v: Vec<f64>| -> Result<f64, TensorError> {
        let a = tape.constant(Tensor::vector(u)?);
        let b = tape.constant(Tensor::vector(v)?);
        let c = tape.cosine_sim(a, b)?;
        Ok(tape.value(c).data()[0])
    };
    assert_eq!(cos(vec![1.0, 0.0], vec![0.0, 1.0]).unwrap(), 0.0);
    assert!((cos(vec![2.0, 2.0], vec![1.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
    assert!((cos(vec![1.0, 0.0], vec![1.0, 1.0]).unwrap() - 0.707_106_781_186_547_5).abs() < 1e-15);
    assert!(matches!(
        cos(vec![0.0, 0.0], vec![1.0, 1.0]),
        Err(TensorError::Degenerate { .. })
    ));
}

#[test]
fn backward_constant_and_linear_cases() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::matrix(2, 3, vec![0.5; 6]).unwrap()).unwrap();
    store.insert("unused", Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();

    let mut tape = Tape::new();
    let _w = tape.param(&store, "w").unwrap();
    let _u = tape.param(&store, "unused").unwrap();
    let c = tape.constant(Tensor::scalar(4.2).unwrap());
    let g = tape.backward(c).unwrap();
    assert!(g.get("w").unwrap().data().iter().all(|v| *v == 0.0));
    assert!(g.get("unused").unwrap().data().iter().all(|v| *v == 0.0));

    let mut tape = Tape::new();
    let w = tape.param(&store, "w").unwrap();
    let _u = tape.param(&store, "unused").unwrap();
    let s = tape.sum(w).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get("w").unwrap().data(), &[1.0; 6]);
    assert_eq!(g.get("unused").unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_foreign_and_non_scalar_loss() {
    let mut a = Tape::new();
    let b = Tape::new();
    let x = a.constant(Tensor::scalar(1.0).unwrap());
    assert!(matches!(b.backward(x), Err(TensorError::Usage(_))));
    let v = a.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
    assert!(matches!(a.backward(v), Err(TensorError::Usage(_))));
}

#[test]
fn finite_diff_quadratic_is_exact() {
    let mut store = ParamStore::new();
    store
        .insert("w", Tensor::matrix(2, 3, vec![0.3, -0.7, 1.1, 0.05, -0.4, 0.9]).unwrap())
        .unwrap();
    let report = finite_diff_check(
        |p, tape| {
            let w = tape.param(p, "w")?;
            let sq = tape.mul(w, w)?;
            tape.sum(sq)
        },
        &store,
        1e-5,
    )
    .unwrap();
    assert_eq!(report.checked, 6);
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn finite_diff_detects_non_determinism() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::vector(vec![1.0]).unwrap()).unwrap();
    let counter = Cell::new(0.0);
    let err = finite_diff_check(
        |p, tape| {
            counter.set(counter.get() + 1.0);
            let w = tape.param(p, "w")?;
            tape.add_scalar(w, counter.get())
        },
        &store,
        1e-5,
    )
    .unwrap_err();
    assert!(matches!(err, TensorError::NonDeterministic { .. }));
}

fn triplet(tape: &mut Tape, p: &ParamStore, margin: f64) -> Result<Var, TensorError> {
    let a = tape.param(p, "anchor")?;
    let pos = tape.param(p, "pos")?;
    let neg = tape.param(p, "neg")?;
    let sp = tape.cosine_rows(a, pos)?;
    let sn = tape.cosine_rows(a, neg)?;
    let d = tape.sub(sn, sp)?;
    let h = tape.add_scalar(d, margin)?;
    let h = tape.relu(h)?;
    tape.sum(h)
}

#[test]
fn finite_diff_triplet_away_from_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    for name in ["anchor", "pos", "neg"] {
        store.insert(name, random_matrix(&mut rng, 3, 5)).unwrap();
    }
    // A large margin keeps every hinge active.
    let report = finite_diff_check(|p, t| triplet(t, p, 3.0), &store, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

fn info_nce(tape: &mut Tape, p: &ParamStore, tau: f64) -> Result<Var, TensorError> {
    let a = tape.param(p, "anchors")?;
    let b = tape.param(p, "positives")?;
    let n = tape.value(a).rows();
    let an = tape.reshape(a, tape.value(a).shape().to_vec())?;
    let pos = tape.cosine_rows(an, b)?;
    let pos_col = tape.reshape(pos, vec![n, 1])?;
    // Normalised anchor rows give the pairwise cosine matrix.
    let mut rows = Vec::new();
    for i in 0..n {
        let ai = tape.gather_rows(a, Rc::from(vec![i; n]))?;
        let c = tape.cosine_rows(ai, a)?;
        rows.push(tape.reshape(c, vec![1, n])?);
    }
    let mut cos = rows[0];
    for r in &rows[1..] {
        let t = tape.transpose(cos)?;
        let rt = tape.transpose(*r)?;
        let joined = tape.concat_cols(&[t, rt])?;
        cos = tape.transpose(joined)?;
    }
    let logits = tape.concat_cols(&[pos_col, cos])?;
    let logits = tape.scale(logits, 1.0 / tau)?;
    let mut mask = Vec::new();
    for i in 0..n {
        mask.push(true);
        for j in 0..n {
            mask.push(i != j);
        }
    }
    let lse = tape.logsumexp_rows_masked(logits, Rc::from(mask))?;
    let pos_scaled = tape.scale(pos, 1.0 / tau)?;
    let per = tape.sub(lse, pos_scaled)?;
    tape.mean(per)
}

#[test]
fn finite_diff_info_nce_batch_of_four() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    store.insert("anchors", random_matrix(&mut rng, 4, 6)).unwrap();
    store.insert("positives", random_matrix(&mut rng, 4, 6)).unwrap();
    let report = finite_diff_check(|p, t| info_nce(t, p, 0.5), &store, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

/// Resamples until every entry is at least `gap` away from zero.
fn away_from_kinks(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gap: f64) -> Tensor {
    loop {
        let t = random_matrix(rng, rows, cols);
        if t.data().iter().all(|v| v.abs() >= gap) {
            return t;
        }
    }
}

type Build = fn(&mut Tape, &ParamStore) -> Result<Var, TensorError>;

fn weighted_sum(tape: &mut Tape, v: Var) -> Result<Var, TensorError> {
    // Fixed non-uniform weights so that each output coordinate matters differently.
    let shape = tape.value(v).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| 0.3 + 0.17 * i as f64).collect())?;
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

#[test]
fn every_primitive_matches_finite_differences() {
    let cases: Vec<(&str, Build)> = vec![
        ("matmul", |t, p| {
            let (a, b) = (t.param(p, "a")?, t.param(p, "b")?);
            let bt = t.transpose(b)?;
            let y = t.matmul(a, bt)?;
            weighted_sum(t, y)
        }),
        ("add_sub_mul", |t, p| {
            let (a, b) = (t.param(p, "a")?, t.param(p, "b")?);
            let s = t.add(a, b)?;
            let d = t.sub(a, b)?;
            let y = t.mul(s, d)?;
            let y = t.scale(y, -1.5)?;
            weighted_sum(t, y)
        }),
        ("add_row", |t, p| {
            let (a, v) = (t.param(p, "a")?, t.param(p, "v")?);
            let at = t.transpose(a)?;
            let y = t.add_row(at, v)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y)
        }),
        ("activations", |t, p| {
            let a = t.param(p, "a")?;
            let mut parts = Vec::new();
            for kind in [Activation::LeakyRelu, Activation::Elu, Activation::Tanh, Activation::Sigmoid] {
                parts.push(t.activation(kind, a)?);
            }
            let y = t.concat_cols(&parts)?;
            weighted_sum(t, y)
        }),
        ("relu", |t, p| {
            let a = t.param(p, "a")?;
            let y = t.relu(a)?;
            weighted_sum(t, y)
        }),
        ("softmax_rows", |t, p| {
            let a = t.param(p, "a")?;
            let y = t.softmax_rows(a)?;
            weighted_sum(t, y)
        }),
        ("gather_segment", |t, p| {
            let a = t.param(p, "a")?;
            let g = t.gather_rows(a, Rc::from(vec![2, 0, 0, 1, 2]))?;
            let s = t.segment_sum(g, Rc::from(vec![0, 2, 2, 5]))?;
            let s = t.mul(s, s)?;
            weighted_sum(t, s)
        }),
        ("segment_softmax_scale_rows", |t, p| {
            let (a, v) = (t.param(p, "a")?, t.param(p, "v")?);
            let w = t.segment_softmax(v, Rc::from(vec![0, 1, 3]))?;
            let y = t.scale_rows(a, w)?;
            weighted_sum(t, y)
        }),
        ("cosine_rows", |t, p| {
            let (a, b) = (t.param(p, "a")?, t.param(p, "b")?);
            let y = t.cosine_rows(a, b)?;
            weighted_sum(t, y)
        }),
        ("logsumexp_masked", |t, p| {
            let a = t.param(p, "a")?;
            let mask: Vec<bool> = (0..12).map(|i| i % 4 != 1).collect();
            let y = t.logsumexp_rows_masked(a, Rc::from(mask))?;
            weighted_sum(t, y)
        }),
        ("gate_mix", |t, p| {
            let (a, b, c) = (t.param(p, "a")?, t.param(p, "b")?, t.param(p, "c")?);
            let g = t.activation(Activation::Sigmoid, c)?;
            let y = t.gate_mix(g, a, b)?;
            weighted_sum(t, y)
        }),
        ("block_attention", |t, p| {
            let (a, b, c) = (t.param(p, "a")?, t.param(p, "b")?, t.param(p, "c")?);
            let y = t.block_attention(a, b, c, 3, 0.7)?;
            weighted_sum(t, y)
        }),
        ("mean_reshape", |t, p| {
            let a = t.param(p, "a")?;
            let r = t.reshape(a, vec![12])?;
            let r = t.mul(r, r)?;
            t.mean(r)
        }),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for (name, build) in cases {
        for _ in 0..5 {
            let mut store = ParamStore::new();
            store.insert("a", away_from_kinks(&mut rng, 3, 4, 1e-3)).unwrap();
            store.insert("b", away_from_kinks(&mut rng, 3, 4, 1e-3)).unwrap();
            store.insert("c", away_from_kinks(&mut rng, 3, 4, 1e-3)).unwrap();
            store
                .insert("v", Tensor::vector((0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
                .unwrap();
            let report = finite_diff_check(|p, t| build(t, p), &store, 1e-5).unwrap();
            assert!(report.checked > 0, "{name}: nothing checked");
            assert!(report.max_rel_error < 1e-4, "{name}: {report:?}");
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 5), 1..6)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&rows).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        let out = tape.value(y);
        for r in 0..out.rows() {
            let row = out.row(r);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_is_scale_invariant(
        u in prop::collection::vec(-5.0f64..5.0, 4),
        v in prop::collection::vec(-5.0f64..5.0, 4),
        alpha in 1e-3f64..1e3,
        beta in 1e-3f64..1e3,
    ) {
        prop_assume!(mmsc_tensor::norm(&u) > 1e-3 && mmsc_tensor::norm(&v) > 1e-3);
        let base = mmsc_tensor::cosine(&u, &v).unwrap();
        let su: Vec<f64> = u.iter().map(|x| x * alpha).collect();
        let sv: Vec<f64> = v.iter().map(|x| x * beta).collect();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(su).unwrap());
        let b = tape.constant(Tensor::vector(sv).unwrap());
        let c = tape.cosine_sim(a, b).unwrap();
        prop_assert!((tape.value(c).data()[0] - base).abs() < 1e-12);
    }

    #[test]
    fn adam_with_zero_gradient_is_identity(data in prop::collection::vec(-10.0f64..10.0, 1..8), lr in 1e-5f64..1.0) {
        let mut store = ParamStore::new();
        let t = Tensor::vector(data.clone()).unwrap();
        store.insert("w", t.clone()).unwrap();
        let mut tape = Tape::new();
        let _ = tape.param(&store, "w").unwrap();
        let c = tape.constant(Tensor::scalar(0.0).unwrap());
        let g = tape.backward(c).unwrap();
        store.adam_step(&g, lr).unwrap();
        prop_assert_eq!(store.value("w").unwrap(), &t);
    }
}
