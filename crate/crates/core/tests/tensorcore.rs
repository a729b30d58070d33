use dope::tensor::{
    self, finite_diff_check, nn, FeatureMatrix, GateParams, GradCheckOptions, LinearParams, MhaParams, ParamBuilder,
    ParamStore,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> FeatureMatrix {
    FeatureMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Plain triple loop, independent of `FeatureMatrix::matmul`.
fn matmul_oracle(a: &FeatureMatrix, b: &FeatureMatrix) -> Vec<Vec<f64>> {
    (0..a.rows())
        .map(|i| (0..b.cols()).map(|j| (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()).collect())
        .collect()
}

fn linear_oracle(x: &FeatureMatrix, w: &FeatureMatrix, b: &FeatureMatrix) -> Vec<Vec<f64>> {
    let mut out = matmul_oracle(x, w);
    for row in &mut out {
        for (j, v) in row.iter_mut().enumerate() {
            *v += b.get(0, j);
        }
    }
    out
}

/// Loop-based multi-head attention written directly from the definition.
fn attention_oracle(store: &ParamStore, q_in: &FeatureMatrix, kv_in: &FeatureMatrix, p: &MhaParams) -> Vec<Vec<f64>> {
    let proj = |x: &FeatureMatrix, l: &LinearParams| linear_oracle(x, store.get(l.w), store.get(l.b));
    let q = proj(q_in, &p.query);
    let k = proj(kv_in, &p.key);
    let v = proj(kv_in, &p.value);
    let d = p.dim();
    let dh = d / p.heads;
    let mut concat = vec![vec![0.0; d]; q.len()];
    for h in 0..p.heads {
        for i in 0..q.len() {
            let logits: Vec<f64> = (0..k.len())
                .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                concat[i][h * dh + c] = (0..k.len()).map(|j| e[j] / z * v[j][h * dh + c]).sum();
            }
        }
    }
    let concat = FeatureMatrix::from_rows(&concat).unwrap();
    proj(&concat, &p.output)
}

fn max_diff(a: &FeatureMatrix, b: &[Vec<f64>]) -> f64 {
    let mut m: f64 = 0.0;
    for (i, row) in b.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m = m.max((a.get(i, j) - v).abs());
        }
    }
    m
}

fn set_linear(store: &mut ParamStore, l: &LinearParams, w: FeatureMatrix, b: FeatureMatrix) {
    store.set(l.w, w).unwrap();
    store.set(l.b, b).unwrap();
}

#[test]
fn linear_identity_and_zero_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let bias = random_matrix(&mut rng, 1, 4);
    let p = LinearParams::from_values(&mut store, "l", FeatureMatrix::identity(4), FeatureMatrix::zeros(1, 4)).unwrap();
    let x = random_matrix(&mut rng, 3, 4);
    assert_eq!(tensor::linear(&store, &x, &p).unwrap(), x);

    store.set(p.b, bias.clone()).unwrap();
    let y = tensor::linear(&store, &FeatureMatrix::zeros(3, 4), &p).unwrap();
    for r in 0..3 {
        assert_eq!(y.row(r), bias.row(0));
    }
}

#[test]
fn linear_matches_hand_multiplication() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let (w, b) = (random_matrix(&mut rng, 4, 2), random_matrix(&mut rng, 1, 2));
    let p = LinearParams::from_values(&mut store, "l", w.clone(), b.clone()).unwrap();
    let x = random_matrix(&mut rng, 3, 4);
    let y = tensor::linear(&store, &x, &p).unwrap();
    assert!(max_diff(&y, &linear_oracle(&x, &w, &b)) < 1e-14);
    assert!(tensor::linear(&store, &random_matrix(&mut rng, 3, 3), &p).is_err());
}

#[test]
fn softmax_examples() {
    let uniform = tensor::softmax_rows(&FeatureMatrix::filled(1, 5, 2.5));
    assert!(uniform.data().iter().all(|v| (v - 0.2).abs() < 1e-15));

    let p = tensor::softmax_rows(&FeatureMatrix::row_vector(vec![0.0, 3f64.ln()]));
    assert!((p.get(0, 0) - 0.25).abs() < 1e-15);
    assert!((p.get(0, 1) - 0.75).abs() < 1e-15);

    let base = FeatureMatrix::row_vector(vec![0.3, -1.2, 2.0]);
    let shifted = base.map(|v| v + 1000.0);
    assert!(tensor::softmax_rows(&base).max_abs_diff(&tensor::softmax_rows(&shifted)) < 1e-12);
}

fn mha(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize, heads: usize) -> MhaParams {
    ParamBuilder::new(store, rng).mha("mha", d, heads).unwrap()
}

#[test]
fn single_key_attention_returns_its_value_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let p = mha(&mut store, &mut rng, 8, 2);
    set_linear(&mut store, &p.value, FeatureMatrix::identity(8), FeatureMatrix::zeros(1, 8));
    set_linear(&mut store, &p.output, FeatureMatrix::identity(8), FeatureMatrix::zeros(1, 8));
    let q = random_matrix(&mut rng, 4, 8);
    let kv = random_matrix(&mut rng, 1, 8);
    let out = tensor::attention(&store, &q, &kv, &p, None).unwrap();
    for r in 0..4 {
        for c in 0..8 {
            assert!((out.get(r, c) - kv.get(0, c)).abs() < 1e-14);
        }
    }
}

#[test]
fn zero_query_key_weights_give_mean_of_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let p = mha(&mut store, &mut rng, 8, 2);
    set_linear(&mut store, &p.query, FeatureMatrix::zeros(8, 8), random_matrix(&mut rng, 1, 8));
    set_linear(&mut store, &p.key, FeatureMatrix::zeros(8, 8), random_matrix(&mut rng, 1, 8));
    set_linear(&mut store, &p.output, FeatureMatrix::identity(8), FeatureMatrix::zeros(1, 8));
    let q = random_matrix(&mut rng, 3, 8);
    let kv = random_matrix(&mut rng, 5, 8);
    let out = tensor::attention(&store, &q, &kv, &p, None).unwrap();
    let values = tensor::linear(&store, &kv, &p.value).unwrap();
    let mean = values.mean_rows();
    for r in 0..3 {
        for c in 0..8 {
            assert!((out.get(r, c) - mean.get(0, c)).abs() < 1e-14);
        }
    }
}

#[test]
fn attention_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let mut store = ParamStore::new();
        let p = mha(&mut store, &mut rng, 8, 2);
        let q = random_matrix(&mut rng, 4, 8);
        let kv = random_matrix(&mut rng, 4, 8);
        let out = tensor::attention(&store, &q, &kv, &p, None).unwrap();
        assert!(max_diff(&out, &attention_oracle(&store, &q, &kv, &p)) < 1e-12);
    }
}

#[test]
fn attention_shape_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let p = mha(&mut store, &mut rng, 8, 2);
    let q = random_matrix(&mut rng, 2, 8);
    assert!(tensor::attention(&store, &q, &random_matrix(&mut rng, 2, 6), &p, None).is_err());
    let mut bad = p;
    bad.heads = 3;
    assert!(matches!(
        tensor::attention(&store, &q, &q, &bad, None),
        Err(dope::Error::HeadsNotDivisible { .. })
    ));
}

#[test]
fn masked_keys_get_no_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let p = mha(&mut store, &mut rng, 8, 2);
    let q = random_matrix(&mut rng, 3, 8);
    let kv = random_matrix(&mut rng, 4, 8);
    let masked = tensor::attention(&store, &q, &kv, &p, Some(&[true, false, true, false])).unwrap();
    let kept = FeatureMatrix::from_rows(&[kv.row(0).to_vec(), kv.row(2).to_vec()]).unwrap();
    let direct = tensor::attention(&store, &q, &kept, &p, None).unwrap();
    assert!(masked.max_abs_diff(&direct) < 1e-14);
}

#[test]
fn ffn_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let p = ParamBuilder::new(&mut store, &mut rng).ffn("ffn", 4, 6, 3);
    let x = random_matrix(&mut rng, 5, 4);

    // composition oracle
    let h: Vec<Vec<f64>> = linear_oracle(&x, store.get(p.hidden.w), store.get(p.hidden.b))
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    let h = FeatureMatrix::from_rows(&h).unwrap();
    let expected = linear_oracle(&h, store.get(p.out.w), store.get(p.out.b));
    assert!(max_diff(&tensor::ffn(&store, &x, &p).unwrap(), &expected) < 1e-14);

    // negative pre-activations everywhere
    let b2 = store.get(p.out.b).clone();
    let mut killed = store.clone();
    killed.set(p.hidden.b, FeatureMatrix::filled(1, 6, -100.0)).unwrap();
    let y = tensor::ffn(&killed, &x, &p).unwrap();
    for r in 0..5 {
        assert_eq!(y.row(r), b2.row(0));
    }

    // zero weights
    let mut zero = store.clone();
    zero.set(p.hidden.w, FeatureMatrix::zeros(4, 6)).unwrap();
    zero.set(p.out.w, FeatureMatrix::zeros(6, 3)).unwrap();
    let y = tensor::ffn(&zero, &x, &p).unwrap();
    for r in 0..5 {
        assert_eq!(y.row(r), b2.row(0));
    }
}

fn gate(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize) -> GateParams {
    ParamBuilder::new(store, rng).gate("gate", d)
}

#[test]
fn zero_gate_averages() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let g = gate(&mut store, &mut rng, 4);
    store.set(g.w_g, FeatureMatrix::zeros(4, 4)).unwrap();
    store.set(g.w_c, FeatureMatrix::zeros(4, 4)).unwrap();
    store.set(g.bias, FeatureMatrix::zeros(1, 4)).unwrap();
    let a = random_matrix(&mut rng, 2, 4);
    let b = random_matrix(&mut rng, 2, 4);
    let (out, omega) = tensor::sigmoid_gate(&store, &a, &b, &g).unwrap();
    assert!(omega.data().iter().all(|&w| w == 0.5));
    let avg = a.zip_map(&b, |x, y| (x + y) / 2.0);
    assert!(out.max_abs_diff(&avg) < 1e-15);
}

#[test]
fn gate_of_equal_inputs_is_that_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let g = gate(&mut store, &mut rng, 4);
    let a = random_matrix(&mut rng, 3, 4);
    let (out, _) = tensor::sigmoid_gate(&store, &a, &a, &g).unwrap();
    assert_eq!(out, a);
    assert!(tensor::sigmoid_gate(&store, &a, &random_matrix(&mut rng, 2, 4), &g).is_err());
}

#[test]
fn dropout_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_matrix(&mut rng, 10, 10);
    assert_eq!(tensor::dropout(&x, 0.0, &mut rng, true).unwrap(), x);
    assert_eq!(tensor::dropout(&x, 0.7, &mut rng, false).unwrap(), x);
    assert!(matches!(tensor::dropout(&x, 1.0, &mut rng, true), Err(dope::Error::InvalidDropout(_))));

    let ones = FeatureMatrix::filled(100, 1000, 1.0);
    let y = tensor::dropout(&ones, 0.7, &mut rng, true).unwrap();
    let zeros = y.data().iter().filter(|&&v| v == 0.0).count();
    let frac = zeros as f64 / 1e5;
    assert!((frac - 0.7).abs() < 0.01, "zero fraction {frac}");
    let survivor = y.data().iter().find(|&&v| v != 0.0).unwrap();
    assert!((survivor - 1.0 / 0.3).abs() < 1e-12);
}

fn check(store: &ParamStore, f: impl Fn(&mut tensor::Tape) -> dope::Result<tensor::Var>) -> f64 {
    let report = finite_diff_check(store, &GradCheckOptions::default(), f).unwrap();
    assert!(report.checked > 0);
    report.max_relative_error
}

/// Reduces a matrix output to a scalar with fixed random weights so every
/// entry contributes a distinct sensitivity.
fn weighted_sum(t: &mut tensor::Tape, y: tensor::Var, seed: u64) -> dope::Result<tensor::Var> {
    let (r, c) = t.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_matrix(&mut rng, r, c);
    let m = t.mul_const(y, w)?;
    Ok(t.sum_all(m))
}

#[test]
fn gradients_of_layers_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let x = store.insert("x", random_matrix(&mut rng, 4, 8));
    let kv = store.insert("kv", random_matrix(&mut rng, 3, 8));
    let (lin, att, ff, g) = {
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        (b.linear("lin", 8, 8), b.mha("att", 8, 2).unwrap(), b.ffn("ffn", 8, 16, 8), b.gate("gate", 8))
    };

    let err = check(&store, |t| {
        let xv = t.param(x);
        let y = nn::linear(t, xv, &lin)?;
        weighted_sum(t, y, 1)
    });
    assert!(err < 1e-4, "linear {err}");

    let err = check(&store, |t| {
        let xv = t.param(x);
        let y = t.softmax_rows(xv, None)?;
        weighted_sum(t, y, 2)
    });
    assert!(err < 1e-4, "softmax {err}");

    let err = check(&store, |t| {
        let (q, k) = (t.param(x), t.param(kv));
        let y = nn::attention(t, q, k, &att, None)?;
        weighted_sum(t, y, 3)
    });
    assert!(err < 1e-4, "attention {err}");

    let err = check(&store, |t| {
        let xv = t.param(x);
        let y = nn::ffn(t, xv, &ff)?;
        weighted_sum(t, y, 4)
    });
    assert!(err < 1e-4, "ffn {err}");

    let err = check(&store, |t| {
        let a = t.param(x);
        let b = nn::linear(t, a, &lin)?;
        let (y, _) = nn::sigmoid_gate(t, a, b, &g)?;
        weighted_sum(t, y, 5)
    });
    assert!(err < 1e-4, "sigmoid_gate {err}");
}

#[test]
fn sigmoid_gate_gradient_on_2x4() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let a = store.insert("a", random_matrix(&mut rng, 2, 4));
    let b = store.insert("b", random_matrix(&mut rng, 2, 4));
    let g = gate(&mut store, &mut rng, 4);
    let err = check(&store, |t| {
        let (av, bv) = (t.param(a), t.param(b));
        let (y, _) = nn::sigmoid_gate(t, av, bv, &g)?;
        weighted_sum(t, y, 6)
    });
    assert!(err < 1e-4, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-50.0f64..50.0, 1..40), cols in 1usize..8) {
        let rows = vals.len() / cols;
        prop_assume!(rows > 0);
        let x = FeatureMatrix::from_vec(rows, cols, vals[..rows * cols].to_vec()).unwrap();
        let p = tensor::softmax_rows(&x);
        for r in 0..rows {
            let s: f64 = p.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(p.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn gate_output_within_input_bounds(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let g = gate(&mut store, &mut rng, 4);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 3, 4);
        let (out, omega) = tensor::sigmoid_gate(&store, &a, &b, &g).unwrap();
        for i in 0..out.data().len() {
            let (lo, hi) = (a.data()[i].min(b.data()[i]), a.data()[i].max(b.data()[i]));
            prop_assert!(out.data()[i] >= lo && out.data()[i] <= hi);
            prop_assert!(omega.data()[i] > 0.0 && omega.data()[i] < 1.0);
        }
    }

    #[test]
    fn attention_invariant_to_key_bias_shift(seed in 0u64..10_000, shift in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = mha(&mut store, &mut rng, 8, 2);
        let q = random_matrix(&mut rng, 3, 8);
        let kv = random_matrix(&mut rng, 4, 8);
        let before = tensor::attention(&store, &q, &kv, &p, None).unwrap();
        let shifted = store.get(p.key.b).map(|v| v + shift);
        store.set(p.key.b, shifted).unwrap();
        let after = tensor::attention(&store, &q, &kv, &p, None).unwrap();
        prop_assert!(before.max_abs_diff(&after) < 1e-10);
    }
}
