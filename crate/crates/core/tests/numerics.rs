use collabqa::numerics::{
    decode, encode, encode_sequences, grad_check, Activation, BiLstmNames, GradCheckConfig, Gradients, LstmNames,
    NumericsError, OptimizerConfig, ParameterStore, Tape, Tensor, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn affine_identity_and_hand_case() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let w = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let b = tape.constant(Tensor::vector(vec![0.0, 0.0]));
    let y = tape.affine(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

    let x = tape.constant(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
    let w = tape.constant(Tensor::from_rows(&[vec![2.0], vec![3.0]]).unwrap());
    let b = tape.constant(Tensor::vector(vec![1.0]));
    let y = tape.affine(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[6.0]);
}

#[test]
fn affine_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xv = rand_matrix(&mut rng, 3, 4);
    let wv = rand_matrix(&mut rng, 4, 2);
    let bv = Tensor::vector(vec![0.25, -0.5]);
    let mut expected = vec![0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            let mut acc = bv.data()[j];
            for k in 0..4 {
                acc += xv.get(i, k) * wv.get(k, j);
            }
            expected[i * 2 + j] = acc;
        }
    }
    let mut tape = Tape::new();
    let (x, w, b) = (tape.constant(xv), tape.constant(wv), tape.constant(bv));
    let y = tape.affine(x, w, b).unwrap();
    for (a, e) in tape.value(y).data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn affine_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3]));
    let w = tape.constant(Tensor::zeros(&[4, 5]));
    let b = tape.constant(Tensor::zeros(&[5]));
    let err = tape.affine(x, w, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn activations_at_reference_points() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let r = tape.activation(x, Activation::Relu);
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = tape.constant(Tensor::vector(vec![0.0]));
    let t = tape.activation(z, Activation::Tanh);
    let s = tape.activation(z, Activation::Sigmoid);
    assert_eq!(tape.value(t).data(), &[0.0]);
    assert_eq!(tape.value(s).data(), &[0.5]);
    assert!("softplus".parse::<Activation>().is_err());
}

#[test]
fn softmax_cross_entropy_reference_cases() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap());
    let (loss, probs) = tape.softmax_cross_entropy(l, &[0]).unwrap();
    assert!((tape.value(loss).data()[0] - 3f64.ln()).abs() < 1e-15);
    assert!((probs.sum() - 1.0).abs() < 1e-12);

    let l = tape.constant(Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap());
    let (loss, probs) = tape.softmax_cross_entropy(l, &[0]).unwrap();
    let v = tape.value(loss).data()[0];
    assert!(v.is_finite() && v.abs() < 1e-300 + 1e-12);
    assert!(probs.all_finite());

    let l = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    assert!(matches!(tape.softmax_cross_entropy(l, &[2]), Err(NumericsError::InvalidArgument(_))));
}

#[test]
fn softmax_cross_entropy_matches_high_precision_value() {
    // Reference computed with 50-digit arithmetic (mpmath) and frozen here.
    let logits = Tensor::from_rows(&[
        vec![0.37, -1.25, 2.5, 0.0, -0.66],
        vec![3.1, 3.05, -2.2, 0.4, 1.7],
        vec![-0.9, -0.1, 0.25, -3.3, 0.8],
        vec![12.0, -7.5, 0.003, 4.4, -0.25],
    ])
    .unwrap();
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let (loss, probs) = tape.softmax_cross_entropy(l, &[2, 1, 4, 0]).unwrap();
    let expected = 0.471_861_180_855_550_004_537_587_389_406;
    assert!((tape.value(loss).data()[0] - expected).abs() < 1e-10);
    for r in 0..4 {
        assert!((probs.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

fn lstm_store(rng: &mut ChaCha8Rng, din: usize, h: usize, zero_bias: bool) -> ParameterStore {
    let mut store = ParameterStore::new();
    store.insert("wx", rand_matrix(rng, din, 4 * h)).unwrap();
    store.insert("wh", rand_matrix(rng, h, 4 * h)).unwrap();
    let b = if zero_bias {
        Tensor::zeros(&[4 * h])
    } else {
        Tensor::vector((0..4 * h).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    store.insert("b", b).unwrap();
    store
}

fn lstm_once(store: &ParameterStore, x: Tensor, state: Tensor) -> Tensor {
    let mut tape = Tape::new();
    let params = collabqa::numerics::LstmParams {
        w_input: tape.param(store, "wx").unwrap(),
        w_hidden: tape.param(store, "wh").unwrap(),
        bias: tape.param(store, "b").unwrap(),
    };
    let x = tape.constant(x);
    let s = tape.constant(state);
    let out = tape.lstm_step(x, s, params, None).unwrap();
    tape.value(out).clone()
}

#[test]
fn lstm_zero_parameters_give_zero_state() {
    let mut store = ParameterStore::new();
    store.insert("wx", Tensor::zeros(&[3, 8])).unwrap();
    store.insert("wh", Tensor::zeros(&[2, 8])).unwrap();
    store.insert("b", Tensor::zeros(&[8])).unwrap();
    let out = lstm_once(&store, Tensor::row(vec![0.3, -2.0, 5.0]), Tensor::zeros(&[1, 4]));
    assert!(out.data().iter().all(|v| *v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = lstm_store(&mut rng, 3, 2, true);
    let out = lstm_once(&store, Tensor::zeros(&[1, 3]), Tensor::zeros(&[1, 4]));
    assert!(out.data()[2..].iter().all(|v| *v == 0.0), "cell must stay zero");
}

/// Scalar re-derivation of one cell step, written independently of the tape.
fn lstm_scalar_oracle(store: &ParameterStore, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let wx = store.get("wx").unwrap();
    let wh = store.get("wh").unwrap();
    let b = store.get("b").unwrap().data();
    let hd = h.len();
    let pre = |gate: usize, j: usize| {
        let col = gate * hd + j;
        let mut acc = b[col];
        for (k, xv) in x.iter().enumerate() {
            acc += xv * wx.get(k, col);
        }
        for (k, hv) in h.iter().enumerate() {
            acc += hv * wh.get(k, col);
        }
        acc
    };
    let mut h2 = vec![0.0; hd];
    let mut c2 = vec![0.0; hd];
    for j in 0..hd {
        let i = sigmoid(pre(0, j));
        let f = sigmoid(pre(1, j));
        let g = pre(2, j).tanh();
        let o = sigmoid(pre(3, j));
        c2[j] = f * c[j] + i * g;
        h2[j] = o * c2[j].tanh();
    }
    (h2, c2)
}

#[test]
fn lstm_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let store = lstm_store(&mut rng, 5, 4, false);
    let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let h: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let c: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut state = h.clone();
    state.extend(&c);
    let out = lstm_once(&store, Tensor::row(x.clone()), Tensor::row(state));
    let (h2, c2) = lstm_scalar_oracle(&store, &x, &h, &c);
    for j in 0..4 {
        assert!((out.data()[j] - h2[j]).abs() < 1e-12);
        assert!((out.data()[4 + j] - c2[j]).abs() < 1e-12);
    }
}

#[test]
fn backward_of_sum_is_all_ones() {
    let mut store = ParameterStore::new();
    store.insert("w", Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap()).unwrap();
    store.insert("unused", Tensor::vector(vec![1.0, 2.0])).unwrap();
    let mut tape = Tape::new();
    let w = tape.param(&store, "w").unwrap();
    let _ = tape.param(&store, "unused").unwrap();
    let loss = tape.sum(w);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get("w").unwrap().data(), &[1.0; 4]);
    assert_eq!(g.get("unused").unwrap().data(), &[0.0, 0.0]);
    assert!(matches!(tape.backward(w), Err(NumericsError::InvalidArgument(_))));
}

#[test]
fn backward_of_linear_map() {
    let mut store = ParameterStore::new();
    store.insert("w", Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![0.4, 0.5, 0.6]]).unwrap()).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![2.0, -1.0], vec![0.5, 4.0]]).unwrap());
    let w = tape.param(&store, "w").unwrap();
    let y = tape.matmul(x, w).unwrap();
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    // dL/dW = xᵀ · ones(2×3): row k is the column sum of x's k-th column.
    assert_eq!(g.get("w").unwrap().data(), &[2.5, 2.5, 2.5, 3.0, 3.0, 3.0]);
}

/// Exercises every primitive in one scalar function of random parameters.
fn kitchen_sink(store: &ParameterStore) -> Result<(Tape, Var), NumericsError> {
    let mut tape = Tape::new();
    let a = tape.param(store, "a")?; // 3×4
    let w = tape.param(store, "w")?; // 4×5
    let b = tape.param(store, "b")?; // 5
    let m = tape.param(store, "m")?; // 3×5
    let y = tape.affine(a, w, b)?;
    let t = tape.activation(y, Activation::Tanh);
    let s = tape.activation(y, Activation::Sigmoid);
    let r = tape.activation(m, Activation::Relu);
    let ts = tape.mul(t, s)?;
    let d = tape.sub(ts, r)?;
    let e = tape.exp(d);
    let sc = tape.scale(e, 0.7);
    let sh = tape.add_scalar(sc, -0.2);
    let mt = tape.transpose(sh); // 5×3
    let mm = tape.matmul(mt, a)?; // 5×4
    let nt = tape.matmul_nt(mm, a)?; // 5×3
    let nt_sum = tape.sum(nt);
    let g = tape.gather_rows(mm, vec![0, 2, 2, 4])?;
    let seg = tape.segment_mean(g, vec![1, 0, 1, 1], 3)?;
    let cat = tape.concat_cols(&[seg, a])?; // 3×8
    let sl = tape.slice_cols(cat, 2, 7)?;
    let rows = tape.concat_rows(&[sl, m])?; // 6×5
    let top = tape.slice_rows(rows, 1, 5)?;
    let lsm = tape.log_softmax(top);
    let pick = tape.pick_cols(lsm, vec![0, 4, 2, 1])?;
    let srows = tape.sum_rows(top);
    let p2 = tape.mul(pick, srows)?;
    let added = tape.add(p2, pick)?;
    let total = tape.sum(added);
    let scaled = tape.scale(nt_sum, 0.01);
    let loss = tape.add(total, scaled)?;
    Ok((tape, loss))
}

#[test]
fn every_primitive_passes_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut store = ParameterStore::new();
        store.insert("a", rand_matrix(&mut rng, 3, 4)).unwrap();
        store.insert("w", rand_matrix(&mut rng, 4, 5)).unwrap();
        store.insert("b", Tensor::vector((0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())).unwrap();
        store.insert("m", rand_matrix(&mut rng, 3, 5)).unwrap();
        let report = grad_check(kitchen_sink, &store, &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "seed {seed}: {:?}", report.max_relative_error);
    }
}

#[test]
fn matmul_nt_gradients() {
    let f = |store: &ParameterStore| {
        let mut tape = Tape::new();
        let a = tape.param(store, "a")?;
        let b = tape.param(store, "b")?;
        let y = tape.matmul_nt(a, b)?;
        let z = tape.activation(y, Activation::Tanh);
        let loss = tape.sum(z);
        Ok((tape, loss))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParameterStore::new();
    store.insert("a", rand_matrix(&mut rng, 3, 4)).unwrap();
    store.insert("b", rand_matrix(&mut rng, 6, 4)).unwrap();
    let report = grad_check(f, &store, &GradCheckConfig::default()).unwrap();
    assert!(report.passed(), "{:?}", report.max_relative_error);
}

#[test]
fn bilstm_with_masks_passes_finite_differences() {
    let names = BiLstmNames::new("enc");
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        store.insert("emb", rand_matrix(&mut rng, 6, 3)).unwrap();
        names.init(&mut store, 3, 4, &mut rng).unwrap();
        let seqs = vec![vec![0, 1, 2, 3], vec![5], vec![4, 4, 1]];
        let f = |store: &ParameterStore| {
            let mut tape = Tape::new();
            let emb = tape.param(store, "emb")?;
            let (fw, bw) = names.bind(&mut tape, store)?;
            let enc = encode_sequences(&mut tape, emb, &seqs, fw, bw)?;
            let sq = tape.mul(enc, enc)?;
            let loss = tape.sum(sq);
            Ok((tape, loss))
        };
        let report = grad_check(f, &store, &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "seed {seed}: {:?}", report.max_relative_error);
    }
}

#[test]
fn bilstm_matches_stepwise_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let names = BiLstmNames::new("enc");
    let mut store = ParameterStore::new();
    store.insert("emb", rand_matrix(&mut rng, 5, 3)).unwrap();
    names.init(&mut store, 3, 2, &mut rng).unwrap();
    let seq = vec![3usize, 0, 4, 1];

    let mut tape = Tape::new();
    let emb = tape.param(&store, "emb").unwrap();
    let (fw, bw) = names.bind(&mut tape, &store).unwrap();
    let enc = encode_sequences(&mut tape, emb, &[seq.clone(), vec![2]], fw, bw).unwrap();
    let got = tape.value(enc).row_slice(0).to_vec();

    let run = |cell: &LstmNames, order: Vec<usize>| {
        let mut sub = ParameterStore::new();
        sub.insert("wx", store.get(&cell.w_input).unwrap().clone()).unwrap();
        sub.insert("wh", store.get(&cell.w_hidden).unwrap().clone()).unwrap();
        sub.insert("b", store.get(&cell.bias).unwrap().clone()).unwrap();
        let (mut h, mut c) = (vec![0.0; 2], vec![0.0; 2]);
        for tok in order {
            let x = store.get("emb").unwrap().row_slice(tok).to_vec();
            let (h2, c2) = lstm_scalar_oracle(&sub, &x, &h, &c);
            h = h2;
            c = c2;
        }
        h
    };
    let mut expected = run(&names.forward, seq.clone());
    expected.extend(run(&names.backward, seq.iter().rev().cloned().collect()));
    for (a, e) in got.iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12);
    }
}

/// Plain scalar Adam, independent of the store implementation.
fn scalar_adam(mut w: f64, steps: usize, lr: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v) = (0.0, 0.0);
    for t in 1..=steps {
        let g = 2.0 * w;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        w -= lr * mh / (vh.sqrt() + eps);
    }
    w
}

#[test]
fn adam_three_steps_on_quadratic() {
    let mut store = ParameterStore::new();
    store.insert("w", Tensor::scalar(1.0)).unwrap();
    let cfg = OptimizerConfig::with_learning_rate(0.1);
    for _ in 0..3 {
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        store.adam_step(&g, &cfg).unwrap();
    }
    let got = store.get("w").unwrap().data()[0];
    assert!((got - scalar_adam(1.0, 3, 0.1)).abs() < 1e-12);
    assert_eq!(store.parameter("w").unwrap().step(), 3);
}

#[test]
fn grad_check_on_quadratic_is_tight() {
    let mut store = ParameterStore::new();
    store.insert("w", Tensor::vector(vec![0.3, -0.7, 1.1])).unwrap();
    let f = |store: &ParameterStore| {
        let mut tape = Tape::new();
        let w = tape.param(store, "w")?;
        let sq = tape.mul(w, w)?;
        let loss = tape.sum(sq);
        Ok((tape, loss))
    };
    let report = grad_check(f, &store, &GradCheckConfig::default()).unwrap();
    assert!(report.worst() <= 1e-8, "{}", report.worst());
}

#[test]
fn grad_check_flags_non_finite() {
    let mut store = ParameterStore::new();
    store.insert("w", Tensor::vector(vec![800.0])).unwrap();
    let f = |store: &ParameterStore| {
        let mut tape = Tape::new();
        let w = tape.param(store, "w")?;
        let e = tape.exp(w);
        let loss = tape.sum(e);
        Ok((tape, loss))
    };
    let err = grad_check(f, &store, &GradCheckConfig::default()).unwrap_err();
    assert!(err.to_string().contains("`w`[0]"), "{err}");
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParameterStore::new();
        store.insert("a", rand_matrix(&mut rng, 3, 4)).unwrap();
        store.insert("w", rand_matrix(&mut rng, 4, 5)).unwrap();
        store.insert("b", Tensor::vector(vec![0.1; 5])).unwrap();
        store.insert("m", rand_matrix(&mut rng, 3, 5)).unwrap();
        let (tape, loss) = kitchen_sink(&store).unwrap();
        let g: Gradients = tape.backward(loss).unwrap();
        (tape.value(loss).data()[0].to_bits(), g)
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        values in prop::collection::vec(prop::num::f64::ANY, 1..40),
        cols in 1usize..5,
    ) {
        let n = values.len() - values.len() % cols;
        prop_assume!(n > 0);
        let t = Tensor::matrix(n / cols, cols, values[..n].to_vec()).unwrap();
        let mut store = ParameterStore::new();
        store.insert("p.weights", t.clone()).unwrap();
        store.insert("q", Tensor::scalar(values[0])).unwrap();
        let mut header = BTreeMap::new();
        header.insert("kind".to_string(), "test".to_string());
        let (m, b) = encode(&header, &store);
        let (h2, s2) = decode(&m, &b).unwrap();
        prop_assert_eq!(h2, header);
        let back = s2.get("p.weights").unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        for (x, y) in back.data().iter().zip(t.data()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn softmax_rows_are_distributions(
        values in prop::collection::vec(-50.0f64..50.0, 12),
        target in 0usize..4,
    ) {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::matrix(3, 4, values).unwrap());
        let (loss, probs) = tape.softmax_cross_entropy(l, &[target, 0, 3]).unwrap();
        prop_assert!(tape.value(loss).data()[0] >= 0.0);
        for r in 0..3 {
            prop_assert!((probs.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_adam_is_noop(values in prop::collection::vec(-10.0f64..10.0, 1..20)) {
        let mut store = ParameterStore::new();
        store.insert("x", Tensor::vector(values.clone())).unwrap();
        let mut g = Gradients::default();
        g.insert("x", Tensor::zeros(&[values.len()]));
        store.adam_step(&g, &OptimizerConfig::default()).unwrap();
        prop_assert_eq!(store.get("x").unwrap().data(), &values[..]);
    }
}
