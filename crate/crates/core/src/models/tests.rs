use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use super::*;
use crate::diffnum::finite_diff_check;
use crate::rng::Stream;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut s = Stream::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| s.uniform_range(-1.0, 1.0)).collect()).unwrap()
}

fn zero_all(m: &mut Forecaster) {
    for v in m.params_mut().values_mut() {
        v.fill(0.0);
    }
}

fn mse_loss(tape: &mut Tape, h: Var, targets: &Tensor) -> Result<Var, DiffError> {
    let t = tape.constant(targets.clone())?;
    let r = tape.sub(h, t)?;
    let sq = tape.square(r)?;
    tape.mean(sq)
}

/// Gradient check of `mean((H - targets)^2)` for every parameter of `model`.
fn model_gradcheck(model: &Forecaster, batch: &Batch, tol: f64) -> crate::diffnum::GradCheckReport {
    let report = finite_diff_check(
        |tape, vars| {
            let h = model.forward(tape, vars, &batch.inputs).map_err(|e| DiffError::Contract(e.to_string()))?;
            mse_loss(tape, h, &batch.targets)
        },
        model.params().tensors(),
        1e-6,
        tol,
    );
    assert!(report.checked > 0);
    report
}

fn toy_batch(b: usize, t: usize, d: usize, k: usize, seed: u64) -> Batch {
    Batch { inputs: random(&[b, t, d], seed), targets: random(&[b, d * k], seed + 1) }
}

fn elman(activation: Activation, hidden: usize) -> ModelConfig {
    ModelConfig { arch: Arch::Recurrent, cell: Cell::Elman, activation, hidden, ..Default::default() }
}

fn small_transformer(heads: usize, layers: usize) -> ModelConfig {
    ModelConfig { arch: Arch::Transformer, width: 4, heads, layers, ffn: 6, ..Default::default() }
}

#[test]
fn zero_recurrent_weights_give_zero_logits() {
    for cfg in [elman(Activation::Tanh, 5), ModelConfig { hidden: 5, ..Default::default() }] {
        let mut m = Forecaster::new(&cfg, 3, 2, 1).unwrap();
        zero_all(&mut m);
        let out = m.predict(&random(&[4, 6, 3], 2)).unwrap();
        assert_eq!(out.shape(), &[4, 6]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn elman_single_step_by_hand() {
    let mut m = Forecaster::new(&elman(Activation::Identity, 1), 1, 1, 0).unwrap();
    let Forecaster::Recurrent(net) = &mut m else { unreachable!() };
    let ids = [(net.w_input(), 1.0), (net.w_hidden(), 0.0), (net.bias(), 0.0), (net.w_logit(), 1.0)];
    for (id, v) in ids {
        let shape = net.params.get(id).shape().to_vec();
        net.params.set(id, Tensor::full(&shape, v)).unwrap();
    }
    let w = Window { inputs: Tensor::matrix(1, 1, vec![0.5]), targets: Tensor::matrix(1, 1, vec![0.0]), env_id: "e".into() };
    let h = m.forecast(&w).unwrap();
    assert_eq!(h.shape(), &[1, 1]);
    assert_eq!(h.item(), 0.5);
}

#[test]
fn elman_gradients_match_finite_differences() {
    for act in [Activation::Tanh, Activation::Identity, Activation::Relu] {
        let m = Forecaster::new(&elman(act, 4), 2, 2, 5).unwrap();
        let r = model_gradcheck(&m, &toy_batch(3, 5, 2, 2, 9), 1e-5);
        assert!(r.passed, "{act:?}: {r:?}");
    }
}

#[test]
fn lstm_gradients_match_finite_differences() {
    let m = Forecaster::new(&ModelConfig { hidden: 4, ..Default::default() }, 2, 1, 3).unwrap();
    let r = model_gradcheck(&m, &toy_batch(3, 4, 2, 1, 1), 1e-5);
    assert!(r.passed, "{r:?}");
}

#[test]
fn transformer_gradients_match_finite_differences() {
    let m = Forecaster::new(&small_transformer(2, 2), 2, 1, 4).unwrap();
    let r = model_gradcheck(&m, &toy_batch(2, 4, 2, 1, 7), 1e-4);
    assert!(r.passed, "{r:?}");

    // without residuals and normalization
    let cfg = ModelConfig { residual: false, layer_norm: false, ..small_transformer(1, 1) };
    let m = Forecaster::new(&cfg, 2, 1, 4).unwrap();
    let r = model_gradcheck(&m, &toy_batch(2, 4, 2, 1, 7), 1e-4);
    assert!(r.passed, "{r:?}");
}

#[test]
fn zero_logit_map_gives_zero_output() {
    let mut m = Forecaster::new(&small_transformer(2, 1), 3, 2, 8).unwrap();
    let Forecaster::Transformer(net) = &mut m else { unreachable!() };
    let id = net.w_logit();
    net.params.set(id, Tensor::zeros(&[6, 4])).unwrap();
    let out = m.predict(&random(&[2, 5, 3], 1)).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_bitwise_deterministic() {
    for cfg in [ModelConfig::default(), ModelConfig { arch: Arch::Transformer, ..Default::default() }] {
        let a = Forecaster::new(&cfg, 3, 1, 42).unwrap();
        let b = Forecaster::new(&cfg, 3, 1, 42).unwrap();
        let x = random(&[4, 10, 3], 3);
        let (pa, pb) = (a.predict(&x).unwrap(), b.predict(&x).unwrap());
        assert!(pa.data().iter().zip(pb.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn wrong_input_width_is_a_dimension_error() {
    let m = Forecaster::new(&ModelConfig::default(), 3, 1, 0).unwrap();
    let err = m.predict(&random(&[2, 4, 2], 0)).unwrap_err();
    assert!(matches!(err, ModelError::Diff(DiffError::Dimension { .. })), "{err}");
}

#[test]
fn head_count_must_divide_width() {
    let cfg = ModelConfig { arch: Arch::Transformer, width: 6, heads: 4, ..Default::default() };
    assert!(matches!(Forecaster::new(&cfg, 3, 1, 0), Err(ModelError::Config(_))));
}

#[test]
fn positional_encoding_values() {
    let pe = positional_encoding(0, 6);
    assert_eq!(pe, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    assert_abs_diff_eq!(positional_encoding(1, 8)[0], 0.84147, epsilon = 1e-5);
    // second pair uses frequency 10000^(-2/8)
    assert_abs_diff_eq!(positional_encoding(3, 8)[3], (3.0 * 0.1f64).cos(), epsilon = 1e-12);
}

#[test]
fn attention_single_token_returns_v() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::matrix(1, 2, vec![0.3, -1.0])).unwrap();
    let k = tape.constant(Tensor::matrix(1, 2, vec![2.0, 0.5])).unwrap();
    let v = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0])).unwrap();
    let out = attention(&mut tape, q, k, v, 2).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn attention_identical_keys_average_values() {
    let mut tape = Tape::new();
    let q = tape.constant(random(&[3, 2], 1)).unwrap();
    let k = tape.constant(Tensor::matrix(3, 2, vec![0.4, 0.7, 0.4, 0.7, 0.4, 0.7])).unwrap();
    let v = tape.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 6.0])).unwrap();
    let out = attention(&mut tape, q, k, v, 2).unwrap();
    for &o in tape.value(out).data() {
        assert_abs_diff_eq!(o, 3.0, epsilon = 1e-12);
    }
}

#[test]
fn attention_two_token_example() {
    let mut tape = Tape::new();
    let eye = Tensor::identity(2);
    let q = tape.constant(eye.clone()).unwrap();
    let k = tape.constant(eye.clone()).unwrap();
    let v = tape.constant(eye).unwrap();
    let out = attention(&mut tape, q, k, v, 2).unwrap();
    let s = 0.5f64.sqrt();
    let diag = s.exp() / (s.exp() + 1.0);
    let o = tape.value(out);
    assert_abs_diff_eq!(o.get(&[0, 0]), diag, epsilon = 1e-12);
    assert_abs_diff_eq!(o.get(&[1, 1]), diag, epsilon = 1e-12);
    assert_abs_diff_eq!(o.get(&[0, 1]), 1.0 - diag, epsilon = 1e-12);
}

#[test]
fn attention_rejects_mismatched_shapes() {
    let mut tape = Tape::new();
    let q = tape.constant(random(&[2, 3], 1)).unwrap();
    let k = tape.constant(random(&[2, 2], 2)).unwrap();
    let v = tape.constant(random(&[2, 2], 3)).unwrap();
    assert!(matches!(attention(&mut tape, q, k, v, 3), Err(DiffError::Dimension { .. })));
    let k = tape.constant(random(&[2, 3], 2)).unwrap();
    let v = tape.constant(random(&[4, 2], 3)).unwrap();
    assert!(attention(&mut tape, q, k, v, 3).is_err());
}

#[test]
fn single_identity_head_reduces_to_attention() {
    let mut tape = Tape::new();
    let x = random(&[3, 4], 11);
    let xv = tape.constant(x.clone()).unwrap();
    let eye = tape.constant(Tensor::identity(4)).unwrap();
    let w = AttentionWeights { w_q: eye, w_k: eye, w_v: eye, w_o: eye };
    let mh = multi_head(&mut tape, xv, 1, 3, 1, w).unwrap();
    let direct = attention(&mut tape, xv, xv, xv, 4).unwrap();
    assert!(tape.value(mh).max_abs_diff(tape.value(direct)) < 1e-14);
}

#[test]
fn multi_head_preserves_shape_and_checks_heads() {
    let mut tape = Tape::new();
    let x = tape.constant(random(&[2 * 5, 6], 1)).unwrap();
    let ws: Vec<Var> = (0..4).map(|i| tape.constant(random(&[6, 6], 10 + i)).unwrap()).collect();
    let w = AttentionWeights { w_q: ws[0], w_k: ws[1], w_v: ws[2], w_o: ws[3] };
    let out = multi_head(&mut tape, x, 2, 5, 3, w).unwrap();
    assert_eq!(tape.value(out).shape(), &[10, 6]);
    assert!(multi_head(&mut tape, x, 2, 5, 4, w).is_err());
}

#[test]
fn multi_head_gradients_match_finite_differences() {
    let params = vec![random(&[3, 4], 1), random(&[4, 4], 2), random(&[4, 4], 3), random(&[4, 4], 4), random(&[4, 4], 5)];
    let target = random(&[3, 4], 6);
    let r = finite_diff_check(
        |tape, v| {
            let w = AttentionWeights { w_q: v[1], w_k: v[2], w_v: v[3], w_o: v[4] };
            let out = multi_head(tape, v[0], 1, 3, 2, w)?;
            mse_loss(tape, out, &target)
        },
        &params,
        1e-6,
        1e-5,
    );
    assert!(r.passed, "{r:?}");
}

#[test]
fn attention_rows_sum_to_one() {
    let mut tape = Tape::new();
    let q = tape.constant(random(&[2, 7, 3], 1).map(|v| 40.0 * v)).unwrap();
    let k = tape.constant(random(&[2, 7, 3], 2)).unwrap();
    let a = attention_weights(&mut tape, q, k, 3).unwrap();
    for row in tape.value(a).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn batch_layout_is_time_major_per_window() {
    // d=2, t=3: inputs rows are variables
    let w = Window {
        inputs: Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0]),
        targets: Tensor::matrix(2, 1, vec![4.0, 40.0]),
        env_id: "e1".into(),
    };
    let b = Batch::from_windows(&[&w, &w]).unwrap();
    assert_eq!(b.inputs.shape(), &[2, 3, 2]);
    assert_eq!(&b.inputs.data()[..6], &[1.0, 10.0, 2.0, 20.0, 3.0, 30.0]);
    assert_eq!(b.targets.data(), &[4.0, 40.0, 4.0, 40.0]);
}

#[test]
fn checkpoint_round_trip_and_validation() {
    let cfg = ModelConfig { arch: Arch::Transformer, width: 8, heads: 2, layers: 1, ffn: 8, ..Default::default() };
    let a = Forecaster::new(&cfg, 3, 2, 1).unwrap();
    let mut buf = Vec::new();
    a.params().save(&mut buf).unwrap();
    assert_eq!(&buf[..6], b"IVCKPT");

    let mut b = Forecaster::new(&cfg, 3, 2, 2).unwrap();
    assert_ne!(a.params(), b.params());
    b.params_mut().load_into(buf.as_slice()).unwrap();
    assert_eq!(a.params(), b.params());

    let mut other = Forecaster::new(&ModelConfig { width: 4, ..cfg.clone() }, 3, 2, 1).unwrap();
    assert!(matches!(other.params_mut().load_into(buf.as_slice()), Err(ModelError::Checkpoint(_))));
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(b.params_mut().load_into(bad.as_slice()).is_err());
    assert!(b.params_mut().load_into(&buf[..buf.len() - 3]).is_err());
}

#[test]
fn init_is_bounded_by_fan_in() {
    let m = Forecaster::new(&ModelConfig { hidden: 16, ..Default::default() }, 3, 1, 0).unwrap();
    let Forecaster::Recurrent(net) = &m else { unreachable!() };
    let w = net.params.get(net.w_hidden());
    assert_eq!(w.shape(), &[64, 16]);
    assert!(w.data().iter().all(|v| v.abs() <= 0.25));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_shape_contract(d in 1usize..4, t in 1usize..6, k in 1usize..4, h in 1usize..6, heads in 1usize..3, transformer: bool) {
        let cfg = if transformer {
            ModelConfig { arch: Arch::Transformer, width: 2 * heads, heads, layers: 1, ffn: 3, ..Default::default() }
        } else {
            ModelConfig { hidden: h, ..Default::default() }
        };
        let m = Forecaster::new(&cfg, d, k, 0).unwrap();
        let w = Window { inputs: random(&[d, t], 1), targets: random(&[d, k], 2), env_id: "e".into() };
        let h = m.forecast(&w).unwrap();
        prop_assert_eq!(h.shape(), &[d, k]);
    }
}
