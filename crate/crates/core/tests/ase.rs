mod common;

use common::{param_gradcheck, random, rng, weighted_sum};
use tas_core::ase::{block_window, Ase, AseConfig, Attention, Block, Head};
use tas_tensor::{ParamStore, Tape, Tensor};

fn tiny() -> AseConfig {
    AseConfig {
        num_decoders: 3,
        blocks_per_stage: 9,
        width: 8,
        attention_dim: 4,
        kernel_taps: 3,
    }
}

#[test]
fn stage_shapes_and_count() {
    let mut store = ParamStore::new();
    let model = Ase::new(&mut store, "ase", 6, 5, Head::Softmax, &tiny(), &mut rng(1)).unwrap();
    let x = random(&mut rng(2), &[32, 6], -1.0, 1.0);
    let stages = model.infer(&store, &x).unwrap();
    assert_eq!(stages.len(), 4);
    for s in &stages {
        assert_eq!(s.shape(), &[32, 5]);
    }
}

#[test]
fn forward_is_deterministic() {
    let build = || {
        let mut store = ParamStore::new();
        let model = Ase::new(&mut store, "ase", 6, 5, Head::Softmax, &tiny(), &mut rng(9)).unwrap();
        let x = random(&mut rng(3), &[40, 6], -1.0, 1.0);
        model.infer(&store, &x).unwrap()
    };
    let (a, b) = (build(), build());
    for (x, y) in a.iter().zip(&b) {
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert_eq!(x.argmax_rows(), y.argmax_rows());
    }
}

#[test]
fn outputs_stay_finite_for_large_inputs() {
    let mut store = ParamStore::new();
    let model = Ase::new(&mut store, "ase", 6, 5, Head::Softmax, &tiny(), &mut rng(4)).unwrap();
    for scale in [1.0, 10.0, 100.0, 1000.0] {
        let x = random(&mut rng(5), &[50, 6], -scale, scale);
        for s in model.infer(&store, &x).unwrap() {
            assert!(s.all_finite(), "scale {scale}");
        }
    }
    let mut store = ParamStore::new();
    let prc = Ase::new(&mut store, "prc", 6, 1, Head::Sigmoid, &tiny(), &mut rng(4)).unwrap();
    let x = random(&mut rng(6), &[50, 6], -1000.0, 1000.0);
    for s in prc.infer(&store, &x).unwrap() {
        assert_eq!(s.shape(), &[50, 1]);
        assert!(s.all_finite());
    }
}

#[test]
fn window_schedule_doubles_and_clamps() {
    let windows: Vec<usize> = (1..=9).map(|i| block_window(i, 1000)).collect();
    assert_eq!(windows, [2, 4, 8, 16, 32, 64, 128, 256, 512]);
    assert_eq!(block_window(9, 100), 100);
    assert_eq!(block_window(3, 5), 5);
}

#[test]
fn blocks_preserve_shape_and_attend_locally() {
    let cfg = tiny();
    let t = 70;
    for i in 1..=9 {
        for cross in [false, true] {
            let mut store = ParamStore::new();
            let block = Block::new(&mut store, "b", i, &cfg, cross, &mut rng(i as u64));
            let mut tape = Tape::new();
            let x = tape.constant(random(&mut rng(10 + i as u64), &[t, 8], -1.0, 1.0));
            let ctx = cross.then(|| tape.constant(random(&mut rng(20 + i as u64), &[t, 8], -1.0, 1.0)));
            let (y, att) = block.forward_traced(&mut tape, &store, x, ctx).unwrap();
            assert_eq!(tape.value(y).shape(), &[t, 8]);
            let w = tape.attention_weights(att).unwrap();
            let window = block_window(i, t);
            for q in 0..t {
                let (lo, hi) = tas_tensor::tape::attention_window(q, window, t);
                assert_eq!(hi - lo, window);
                for k in 0..t {
                    if k < lo || k >= hi {
                        assert_eq!(w.get2(q, k), 0.0, "block {i} q {q} k {k}");
                    } else {
                        assert!(w.get2(q, k) > 0.0);
                    }
                }
                let total: f64 = w.row(q).iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn cross_attention_values_come_from_the_current_stage() {
    let mut store = ParamStore::new();
    let att = Attention::new(&mut store, "a", 5, 5, true, &mut rng(8));
    *store.get_mut(att.value.weight) = Tensor::eye(5);
    *store.get_mut(att.value.bias) = Tensor::zeros(&[5]);
    *store.get_mut(att.output.weight) = Tensor::eye(5);
    *store.get_mut(att.output.bias) = Tensor::zeros(&[5]);
    let x = random(&mut rng(9), &[12, 5], -1.0, 1.0);
    let run = |ctx: Tensor| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let cv = tape.constant(ctx);
        let (out, a) = att.forward_traced(&mut tape, &store, xv, Some(cv), 1).unwrap();
        let qv = (tape.value(out).clone(), tape.attention_weights(a).unwrap());
        qv
    };
    let (zeroed, _) = run(Tensor::zeros(&[12, 5]));
    let (random_ctx, _) = run(random(&mut rng(10), &[12, 5], -3.0, 3.0));
    assert!(zeroed.max_abs_diff(&x) < 1e-12);
    assert!(random_ctx.max_abs_diff(&x) < 1e-12);

    // With a wider window the context does move the queries and keys.
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let z = tape.constant(Tensor::zeros(&[12, 5]));
    let c = tape.constant(random(&mut rng(11), &[12, 5], -3.0, 3.0));
    let (_, a0) = att.forward_traced(&mut tape, &store, xv, Some(z), 4).unwrap();
    let (_, a1) = att.forward_traced(&mut tape, &store, xv, Some(c), 4).unwrap();
    let (w0, w1) = (tape.attention_weights(a0).unwrap(), tape.attention_weights(a1).unwrap());
    assert!(w0.max_abs_diff(&w1) > 1e-3);

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let short = tape.constant(Tensor::zeros(&[11, 5]));
    assert!(att.forward(&mut tape, &store, xv, Some(short), 2).is_err());
}

#[test]
fn block_gradients_match_finite_differences() {
    let cfg = AseConfig {
        width: 4,
        attention_dim: 3,
        ..tiny()
    };
    for (trial, (i, cross)) in [(1, false), (2, true), (3, false), (4, true)].into_iter().enumerate() {
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, "b", i, &cfg, cross, &mut rng(trial as u64));
        let x = random(&mut rng(100 + trial as u64), &[10, 4], -1.0, 1.0);
        let ctx = random(&mut rng(200 + trial as u64), &[10, 4], -1.0, 1.0);
        let err = param_gradcheck(&mut store, &[x, ctx], |tape, store, v| {
            let c = cross.then_some(v[1]);
            let y = block.forward(tape, store, v[0], c).unwrap();
            weighted_sum(tape, y, trial as u64)
        });
        assert!(err < 1e-4, "block {i} cross {cross}: {err:.3e}");
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let cfg = AseConfig {
        num_decoders: 1,
        blocks_per_stage: 2,
        width: 4,
        attention_dim: 2,
        kernel_taps: 3,
    };
    for (head, outputs) in [(Head::Softmax, 3), (Head::Sigmoid, 1)] {
        let mut store = ParamStore::new();
        let model = Ase::new(&mut store, "m", 3, outputs, head, &cfg, &mut rng(5)).unwrap();
        let x = random(&mut rng(6), &[9, 3], -1.0, 1.0);
        let err = param_gradcheck(&mut store, &[x], |tape, store, v| {
            let stages = model.forward(tape, store, v[0]).unwrap();
            let parts: Vec<_> = stages.iter().map(|&s| weighted_sum(tape, s, 3)).collect();
            tape.concat_cols(&parts).map(|c| tape.sum(c)).unwrap()
        });
        assert!(err < 1e-4, "{head:?}: {err:.3e}");
    }
}
