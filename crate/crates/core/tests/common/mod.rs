#![allow(dead_code)]

pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tas_tensor::{ParamStore, Tape, Tensor, Var};

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central finite differences over stored parameters and extra inputs,
/// compared with the tape's analytic gradients. Returns the worst relative
/// error `|a − n| / max(|a|, |n|, 1e-5)`.
pub fn param_gradcheck<F>(store: &mut ParamStore, inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Var,
{
    const H: f64 = 1e-6;
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, store, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, store, &vars);
    tape.backward(out).unwrap();
    let pgrads = tape.param_grads(store);
    let igrads: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-5);
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let analytic = pgrads[id.index()].clone().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + H;
            let up = eval(store, inputs);
            store.get_mut(id).data_mut()[k] = orig - H;
            let down = eval(store, inputs);
            store.get_mut(id).data_mut()[k] = orig;
            let e = rel(analytic.data()[k], (up - down) / (2.0 * H));
            assert!(e.is_finite());
            worst = worst.max(e);
        }
    }
    let mut perturbed = inputs.to_vec();
    for (i, g) in igrads.iter().enumerate() {
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            perturbed[i].data_mut()[k] = orig + H;
            let up = eval(store, &perturbed);
            perturbed[i].data_mut()[k] = orig - H;
            let down = eval(store, &perturbed);
            perturbed[i].data_mut()[k] = orig;
            worst = worst.max(rel(g.data()[k], (up - down) / (2.0 * H)));
        }
    }
    worst
}

/// Weighted sum with fixed pseudo-random weights.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let w = random(&mut rng(seed ^ 0x5eed), &shape, -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}
