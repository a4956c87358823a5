#![allow(dead_code)]

use gfa_core::autodiff::{grad_one, no_grad};
use gfa_core::nn::{Activation, Arch};
use gfa_core::Tensor;
use gfa_core::{ModelState, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape.to_vec(), &v).unwrap()
}

/// Central differences, written out here rather than borrowed from the
/// library so the oracle is independent of the code under test.
pub fn central_difference(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.numel())
        .map(|i| {
            let orig = x.data()[i];
            probe.data_mut()[i] = orig + h;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - h;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        d / scale
    }
}

/// Analytic and finite-difference gradients of `Σ f(x) ⊙ w` for a fixed
/// random weighting `w`.
pub fn weighted_gradients(f: &dyn Fn(&Var) -> Var, x: &Tensor, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let out_shape = no_grad(|| f(&Var::constant(x.clone())).shape().to_vec());
    let w = uniform(&out_shape, -1.0, 1.0, &mut rng(seed));
    let leaf = Var::leaf(x.clone());
    let loss = f(&leaf).mul(&Var::constant(w.clone())).unwrap().sum();
    let analytic = grad_one(&loss, &leaf, false).unwrap().value().to_f64_vec();
    let mut eval = |t: &Tensor| -> f64 {
        let y = no_grad(|| f(&Var::constant(t.clone())));
        y.value().data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };
    let fd = central_difference(&mut eval, x, 1e-4);
    (analytic, fd)
}

pub fn mlp(dims: &[usize], activation: Activation, bias: bool, seed: u64) -> ModelState {
    ModelState::build(
        Arch::Mlp {
            dims: dims.to_vec(),
            activation,
            bias,
        },
        seed,
    )
}
