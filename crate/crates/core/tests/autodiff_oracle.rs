mod common;

use std::sync::Arc;

use common::*;
use gfa_core::autodiff::{grad, grad_one, no_grad};
use gfa_core::gfa::{total_loss, GfaConfig};
use gfa_core::nn::{mse_loss, one_hot, Activation, Arch};
use gfa_core::tensor::{maxpool_argmax, ConvGeometry};
use gfa_core::{ModelState, Tensor, Var};

const TOL: f64 = 1e-5;

fn check(name: &str, f: &dyn Fn(&Var) -> Var, x: &Tensor) {
    let (a, fd) = weighted_gradients(f, x, 7);
    let e = rel_err(&a, &fd);
    assert!(e < TOL, "{name}: relative error {e:e}");
}

/// Values kept at least 0.05 away from 0 so kinks are never straddled.
fn off_zero(shape: &[usize], seed: u64) -> Tensor {
    let t = uniform(shape, -1.0, 1.0, &mut rng(seed));
    t.map(|v| if v.abs() < 0.05 { v + 0.1_f64.copysign(v) } else { v })
}

#[test]
fn elementwise_primitives() {
    let x = off_zero(&[3, 4], 1);
    let y = Var::constant(off_zero(&[3, 4], 2));
    let pos = uniform(&[3, 4], 0.2, 2.0, &mut rng(3));
    check("add", &|v| v.add(&y).unwrap(), &x);
    check("sub", &|v| y.sub(v).unwrap(), &x);
    check("mul", &|v| v.mul(&y).unwrap(), &x);
    check("div numerator", &|v| v.div(&y).unwrap(), &x);
    check("div denominator", &|v| y.div(v).unwrap(), &x);
    check("neg", &|v| v.neg(), &x);
    check("scale", &|v| v.scale(-2.5), &x);
    check("add_scalar", &|v| v.add_scalar(0.7), &x);
    check("tanh", &|v| v.tanh(), &x);
    check("sqrt", &|v| v.sqrt(), &pos);
    check("relu", &|v| v.relu(), &x);
    check("clamp_min", &|v| v.clamp_min(0.01), &x);
    check("clamp", &|v| v.clamp(-0.51, 0.49), &x);
    check("square", &|v| v.square(), &x);
    let m = x.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    check("mask", &|v| v.mask(m.clone()).unwrap(), &x);
}

#[test]
fn sign_has_zero_gradient() {
    let x = off_zero(&[5], 4);
    let leaf = Var::leaf(x);
    let g = grad_one(&leaf.sign().mul(&leaf).unwrap().sum(), &leaf, false).unwrap();
    // d/dx (sign(x)·x) with sign held constant is sign(x).
    assert_eq!(g.value().data(), leaf.value().map(f64::signum).data());
}

#[test]
fn reductions_and_broadcasts() {
    let x = off_zero(&[3, 4], 5);
    let s = off_zero(&[1], 6);
    let row = off_zero(&[1, 4], 7);
    let col = off_zero(&[3, 1], 8);
    check("sum", &|v| v.sum(), &x);
    check("mean", &|v| v.mean(), &x);
    check("expand_scalar", &|v| v.expand_scalar(&[2, 3]).unwrap(), &s);
    check("sum_rows", &|v| v.sum_rows().unwrap(), &x);
    check("sum_cols", &|v| v.sum_cols().unwrap(), &x);
    check("broadcast_rows", &|v| v.broadcast_rows(3).unwrap(), &row);
    check("broadcast_cols", &|v| v.broadcast_cols(5).unwrap(), &col);
    check("norm", &|v| v.norm(), &x);
    let y = Var::constant(off_zero(&[3, 4], 9));
    check("dot", &|v| v.dot(&y).unwrap(), &x);
    check("select", &|v| v.select(5).unwrap(), &x);
}

#[test]
fn matrix_products() {
    let a = off_zero(&[3, 4], 10);
    let b = Var::constant(off_zero(&[4, 2], 11));
    let bt = Var::constant(off_zero(&[2, 4], 12));
    let at = Var::constant(off_zero(&[3, 2], 13));
    check("matmul lhs", &|v| v.matmul(&b).unwrap(), &a);
    check(
        "matmul rhs",
        &|v| Var::constant(off_zero(&[2, 3], 14)).matmul(v).unwrap(),
        &a,
    );
    check("matmul_t a·bᵀ", &|v| v.matmul_t(&bt, false, true).unwrap(), &a);
    check("matmul_t aᵀ·b", &|v| v.matmul_t(&at, true, false).unwrap(), &a);
    check(
        "matmul_t aᵀ·bᵀ",
        &|v| v.matmul_t(&Var::constant(off_zero(&[2, 3], 15)), true, true).unwrap(),
        &a,
    );
    check(
        "matmul_t rhs transposed",
        &|v| Var::constant(off_zero(&[2, 4], 16)).matmul_t(v, false, true).unwrap(),
        &a,
    );
}

#[test]
fn shape_and_index_primitives() {
    let x = off_zero(&[2, 3, 2], 17);
    check("reshape", &|v| v.reshape(&[3, 4]).unwrap(), &x);
    check("flatten_rows", &|v| v.flatten_rows().unwrap(), &x);
    let idx = Arc::new(vec![0, 5, 5, 11, 3, 0]);
    check("gather", &|v| v.gather(idx.clone(), &[2, 3]).unwrap(), &x);
    let src = off_zero(&[6], 18);
    check("scatter_add", &|v| v.scatter_add(idx.clone(), &[12]).unwrap(), &src);
}

#[test]
fn convolution_primitives() {
    let x = off_zero(&[2, 2, 4, 5], 19);
    for (k, p) in [(3, 1), (2, 0)] {
        let geom = ConvGeometry::new(x.shape(), k, p).unwrap();
        check("im2col", &|v| v.im2col(geom).unwrap(), &x);
        let cols = no_grad(|| Var::constant(x.clone()).im2col(geom).unwrap())
            .value()
            .clone();
        check("col2im", &|v| v.col2im(geom).unwrap(), &off_zero(cols.shape(), 20));
    }
}

/// Full MSE loss of a model as a function of its flattened parameters,
/// checked on every coordinate of a small MLP.
#[test]
fn small_mlp_loss_all_parameters() {
    for (act, bias) in [(Activation::Tanh, true), (Activation::Relu, false)] {
        let m = mlp(&[6, 5, 4, 3], act, bias, 21);
        let x = off_zero(&[4, 6], 22);
        let y = one_hot::<f64>(&[0, 2, 1, 2], 3).unwrap();
        for p in 0..m.params.len() {
            let f = |v: &Var| -> Var {
                let mut leaves: Vec<Var> = m.params.iter().map(|t| Var::constant(t.clone())).collect();
                leaves[p] = v.clone();
                let trace = m.forward_with(&leaves, &Var::constant(x.clone())).unwrap();
                mse_loss(&trace.output, &Var::constant(y.clone())).unwrap()
            };
            check(&format!("mlp {act:?} param {p}"), &f, &m.params[p]);
        }
        let f = |v: &Var| mse_loss(&m.forward(v).unwrap().output, &Var::constant(y.clone())).unwrap();
        check("mlp input", &f, &x);
    }
}

/// ReLU signs and max-pool winners of a forward pass.
fn pattern(m: &ModelState, x: &Tensor) -> Vec<usize> {
    let trace = no_grad(|| m.forward(&Var::constant(x.clone())).unwrap());
    let mut out = Vec::new();
    for z in &trace.pre_activations {
        let z = z.value();
        out.extend(z.data().iter().map(|&v| usize::from(v > 0.0)));
        if z.rank() == 4 {
            out.extend(maxpool_argmax(&z.map(|v| v.max(0.0)), 2).unwrap().0);
        }
    }
    out
}

/// Sampled-coordinate check on the full-size models.
fn sampled_param_check(m: &ModelState, x: &Tensor, labels: &[usize], per_tensor: usize) {
    let y = Var::constant(one_hot::<f64>(labels, m.classes()).unwrap());
    let leaves = m.param_leaves();
    let trace = m.forward_with(&leaves, &Var::constant(x.clone())).unwrap();
    let loss = mse_loss(&trace.output, &y).unwrap();
    let grads = grad(&loss, &leaves, false).unwrap();
    let mut r = rng(23);
    let (mut analytic, mut fd) = (Vec::new(), Vec::new());
    let base = pattern(m, x);
    for (p, g) in grads.iter().enumerate() {
        let mut taken = 0;
        while taken < per_tensor {
            let i = rand::Rng::random_range(&mut r, 0..g.value().numel());
            let shifted = |delta: f64| {
                let mut params = m.params.clone();
                params[p].data_mut()[i] += delta;
                ModelState::with_params(m.arch.clone(), params, 0).unwrap()
            };
            let (plus, minus) = (shifted(1e-4), shifted(-1e-4));
            // Central differences are only meaningful on one smooth piece.
            if pattern(&plus, x) != base || pattern(&minus, x) != base {
                continue;
            }
            let eval = |mm: &ModelState| {
                no_grad(|| {
                    mse_loss(&mm.forward(&Var::constant(x.clone())).unwrap().output, &y)
                        .unwrap()
                        .item()
                        .unwrap()
                })
            };
            analytic.push(g.value().data()[i]);
            fd.push((eval(&plus) - eval(&minus)) / 2e-4);
            taken += 1;
        }
    }
    let e = rel_err(&analytic, &fd);
    assert!(e < TOL, "{}: relative error {e:e}", m.arch);
}

#[test]
fn full_size_models_sampled() {
    let m = ModelState::build(Arch::MlpFashion, 24);
    let x = uniform(&[2, 1, 28, 28], -1.0, 1.0, &mut rng(25));
    sampled_param_check(&m, &x, &[3, 7], 12);
    let m = ModelState::build(Arch::CnnCifar10, 26);
    let x = uniform(&[2, 3, 32, 32], -1.0, 1.0, &mut rng(27));
    sampled_param_check(&m, &x, &[1, 9], 12);
}

/// ∇_W of ⟨∇_x Σ tanh(Wx), r⟩, which needs the recorded first gradient.
#[test]
fn second_order_tanh() {
    let w0 = off_zero(&[3, 4], 28);
    let x = Var::leaf(off_zero(&[2, 4], 29));
    let r = Var::constant(off_zero(&[2, 4], 30));
    let f = |w: &Var| -> Var {
        let s = x.matmul_t(w, false, true).unwrap().tanh().sum();
        let gx = grad_one(&s, &x, true).unwrap();
        gx.mul(&r).unwrap().sum()
    };
    let w = Var::leaf(w0.clone());
    let analytic = grad_one(&f(&w), &w, false).unwrap().value().to_f64_vec();
    let fd = central_difference(&mut |t| f(&Var::leaf(t.clone())).item().unwrap(), &w0, 1e-4);
    assert!(rel_err(&analytic, &fd) < 1e-3);
}

/// Parameter gradient of the regularized loss on a 4-2-2 tanh MLP.
#[test]
fn second_order_gfa_penalty() {
    let m = mlp(&[4, 2, 2], Activation::Tanh, false, 31);
    let x = off_zero(&[3, 4], 32);
    let y = one_hot::<f64>(&[0, 1, 1], 2).unwrap();
    let cfg = GfaConfig::with_layers(2, &[0, 1], &[1.0, 0.5]).unwrap();
    let loss_at = |params: &[Tensor], tracked: bool| -> (Var, Vec<Var>) {
        let leaves: Vec<Var> = params
            .iter()
            .map(|t| {
                if tracked {
                    Var::leaf(t.clone())
                } else {
                    Var::constant(t.clone())
                }
            })
            .collect();
        let trace = m.forward_with(&leaves, &Var::leaf(x.clone())).unwrap();
        (
            total_loss(&trace, &Var::constant(y.clone()), &cfg).unwrap().total,
            leaves,
        )
    };
    let (total, leaves) = loss_at(&m.params, true);
    let grads = grad(&total, &leaves, false).unwrap();
    for p in 0..m.params.len() {
        let analytic = grads[p].value().to_f64_vec();
        let fd = central_difference(
            &mut |t| {
                let mut ps = m.params.clone();
                ps[p] = t.clone();
                loss_at(&ps, false).0.item().unwrap()
            },
            &m.params[p],
            1e-4,
        );
        let e = rel_err(&analytic, &fd);
        assert!(e < 1e-3, "param {p}: {e:e}");
    }
}

/// Input gradient of a 3-layer tanh MLP against the explicit chain
/// `W1ᵀ D1 W2ᵀ D2 W3ᵀ ∂L/∂z3`.
#[test]
fn input_gradient_product_form() {
    let m = mlp(&[5, 4, 3, 2], Activation::Tanh, false, 33);
    let x0 = off_zero(&[1, 5], 34);
    let label = 1;
    let x = Var::leaf(x0.clone());
    let out = m.forward(&x).unwrap().output;
    let y = one_hot::<f64>(&[label], 2).unwrap();
    let loss = mse_loss(&out, &Var::constant(y.clone())).unwrap();
    let auto = grad_one(&loss, &x, false).unwrap().value().to_f64_vec();

    let mat = |t: &Tensor| -> Vec<Vec<f64>> { t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect() };
    let (w1, w2, w3) = (mat(&m.params[0]), mat(&m.params[1]), mat(&m.params[2]));
    let apply = |w: &Vec<Vec<f64>>, v: &[f64]| -> Vec<f64> {
        w.iter().map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    };
    let apply_t = |w: &Vec<Vec<f64>>, v: &[f64]| -> Vec<f64> {
        (0..w[0].len())
            .map(|j| w.iter().zip(v).map(|(r, b)| r[j] * b).sum())
            .collect()
    };
    let h1: Vec<f64> = apply(&w1, x0.data()).iter().map(|v| v.tanh()).collect();
    let h2: Vec<f64> = apply(&w2, &h1).iter().map(|v| v.tanh()).collect();
    let z3 = apply(&w3, &h2);
    let dz3: Vec<f64> = z3.iter().zip(y.data()).map(|(z, t)| 2.0 * (z - t) / 2.0).collect();
    let d2: Vec<f64> = apply_t(&w3, &dz3)
        .iter()
        .zip(&h2)
        .map(|(g, h)| g * (1.0 - h * h))
        .collect();
    let d1: Vec<f64> = apply_t(&w2, &d2)
        .iter()
        .zip(&h1)
        .map(|(g, h)| g * (1.0 - h * h))
        .collect();
    let explicit = apply_t(&w1, &d1);
    for (a, b) in auto.iter().zip(&explicit) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}
