//! Input-space diagnostics: how the loss gradient at `x` splits into a
//! radial part (along `x`) and a tangential part, and 2-D loss landscapes
//! around a sample.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attacks::{chunk_rng, gradient_attack, AttackConfig, Oracle};
use crate::autodiff::{grad_one, no_grad, Var};
use crate::error::{Error, Result};
use crate::gfa::EPSILON_DENOM;
use crate::nn::{mse_loss, one_hot, ModelState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialTangentialReport {
    /// `⟨∇L, x⟩ / ⟨x, x⟩`.
    pub radial_coefficient: f64,
    /// `⟨∇L, x/‖x‖⟩`.
    pub radial_derivative: f64,
    /// Largest `|⟨∇L, δ⟩|` over the sampled unit directions `δ ⊥ x`.
    pub tangential_derivative_max: f64,
    /// Cosine between `x` and `∇L`.
    pub alignment: f64,
    pub grad_norm: f64,
}

impl RadialTangentialReport {
    /// Upper bound on any tangential derivative implied by the alignment:
    /// with `alignment = 1 − τ`, `‖∇L‖·sqrt(2τ − τ²)`.
    pub fn tangential_bound(&self) -> f64 {
        let tau = 1.0 - self.alignment;
        self.grad_norm * (2.0 * tau - tau * tau).max(0.0).sqrt()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `n` random unit vectors orthogonal to `x`: Gaussian draws with the `x`
/// component removed twice (one Gram–Schmidt pass is not enough in floating
/// point when a draw is nearly parallel to `x`). Draws that vanish after
/// projection, which only happens when `x` spans the space, are skipped.
pub fn tangent_directions(x: &[f64], n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let xn = norm(x);
    if !(xn > 0.0) {
        return Err(Error::invalid("decompose", "radial direction undefined at x = 0"));
    }
    let u: Vec<f64> = x.iter().map(|v| v / xn).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut r: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let r0 = norm(&r);
        for _ in 0..2 {
            let c = dot(&r, &u);
            r.iter_mut().zip(&u).for_each(|(r, u)| *r -= c * u);
        }
        let rn = norm(&r);
        if rn <= 1e-9 * r0 {
            continue;
        }
        r.iter_mut().for_each(|v| *v /= rn);
        out.push(r);
    }
    Ok(out)
}

/// Splits the gradient `g` observed at `x` into its radial and tangential
/// parts, probing the tangent space with `n` random directions.
pub fn decompose_gradient(x: &[f64], g: &[f64], n: usize, seed: u64) -> Result<RadialTangentialReport> {
    if x.len() != g.len() {
        return Err(Error::shape("decompose", &[x.len()], &[g.len()]));
    }
    let tangents = tangent_directions(x, n, seed)?;
    let (xn, gn) = (norm(x), norm(g));
    let xg = dot(x, g);
    let tangential_derivative_max = tangents.iter().map(|d| dot(g, d).abs()).fold(0.0, f64::max);
    Ok(RadialTangentialReport {
        radial_coefficient: xg / (xn * xn),
        radial_derivative: xg / xn,
        tangential_derivative_max,
        alignment: xg / (xn.max(EPSILON_DENOM) * gn.max(EPSILON_DENOM)),
        grad_norm: gn,
    })
}

/// Task loss `mean_c (z_c − y_c)²` of each row.
pub fn per_sample_loss<S: Scalar>(model: &ModelState<S>, x: &Tensor<S>, label: usize) -> Result<Vec<f64>> {
    let classes = model.classes();
    let z = model.logits(x)?;
    let c = S::of(classes as f64);
    Ok(z.data()
        .chunks(classes)
        .map(|row| {
            let sq: S = row
                .iter()
                .enumerate()
                .map(|(j, &v)| {
                    let t = if j == label { v - S::one() } else { v };
                    t * t
                })
                .sum();
            (sq / c).f64()
        })
        .collect())
}

/// Gradient of the task loss of a single sample `x` (shape `[1, ...]`).
pub fn input_gradient<S: Scalar>(model: &ModelState<S>, x: &Tensor<S>, label: usize) -> Result<Tensor<S>> {
    if x.rows() != 1 {
        return Err(Error::invalid("input_gradient", "expected a single sample"));
    }
    let xv = Var::leaf(x.clone());
    let trace = model.forward(&xv)?;
    let y = Var::constant(one_hot::<S>(&[label], model.classes())?);
    let loss = mse_loss(&trace.output, &y)?;
    Ok(grad_one(&loss, &xv, false)?.value().clone())
}

/// [`decompose_gradient`] applied to the task-loss gradient of one sample.
pub fn decompose<S: Scalar>(
    model: &ModelState<S>,
    x: &Tensor<S>,
    label: usize,
    n_tangent: usize,
    seed: u64,
) -> Result<RadialTangentialReport> {
    let g = input_gradient(model, x, label)?;
    decompose_gradient(&x.to_f64_vec(), &g.to_f64_vec(), n_tangent, seed)
}

/// Two unit-norm input-space directions, each with a provenance label.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionPair<S: Scalar> {
    pub d1: Tensor<S>,
    pub d2: Tensor<S>,
    pub labels: [String; 2],
}

impl<S: Scalar> DirectionPair<S> {
    /// Normalizes both directions; zero directions are rejected.
    pub fn new(d1: Tensor<S>, d2: Tensor<S>, labels: [String; 2]) -> Result<Self> {
        if d1.shape() != d2.shape() {
            return Err(Error::shape("direction pair", d1.shape(), d2.shape()));
        }
        let unit = |d: Tensor<S>, which: &str| -> Result<Tensor<S>> {
            let n = d.to_f64_vec().iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 0.0) {
                return Err(Error::invalid("direction pair", format!("{which} is zero")));
            }
            Ok(d.map(|v| S::of(v.f64() / n)))
        };
        Ok(Self {
            d1: unit(d1, "d1")?,
            d2: unit(d2, "d2")?,
            labels,
        })
    }

    /// PGD perturbation directions `adv − x` against two models.
    pub fn from_pgd(
        first: (&ModelState<S>, &str),
        second: (&ModelState<S>, &str),
        x: &Tensor<S>,
        label: usize,
        cfg: &AttackConfig,
    ) -> Result<Self> {
        let direction = |m: &ModelState<S>| -> Result<Tensor<S>> {
            let mut rng = chunk_rng(cfg.seed, 0);
            let r = gradient_attack(&Oracle::new(m), x, &[label], cfg, &mut rng)?;
            r.adv.sub(x)
        };
        Self::new(
            direction(first.0)?,
            direction(second.0)?,
            [format!("pgd:{}", first.1), format!("pgd:{}", second.1)],
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    /// Coefficients of `d1`, one per grid row.
    pub a: Vec<f64>,
    /// Coefficients of `d2`, one per grid column.
    pub b: Vec<f64>,
    /// `loss[i][j] = L(x + a_i·d1 + b_j·d2)`.
    pub loss: Vec<Vec<f64>>,
    pub center_loss: f64,
}

/// `resolution` evenly spaced points from `lo` to `hi` inclusive.
pub fn axis(lo: f64, hi: f64, resolution: usize) -> Vec<f64> {
    let last = (resolution - 1) as f64;
    (0..resolution)
        .map(|i| {
            let t = i as f64 / last;
            lo * (1.0 - t) + hi * t
        })
        .collect()
}

/// Task loss on the grid `x + a·d1 + b·d2`; perturbed inputs are not
/// clamped. Rows are evaluated on up to `threads` workers.
pub fn landscape<S: Scalar>(
    model: &ModelState<S>,
    x: &Tensor<S>,
    label: usize,
    pair: &DirectionPair<S>,
    range: (f64, f64),
    resolution: usize,
    threads: usize,
) -> Result<LandscapeGrid> {
    if resolution < 2 {
        return Err(Error::invalid("landscape", "resolution must be at least 2"));
    }
    if x.rows() != 1 || x.shape() != pair.d1.shape() {
        return Err(Error::shape("landscape", x.shape(), pair.d1.shape()));
    }
    let coeffs = axis(range.0, range.1, resolution);
    let n = x.numel();
    let row = |i: usize| -> Result<Vec<f64>> {
        let a = S::of(coeffs[i]);
        let mut batch = Vec::with_capacity(n * resolution);
        for &b in &coeffs {
            let b = S::of(b);
            batch.extend(
                x.data()
                    .iter()
                    .zip(pair.d1.data())
                    .zip(pair.d2.data())
                    .map(|((&x, &d1), &d2)| x + a * d1 + b * d2),
            );
        }
        let mut shape = x.shape().to_vec();
        shape[0] = resolution;
        no_grad(|| per_sample_loss(model, &Tensor::new(shape, batch)?, label))
    };
    let loss = crate::parallel::map_ordered(resolution, threads, row)?;
    let center_loss = no_grad(|| per_sample_loss(model, x, label))?[0];
    Ok(LandscapeGrid {
        a: coeffs.clone(),
        b: coeffs,
        loss,
        center_loss,
    })
}

/// Mean absolute deviation of the grid from its center loss.
pub fn flatness_score(grid: &LandscapeGrid) -> f64 {
    let cells = grid.loss.iter().map(Vec::len).sum::<usize>();
    if cells == 0 {
        return 0.0;
    }
    let dev: f64 = grid.loss.iter().flatten().map(|v| (v - grid.center_loss).abs()).sum();
    dev / cells as f64
}

impl LandscapeGrid {
    /// Header row of `b` coefficients, then one row per `a` coefficient.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "a\\b")?;
        for b in &self.b {
            write!(w, ",{b}")?;
        }
        writeln!(w)?;
        for (a, row) in self.a.iter().zip(&self.loss) {
            write!(w, "{a}")?;
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}
