//! Adversarial attacks against [`ModelState`] classifiers.
//!
//! All attacks work on batches and are pure functions of their inputs and
//! seed. [`run_attack`] splits a batch into fixed-size chunks (independent
//! of the thread count) so the result is the same however many workers run.

mod deepfool;
mod ead;
mod gradient;
mod jsma;
mod one_pixel;

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, grad_one, no_grad, Var};
use crate::error::{Error, Result};
use crate::nn::ModelState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use deepfool::{deepfool, DeepFoolConfig};
pub use ead::{cw_l2_path, ead_attack, eaden_path, shrinkage, EadConfig, EadDecision};
pub use gradient::{gradient_attack, AttackConfig, GradientKind};
pub use jsma::{jsma, JsmaConfig};
pub use one_pixel::{one_pixel, OnePixelConfig};

/// Samples per work unit in [`run_attack`].
pub const CHUNK: usize = 64;

/// Target selection for targeted attacks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSpec {
    /// Try every class other than the true one and keep the least distorted
    /// success.
    #[default]
    Untargeted,
    Class(usize),
}

impl TargetSpec {
    fn candidates(self, label: usize, classes: usize) -> Vec<usize> {
        match self {
            TargetSpec::Untargeted => (0..classes).filter(|&c| c != label).collect(),
            TargetSpec::Class(c) => vec![c],
        }
    }
}

/// Batch outcome; per-sample vectors follow the input row order.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult<S: Scalar> {
    pub adv: Tensor<S>,
    /// Prediction on `adv` differs from the true label.
    pub success: Vec<bool>,
    pub noise_mse: Vec<f64>,
    pub iterations_used: Vec<usize>,
    pub forward_calls: usize,
    pub gradient_calls: usize,
}

impl<S: Scalar> AttackResult<S> {
    pub fn accuracy(&self) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|s| !**s).count() as f64 / self.success.len() as f64
    }

    pub fn mean_noise_mse(&self) -> f64 {
        if self.noise_mse.is_empty() {
            return 0.0;
        }
        self.noise_mse.iter().sum::<f64>() / self.noise_mse.len() as f64
    }
}

/// Per-sample `mean((adv − clean)²)`; the one noise-intensity routine used
/// everywhere.
pub fn noise_mse<S: Scalar>(clean: &Tensor<S>, adv: &Tensor<S>) -> Result<Vec<f64>> {
    if clean.shape() != adv.shape() {
        return Err(Error::shape("noise_mse", clean.shape(), adv.shape()));
    }
    let n = clean.row_len();
    Ok(clean
        .data()
        .chunks(n)
        .zip(adv.data().chunks(n))
        .map(|(c, a)| c.iter().zip(a).map(|(&c, &a)| (a - c).f64().powi(2)).sum::<f64>() / n as f64)
        .collect())
}

/// Model access for attacks, counting forward and backward passes.
pub struct Oracle<'m, S: Scalar> {
    model: &'m ModelState<S>,
    forward_calls: Cell<usize>,
    gradient_calls: Cell<usize>,
}

impl<'m, S: Scalar> Oracle<'m, S> {
    pub fn new(model: &'m ModelState<S>) -> Self {
        Self {
            model,
            forward_calls: Cell::new(0),
            gradient_calls: Cell::new(0),
        }
    }

    pub fn model(&self) -> &ModelState<S> {
        self.model
    }

    pub fn classes(&self) -> usize {
        self.model.classes()
    }

    pub fn forward_calls(&self) -> usize {
        self.forward_calls.get()
    }

    pub fn gradient_calls(&self) -> usize {
        self.gradient_calls.get()
    }

    pub fn logits(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.forward_calls.set(self.forward_calls.get() + 1);
        self.model.logits(x)
    }

    pub fn predict(&self, x: &Tensor<S>) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    /// Logits and `∇_x objective(logits)`.
    pub fn input_gradient(
        &self,
        x: &Tensor<S>,
        objective: impl FnOnce(&Var<S>) -> Result<Var<S>>,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        self.forward_calls.set(self.forward_calls.get() + 1);
        self.gradient_calls.set(self.gradient_calls.get() + 1);
        let xv = Var::leaf(x.clone());
        let out = self.model.forward(&xv)?.output;
        let root = objective(&out)?;
        let g = grad_one(&root, &xv, false)?;
        Ok((out.value().clone(), g.value().clone()))
    }

    /// Gradient of `Σ_i mean_c (Z_ic − y_ic)²`, i.e. of each sample's own
    /// MSE task loss (the sum decouples the samples).
    pub fn loss_gradient(&self, x: &Tensor<S>, targets: &Tensor<S>) -> Result<Tensor<S>> {
        let classes = S::of(targets.row_len() as f64);
        let t = Var::constant(targets.clone());
        let (_, g) = self.input_gradient(x, |z| Ok(z.sub(&t)?.square().sum().scale(S::one() / classes)))?;
        Ok(g)
    }

    /// Logits `[B, C]` and Jacobian `[B, C, N]` via one backward pass per
    /// class over a shared forward graph.
    pub fn jacobian(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let classes = self.classes();
        self.forward_calls.set(self.forward_calls.get() + 1);
        self.gradient_calls.set(self.gradient_calls.get() + classes);
        let b = x.rows();
        let n = x.row_len();
        let xv = Var::leaf(x.clone());
        let out = self.model.forward(&xv)?.output;
        let mut jac = vec![S::zero(); b * classes * n];
        for c in 0..classes {
            let idx: Vec<usize> = (0..b).map(|i| i * classes + c).collect();
            let root = out.gather(idx.into(), &[b])?.sum();
            let g = grad(&root, std::slice::from_ref(&xv), false)?.remove(0);
            for (i, row) in g.value().data().chunks(n).enumerate() {
                jac[(i * classes + c) * n..(i * classes + c + 1) * n].copy_from_slice(row);
            }
        }
        Ok((out.value().clone(), Tensor::new(vec![b, classes, n], jac)?))
    }

    /// Builds the common result record: predictions on `adv`, noise and
    /// counters.
    fn finish(
        &self,
        clean: &Tensor<S>,
        labels: &[usize],
        adv: Tensor<S>,
        iterations_used: Vec<usize>,
    ) -> Result<AttackResult<S>> {
        let pred = self.predict(&adv)?;
        Ok(AttackResult {
            success: pred.iter().zip(labels).map(|(p, l)| p != l).collect(),
            noise_mse: noise_mse(clean, &adv)?,
            adv,
            iterations_used,
            forward_calls: self.forward_calls(),
            gradient_calls: self.gradient_calls(),
        })
    }
}

/// `[C, N]` Jacobian of the logits of a single input (shape without batch
/// axis) with respect to its flattened features.
pub fn jacobian<S: Scalar>(model: &ModelState<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let (_, j) = Oracle::new(model).jacobian(&x.reshape(&shape)?)?;
    let (c, n) = (j.shape()[1], j.shape()[2]);
    j.reshape(&[c, n])
}

/// Random stream for work unit `chunk` of a run seeded with `seed`.
pub fn chunk_rng(seed: u64, chunk: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk);
    rng
}

/// Any attack together with its settings.
#[derive(Clone, Debug, PartialEq)]
pub enum AttackSpec {
    Gradient(AttackConfig),
    DeepFool(DeepFoolConfig),
    Ead(EadConfig),
    Jsma(JsmaConfig),
    OnePixel(OnePixelConfig),
}

impl AttackSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::Gradient(c) => c.kind.name(),
            AttackSpec::DeepFool(_) => "deepfool",
            AttackSpec::Ead(c) if c.beta_ead == 0.0 => "cwl2",
            AttackSpec::Ead(_) => "eaden",
            AttackSpec::Jsma(_) => "jsma",
            AttackSpec::OnePixel(_) => "onepixel",
        }
    }

    /// Perturbation budget, for the attacks that have one.
    pub fn epsilon(&self) -> Option<f64> {
        match self {
            AttackSpec::Gradient(c) => Some(c.epsilon),
            _ => None,
        }
    }

    /// Runs on one chunk. `chunk` selects the random stream; `first` is the
    /// global index of the chunk's first sample.
    fn run_chunk<S: Scalar>(
        &self,
        model: &ModelState<S>,
        x: &Tensor<S>,
        labels: &[usize],
        chunk: usize,
        first: usize,
    ) -> Result<AttackResult<S>> {
        let oracle = Oracle::new(model);
        match self {
            AttackSpec::Gradient(cfg) => {
                let mut rng = chunk_rng(cfg.seed, chunk as u64);
                gradient_attack(&oracle, x, labels, cfg, &mut rng)
            }
            AttackSpec::DeepFool(cfg) => deepfool(&oracle, x, labels, cfg),
            AttackSpec::Ead(cfg) => ead_attack(&oracle, x, labels, cfg),
            AttackSpec::Jsma(cfg) => jsma(&oracle, x, labels, cfg),
            AttackSpec::OnePixel(cfg) => one_pixel(&oracle, x, labels, cfg, first),
        }
    }
}

/// Runs `spec` over every row of `x`, fanning fixed chunks out over
/// `threads` workers and merging in input order.
pub fn run_attack<S: Scalar>(
    model: &ModelState<S>,
    x: &Tensor<S>,
    labels: &[usize],
    spec: &AttackSpec,
    threads: usize,
) -> Result<AttackResult<S>> {
    let n = x.rows();
    if labels.len() != n {
        return Err(Error::invalid(
            "run_attack",
            format!("{} labels for {n} inputs", labels.len()),
        ));
    }
    let chunks = n.div_ceil(CHUNK);
    let run = |c: usize| -> Result<AttackResult<S>> {
        let (lo, hi) = (c * CHUNK, ((c + 1) * CHUNK).min(n));
        spec.run_chunk(model, &x.rows_range(lo, hi)?, &labels[lo..hi], c, lo)
    };
    let parts = crate::parallel::map_ordered(chunks, threads, run)?;
    if parts.is_empty() {
        return Ok(AttackResult {
            adv: x.clone(),
            success: vec![],
            noise_mse: vec![],
            iterations_used: vec![],
            forward_calls: 0,
            gradient_calls: 0,
        });
    }
    let advs: Vec<Tensor<S>> = parts.iter().map(|p| p.adv.clone()).collect();
    Ok(AttackResult {
        adv: Tensor::concat_rows(&advs)?,
        success: parts.iter().flat_map(|p| p.success.iter().copied()).collect(),
        noise_mse: parts.iter().flat_map(|p| p.noise_mse.iter().copied()).collect(),
        iterations_used: parts.iter().flat_map(|p| p.iterations_used.iter().copied()).collect(),
        forward_calls: parts.iter().map(|p| p.forward_calls).sum(),
        gradient_calls: parts.iter().map(|p| p.gradient_calls).sum(),
    })
}

/// Predictions computed `batch` rows at a time.
pub fn predict_batched<S: Scalar>(model: &ModelState<S>, x: &Tensor<S>, batch: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(x.rows());
    let batch = batch.max(1);
    let mut lo = 0;
    while lo < x.rows() {
        let hi = (lo + batch).min(x.rows());
        out.extend(no_grad(|| model.predict(&x.rows_range(lo, hi)?))?);
        lo = hi;
    }
    Ok(out)
}

// Row-wise helpers shared by the attack implementations.

pub(crate) fn clamp_unit<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let one = S::one();
    t.map(|v| v.max(-one).min(one))
}

/// Per-coordinate projection onto `[x−ε, x+ε] ∩ [−1, 1]`.
pub(crate) fn project_linf<S: Scalar>(v: &Tensor<S>, x: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
    let one = S::one();
    v.zip_map(x, "project_linf", |v, x| v.max(x - eps).min(x + eps).max(-one).min(one))
}

/// Row-wise projection onto the L2 ball of radius `eps` around `x`, then
/// onto `[−1, 1]`.
pub(crate) fn project_l2<S: Scalar>(v: &Tensor<S>, x: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
    let mut delta = v.sub(x)?;
    let n = delta.row_len();
    for row in delta.data_mut().chunks_mut(n) {
        let norm = row.iter().map(|&d| d * d).sum::<S>().sqrt();
        if norm > eps {
            let k = eps / norm;
            row.iter_mut().for_each(|d| *d *= k);
        }
    }
    Ok(clamp_unit(&x.add(&delta)?))
}

/// Divides each row by `max(‖row‖_p, tiny)` for p ∈ {1, 2}.
pub(crate) fn normalize_rows<S: Scalar>(t: &Tensor<S>, p: u8) -> Tensor<S> {
    let mut out = t.clone();
    let n = out.row_len();
    for row in out.data_mut().chunks_mut(n) {
        let norm = match p {
            1 => row.iter().map(|v| v.abs()).sum::<S>(),
            _ => row.iter().map(|&v| v * v).sum::<S>().sqrt(),
        };
        let norm = norm.max(S::min_positive_value());
        row.iter_mut().for_each(|v| *v /= norm);
    }
    out
}
