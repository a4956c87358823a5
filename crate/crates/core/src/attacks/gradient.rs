use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{clamp_unit, normalize_rows, project_l2, project_linf, AttackResult, Oracle};
use crate::autodiff::sign_tensor;
use crate::error::{Error, Result};
use crate::nn::one_hot;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientKind {
    Fgsm,
    Ffgsm,
    Bim,
    Pgd,
    Pgdl2,
    Mifgsm,
    Nifgsm,
    Eotpgd,
}

impl GradientKind {
    pub const ALL: [GradientKind; 8] = [
        GradientKind::Fgsm,
        GradientKind::Ffgsm,
        GradientKind::Bim,
        GradientKind::Pgd,
        GradientKind::Pgdl2,
        GradientKind::Mifgsm,
        GradientKind::Nifgsm,
        GradientKind::Eotpgd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradientKind::Fgsm => "fgsm",
            GradientKind::Ffgsm => "ffgsm",
            GradientKind::Bim => "bim",
            GradientKind::Pgd => "pgd",
            GradientKind::Pgdl2 => "pgdl2",
            GradientKind::Mifgsm => "mifgsm",
            GradientKind::Nifgsm => "nifgsm",
            GradientKind::Eotpgd => "eotpgd",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    fn is_single_step(self) -> bool {
        matches!(self, GradientKind::Fgsm | GradientKind::Ffgsm)
    }
}

/// Settings shared by the gradient-sign family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: GradientKind,
    /// L∞ radius (L2 radius for PGDL2), in input units where inputs span
    /// `[-1, 1]`.
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    /// μ for MIFGSM / NIFGSM.
    pub momentum_decay: f64,
    pub eot_samples: usize,
    /// Standard deviation of the Gaussian input noise EOTPGD averages over.
    pub eot_noise: f64,
    pub random_start: bool,
    pub seed: u64,
}

impl AttackConfig {
    /// Single-point defaults: 10 iterations of size ε/4, μ = 1, four EOT
    /// samples, random start for PGD only. FFGSM takes one step of 1.25·ε
    /// from its random start.
    pub fn new(kind: GradientKind, epsilon: f64) -> Self {
        Self {
            kind,
            epsilon,
            step_size: if kind == GradientKind::Ffgsm {
                1.25 * epsilon
            } else {
                epsilon / 4.0
            },
            iterations: 10,
            momentum_decay: 1.0,
            eot_samples: 4,
            eot_noise: 0.05,
            random_start: kind == GradientKind::Pgd,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid("attack config", format!("{}: {msg}", self.kind.name())));
        if !(self.epsilon >= 0.0) {
            return bad("epsilon must be non-negative");
        }
        if self.kind != GradientKind::Fgsm && !(self.step_size > 0.0) && self.epsilon > 0.0 {
            return bad("step_size must be positive");
        }
        if !self.kind.is_single_step() && self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.kind == GradientKind::Eotpgd && self.eot_samples == 0 {
            return bad("eot_samples must be at least 1");
        }
        if !(self.eot_noise >= 0.0) {
            return bad("eot_noise must be non-negative");
        }
        Ok(())
    }
}

fn uniform_start<S: Scalar>(x: &Tensor<S>, eps: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    if eps == 0.0 {
        return x.clone();
    }
    let noisy: Vec<S> = x
        .data()
        .iter()
        .map(|&v| v + S::of(rng.random_range(-eps..=eps)))
        .collect();
    clamp_unit(&Tensor::new(x.shape().to_vec(), noisy).expect("same shape"))
}

/// Uniform radius along a Gaussian direction, per row.
fn l2_start<S: Scalar>(x: &Tensor<S>, eps: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<S>> {
    let n = x.row_len();
    let mut delta: Vec<S> = (0..x.numel()).map(|_| S::of(StandardNormal.sample(rng))).collect();
    for row in delta.chunks_mut(n) {
        let norm = row
            .iter()
            .map(|&d| d * d)
            .sum::<S>()
            .sqrt()
            .max(S::min_positive_value());
        let r = S::of(rng.random::<f64>() * eps);
        row.iter_mut().for_each(|d| *d = *d / norm * r);
    }
    Ok(clamp_unit(&x.add(&Tensor::new(x.shape().to_vec(), delta)?)?))
}

/// One shared loop for the whole family: gradient (with per-kind lookahead
/// or averaging), direction (sign, momentum sign or L2-normalized), step,
/// projection.
pub fn gradient_attack<S: Scalar>(
    oracle: &Oracle<'_, S>,
    x: &Tensor<S>,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AttackResult<S>> {
    cfg.validate()?;
    let targets = one_hot::<S>(labels, oracle.classes())?;
    let eps = S::of(cfg.epsilon);
    let alpha = S::of(cfg.step_size);
    let mu = S::of(cfg.momentum_decay);

    let (adv, iters) = match cfg.kind {
        GradientKind::Fgsm => {
            let g = oracle.loss_gradient(x, &targets)?;
            (clamp_unit(&x.add(&sign_tensor(&g).scale(eps))?), 1)
        }
        GradientKind::Ffgsm => {
            let start = uniform_start(x, cfg.epsilon, rng);
            let g = oracle.loss_gradient(&start, &targets)?;
            let stepped = start.add(&sign_tensor(&g).scale(alpha))?;
            (project_linf(&stepped, x, eps)?, 1)
        }
        kind => {
            let l2 = kind == GradientKind::Pgdl2;
            let mut xt = match (cfg.random_start, l2) {
                (false, _) => x.clone(),
                (true, false) => uniform_start(x, cfg.epsilon, rng),
                (true, true) => l2_start(x, cfg.epsilon, rng)?,
            };
            let mut momentum = Tensor::zeros(x.shape());
            for _ in 0..cfg.iterations {
                let g = match kind {
                    GradientKind::Nifgsm => {
                        let ahead = xt.add(&momentum.scale(alpha * mu))?;
                        oracle.loss_gradient(&ahead, &targets)?
                    }
                    GradientKind::Eotpgd => {
                        let mut acc = Tensor::zeros(x.shape());
                        for _ in 0..cfg.eot_samples {
                            let probe = if cfg.eot_noise > 0.0 {
                                let noisy: Vec<S> = xt
                                    .data()
                                    .iter()
                                    .map(|&v| {
                                        let z: f64 = StandardNormal.sample(rng);
                                        v + S::of(z * cfg.eot_noise)
                                    })
                                    .collect();
                                Tensor::new(xt.shape().to_vec(), noisy)?
                            } else {
                                xt.clone()
                            };
                            acc = acc.add(&oracle.loss_gradient(&probe, &targets)?)?;
                        }
                        acc.scale(S::one() / S::of(cfg.eot_samples as f64))
                    }
                    _ => oracle.loss_gradient(&xt, &targets)?,
                };
                let direction = match kind {
                    GradientKind::Mifgsm | GradientKind::Nifgsm => {
                        momentum = momentum.scale(mu).add(&normalize_rows(&g, 1))?;
                        sign_tensor(&momentum)
                    }
                    GradientKind::Pgdl2 => normalize_rows(&g, 2),
                    _ => sign_tensor(&g),
                };
                let stepped = xt.add(&direction.scale(alpha))?;
                xt = if l2 {
                    project_l2(&stepped, x, eps)?
                } else {
                    project_linf(&stepped, x, eps)?
                };
            }
            (xt, cfg.iterations)
        }
    };
    oracle.finish(x, labels, adv, vec![iters; labels.len()])
}
