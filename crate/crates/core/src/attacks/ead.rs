//! Elastic-net attack (EAD) solved with ISTA, and its β = 0 special case,
//! the C&W-L2 attack by projected gradient descent.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{AttackResult, Oracle, TargetSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rule for picking the best successful iterate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EadDecision {
    /// Smallest `β‖δ‖₁ + ‖δ‖₂²`.
    #[default]
    En,
    /// Smallest `‖δ‖₁`.
    L1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EadConfig {
    /// Weight of the margin loss.
    pub c: f64,
    /// L1 coefficient; 0 gives C&W-L2.
    pub beta_ead: f64,
    /// Confidence margin κ.
    pub kappa: f64,
    pub ista_step: f64,
    pub iterations: usize,
    pub target: TargetSpec,
    pub decision: EadDecision,
}

impl Default for EadConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            beta_ead: 0.01,
            kappa: 0.0,
            ista_step: 0.01,
            iterations: 200,
            target: TargetSpec::Untargeted,
            decision: EadDecision::En,
        }
    }
}

impl EadConfig {
    fn validate(&self) -> Result<()> {
        if !(self.beta_ead >= 0.0) {
            return Err(Error::invalid("ead", "beta_ead must be non-negative"));
        }
        if !(self.ista_step > 0.0) {
            return Err(Error::invalid("ead", "ista_step must be positive"));
        }
        Ok(())
    }
}

/// Projected shrinkage-thresholding around `x0` on the `[-1, 1]` box:
/// `min(z − β, 1)` above the band, `x0` inside it, `max(z + β, −1)` below.
pub fn shrinkage<S: Scalar>(z: S, x0: S, beta: S) -> S {
    let one = S::one();
    if z - x0 > beta {
        (z - beta).min(one)
    } else if z - x0 < -beta {
        (z + beta).max(-one)
    } else {
        x0
    }
}

/// Logits at `x` and `c·∇_x Σ_i f(x_i, t_i) + 2(x − x0)` with the margin
/// loss `f = max(max_{j≠t} Z_j − Z_t, −κ)`.
fn objective_gradient<S: Scalar>(
    oracle: &Oracle<'_, S>,
    x: &Tensor<S>,
    x0: &Tensor<S>,
    targets: &[usize],
    cfg: &EadConfig,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let classes = oracle.classes();
    let b = targets.len();
    let kappa = S::of(cfg.kappa);
    let (logits, g) = oracle.input_gradient(x, |z| {
        let zv = z.value().data();
        let mut other = Vec::with_capacity(b);
        let mut own = Vec::with_capacity(b);
        for (i, &t) in targets.iter().enumerate() {
            let row = &zv[i * classes..(i + 1) * classes];
            let mut best: Option<usize> = None;
            for j in (0..classes).filter(|&j| j != t) {
                if best.is_none_or(|bj| row[j] > row[bj]) {
                    best = Some(j);
                }
            }
            other.push(i * classes + best.unwrap_or(t));
            own.push(i * classes + t);
        }
        let margin = z.gather(Arc::new(other), &[b])?.sub(&z.gather(Arc::new(own), &[b])?)?;
        Ok(margin.clamp_min(-kappa).sum())
    })?;
    let c = S::of(cfg.c);
    let two = S::one() + S::one();
    let total = g.scale(c).add(&x.sub(x0)?.scale(two))?;
    Ok((logits, total))
}

fn check_targets(targets: &[usize], classes: usize, rows: usize) -> Result<()> {
    if targets.len() != rows || targets.iter().any(|&t| t >= classes) {
        return Err(Error::invalid("ead", "one in-range target class per row required"));
    }
    Ok(())
}

/// Calls `visit(k, x^k, logits(x^k))` for k = 0..iterations, applying
/// `prox` after every gradient step.
fn iterate<S: Scalar>(
    oracle: &Oracle<'_, S>,
    x0: &Tensor<S>,
    targets: &[usize],
    cfg: &EadConfig,
    prox: impl Fn(&Tensor<S>) -> Result<Tensor<S>>,
    mut visit: impl FnMut(usize, &Tensor<S>, &Tensor<S>) -> Result<()>,
) -> Result<Tensor<S>> {
    cfg.validate()?;
    check_targets(targets, oracle.classes(), x0.rows())?;
    let step = S::of(cfg.ista_step);
    let mut xk = x0.clone();
    for k in 0..cfg.iterations {
        let (logits, g) = objective_gradient(oracle, &xk, x0, targets, cfg)?;
        visit(k, &xk, &logits)?;
        xk = prox(&xk.sub(&g.scale(step))?)?;
    }
    Ok(xk)
}

/// ISTA iterates `x^1..x^K` of the targeted elastic-net attack.
pub fn eaden_path<S: Scalar>(
    oracle: &Oracle<'_, S>,
    x0: &Tensor<S>,
    targets: &[usize],
    cfg: &EadConfig,
) -> Result<Vec<Tensor<S>>> {
    let beta = S::of(cfg.beta_ead);
    let mut path = Vec::new();
    let last = iterate(
        oracle,
        x0,
        targets,
        cfg,
        |z| z.zip_map(x0, "shrinkage", |z, x| shrinkage(z, x, beta)),
        |k, xk, _| {
            if k > 0 {
                path.push(xk.clone());
            }
            Ok(())
        },
    )?;
    if cfg.iterations > 0 {
        path.push(last);
    }
    Ok(path)
}

/// Projected-gradient iterates `x^1..x^K` of the targeted C&W-L2 attack
/// with the same margin loss; `beta_ead` is ignored.
pub fn cw_l2_path<S: Scalar>(
    oracle: &Oracle<'_, S>,
    x0: &Tensor<S>,
    targets: &[usize],
    cfg: &EadConfig,
) -> Result<Vec<Tensor<S>>> {
    let one = S::one();
    let mut path = Vec::new();
    let last = iterate(
        oracle,
        x0,
        targets,
        cfg,
        |z| Ok(z.map(|v| v.max(-one).min(one))),
        |k, xk, _| {
            if k > 0 {
                path.push(xk.clone());
            }
            Ok(())
        },
    )?;
    if cfg.iterations > 0 {
        path.push(last);
    }
    Ok(path)
}

/// EAD attack. For each candidate target, runs ISTA and keeps, per sample,
/// the successful (prediction ≠ true label) iterate with the smallest
/// decision distance over all targets. Samples with no success keep the
/// final iterate of their first target.
pub fn ead_attack<S: Scalar>(
    oracle: &Oracle<'_, S>,
    x0: &Tensor<S>,
    labels: &[usize],
    cfg: &EadConfig,
) -> Result<AttackResult<S>> {
    let b = x0.rows();
    let n = x0.row_len();
    let classes = oracle.classes();
    let beta = S::of(cfg.beta_ead);
    let per_sample: Vec<Vec<usize>> = labels.iter().map(|&l| cfg.target.candidates(l, classes)).collect();
    let rounds = per_sample.iter().map(Vec::len).max().unwrap_or(0);

    let mut best: Vec<Option<(f64, Vec<S>, usize)>> = vec![None; b];
    let mut fallback: Option<Tensor<S>> = None;
    let distance = |delta: &[S]| -> f64 {
        let l1: f64 = delta.iter().map(|d| d.f64().abs()).sum();
        match cfg.decision {
            EadDecision::En => cfg.beta_ead * l1 + delta.iter().map(|d| d.f64().powi(2)).sum::<f64>(),
            EadDecision::L1 => l1,
        }
    };

    for round in 0..rounds {
        // Samples with fewer candidates repeat their last one.
        let targets: Vec<usize> = per_sample.iter().map(|c| c[round.min(c.len() - 1)]).collect();
        let mut consider = |k: usize, xk: &Tensor<S>, logits: &Tensor<S>| -> Result<()> {
            let pred = logits.argmax_rows();
            for s in 0..b {
                if pred[s] == labels[s] {
                    continue;
                }
                let row = &xk.data()[s * n..(s + 1) * n];
                let delta: Vec<S> = row
                    .iter()
                    .zip(&x0.data()[s * n..(s + 1) * n])
                    .map(|(&a, &c)| a - c)
                    .collect();
                let d = distance(&delta);
                if best[s].as_ref().is_none_or(|(bd, _, _)| d < *bd) {
                    best[s] = Some((d, row.to_vec(), k));
                }
            }
            Ok(())
        };
        let last = iterate(
            oracle,
            x0,
            &targets,
            cfg,
            |z| z.zip_map(x0, "shrinkage", |z, x| shrinkage(z, x, beta)),
            &mut consider,
        )?;
        let logits = oracle.logits(&last)?;
        consider(cfg.iterations, &last, &logits)?;
        if round == 0 {
            fallback = Some(last);
        }
    }

    let fallback = fallback.unwrap_or_else(|| x0.clone());
    let mut adv = fallback.data().to_vec();
    let mut iterations = vec![cfg.iterations; b];
    for (s, found) in best.into_iter().enumerate() {
        if let Some((_, row, k)) = found {
            adv[s * n..(s + 1) * n].copy_from_slice(&row);
            iterations[s] = k;
        }
    }
    let adv = Tensor::new(x0.shape().to_vec(), adv)?;
    oracle.finish(x0, labels, adv, iterations)
}
