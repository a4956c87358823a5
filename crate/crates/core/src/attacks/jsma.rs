use serde::{Deserialize, Serialize};

use super::{AttackResult, Oracle, TargetSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JsmaConfig {
    /// Change applied to the chosen feature per iteration.
    pub theta: f64,
    /// Cap on the fraction of features that may be modified.
    pub max_modified_fraction: f64,
    pub target: TargetSpec,
}

impl Default for JsmaConfig {
    fn default() -> Self {
        Self {
            theta: 1.0,
            max_modified_fraction: 0.1,
            target: TargetSpec::Untargeted,
        }
    }
}

impl JsmaConfig {
    fn validate(&self) -> Result<()> {
        if !(self.max_modified_fraction > 0.0 && self.max_modified_fraction <= 1.0) {
            return Err(Error::invalid("jsma", "max_modified_fraction must be in (0, 1]"));
        }
        if !(self.theta > 0.0) {
            return Err(Error::invalid("jsma", "theta must be positive"));
        }
        Ok(())
    }

    /// Largest number of distinct features one sample may touch.
    pub fn budget(&self, features: usize) -> usize {
        (self.max_modified_fraction * features as f64).floor() as usize
    }
}

/// Saliency `∂Z_t/∂x_j − Σ_{k≠t} ∂Z_k/∂x_j` for one sample's Jacobian rows.
pub fn saliency<S: Scalar>(jac: &[S], classes: usize, target: usize) -> Vec<S> {
    let n = jac.len() / classes;
    (0..n)
        .map(|j| {
            let own = jac[target * n + j];
            let others: S = (0..classes).filter(|&k| k != target).map(|k| jac[k * n + j]).sum();
            own - others
        })
        .collect()
}

struct Run<S> {
    adv: Vec<S>,
    modified: usize,
    success: bool,
    iterations: usize,
}

/// Targeted JSMA over a batch with one target per row.
fn jsma_targeted<S: Scalar>(
    oracle: &Oracle<'_, S>,
    x: &Tensor<S>,
    labels: &[usize],
    targets: &[usize],
    cfg: &JsmaConfig,
) -> Result<Vec<Run<S>>> {
    let b = x.rows();
    let n = x.row_len();
    let classes = oracle.classes();
    let theta = S::of(cfg.theta);
    let budget = cfg.budget(n);
    // A feature saturates after at most ceil(2/θ) moves across the box.
    let cap = budget * (2.0 / cfg.theta).ceil().max(1.0) as usize + 1;
    let one = S::one();

    let mut runs: Vec<Run<S>> = (0..b)
        .map(|s| Run {
            adv: x.data()[s * n..(s + 1) * n].to_vec(),
            modified: 0,
            success: false,
            iterations: 0,
        })
        .collect();
    let mut touched = vec![vec![false; n]; b];
    let mut active: Vec<usize> = (0..b).collect();

    for _ in 0..=cap {
        if active.is_empty() {
            break;
        }
        let rows: Vec<S> = active.iter().flat_map(|&s| runs[s].adv.iter().copied()).collect();
        let mut shape = x.shape().to_vec();
        shape[0] = active.len();
        let (z, jac) = oracle.jacobian(&Tensor::new(shape, rows)?)?;
        let pred = z.argmax_rows();
        let mut still = Vec::new();
        for (a, &s) in active.iter().enumerate() {
            if pred[a] != labels[s] {
                runs[s].success = true;
                continue;
            }
            if runs[s].iterations >= cap {
                continue;
            }
            let t = targets[s];
            let js = &jac.data()[a * classes * n..(a + 1) * classes * n];
            let sal = saliency(js, classes, t);
            let run = &mut runs[s];
            let open = run.modified < budget;
            let mut pick: Option<usize> = None;
            for j in 0..n {
                let dir = js[t * n + j];
                let v = run.adv[j];
                let saturated = dir == S::zero() || (dir > S::zero() && v >= one) || (dir < S::zero() && v <= -one);
                if saturated || !(open || touched[s][j]) {
                    continue;
                }
                if pick.is_none_or(|p| sal[j] > sal[p]) {
                    pick = Some(j);
                }
            }
            let Some(j) = pick else { continue };
            let dir = if js[t * n + j] > S::zero() { one } else { -one };
            run.adv[j] = (run.adv[j] + theta * dir).max(-one).min(one);
            if !touched[s][j] {
                touched[s][j] = true;
                run.modified += 1;
            }
            run.iterations += 1;
            still.push(s);
        }
        active = still;
    }
    Ok(runs)
}

/// JSMA. Untargeted runs try every other class and keep the success with
/// the fewest modified features (ties go to the lower class); samples with no
/// success keep the run for their first candidate.
pub fn jsma<S: Scalar>(
    oracle: &Oracle<'_, S>,
    x: &Tensor<S>,
    labels: &[usize],
    cfg: &JsmaConfig,
) -> Result<AttackResult<S>> {
    cfg.validate()?;
    let b = x.rows();
    let n = x.row_len();
    let classes = oracle.classes();
    let per_sample: Vec<Vec<usize>> = labels.iter().map(|&l| cfg.target.candidates(l, classes)).collect();
    let rounds = per_sample.iter().map(Vec::len).max().unwrap_or(0);
    let mut chosen: Vec<Option<Run<S>>> = (0..b).map(|_| None).collect();

    for round in 0..rounds {
        let targets: Vec<usize> = per_sample.iter().map(|c| c[round.min(c.len() - 1)]).collect();
        let runs = jsma_targeted(oracle, x, labels, &targets, cfg)?;
        for (s, run) in runs.into_iter().enumerate() {
            let better = match &chosen[s] {
                None => true,
                Some(prev) => run.success && (!prev.success || run.modified < prev.modified),
            };
            if better {
                chosen[s] = Some(run);
            }
        }
    }

    let mut adv = x.data().to_vec();
    let mut iterations = vec![0; b];
    for (s, run) in chosen.into_iter().enumerate() {
        if let Some(run) = run {
            adv[s * n..(s + 1) * n].copy_from_slice(&run.adv);
            iterations[s] = run.iterations;
        }
    }
    oracle.finish(x, labels, Tensor::new(x.shape().to_vec(), adv)?, iterations)
}
