use serde::{Deserialize, Serialize};

use super::{AttackResult, Oracle};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeepFoolConfig {
    pub max_iterations: usize,
    /// The accumulated step is scaled by `1 + overshoot`.
    pub overshoot: f64,
}

impl Default for DeepFoolConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            overshoot: 0.02,
        }
    }
}

/// Minimal-L2 DeepFool. Each iteration linearizes every logit at the
/// current point, moves to the nearest linearized boundary between the true
/// class `k` and some `j`, and stops once the prediction leaves `k`.
///
/// Samples that are already misclassified get a zero perturbation and zero
/// iterations.
pub fn deepfool<S: Scalar>(
    oracle: &Oracle<'_, S>,
    x: &Tensor<S>,
    labels: &[usize],
    cfg: &DeepFoolConfig,
) -> Result<AttackResult<S>> {
    if !(cfg.overshoot >= 0.0) {
        return Err(Error::invalid("deepfool", "overshoot must be non-negative"));
    }
    let b = x.rows();
    let n = x.row_len();
    let classes = oracle.classes();
    let scale = S::one() + S::of(cfg.overshoot);
    let mut adv = x.clone();
    let mut r_tot = vec![S::zero(); b * n];
    let mut iterations = vec![0usize; b];
    let mut active: Vec<usize> = (0..b).collect();

    for _ in 0..cfg.max_iterations {
        if active.is_empty() {
            break;
        }
        let xa = adv.select_rows(&active)?;
        let (z, jac) = oracle.jacobian(&xa)?;
        let (z, jac) = (z.data(), jac.data());
        let mut still = Vec::with_capacity(active.len());
        for (a, &s) in active.iter().enumerate() {
            let k = labels[s];
            let zs = &z[a * classes..(a + 1) * classes];
            if argmax(zs) != k {
                continue;
            }
            let jk = &jac[(a * classes + k) * n..(a * classes + k + 1) * n];
            let mut best: Option<(S, usize, S)> = None;
            for j in (0..classes).filter(|&j| j != k) {
                let jj = &jac[(a * classes + j) * n..(a * classes + j + 1) * n];
                let w2: S = jj.iter().zip(jk).map(|(&p, &q)| (p - q) * (p - q)).sum();
                if w2 <= S::zero() {
                    continue;
                }
                let f = (zs[j] - zs[k]).abs();
                let dist = f / w2.sqrt();
                if best.is_none_or(|(d, _, _)| dist < d) {
                    best = Some((dist, j, f / w2));
                }
            }
            let Some((_, j, coef)) = best else { continue };
            let jj = &jac[(a * classes + j) * n..(a * classes + j + 1) * n];
            let rt = &mut r_tot[s * n..(s + 1) * n];
            let xs = &x.data()[s * n..(s + 1) * n];
            let mut row = Vec::with_capacity(n);
            for i in 0..n {
                rt[i] += coef * (jj[i] - jk[i]);
                row.push(xs[i] + scale * rt[i]);
            }
            let one = S::one();
            adv.data_mut()[s * n..(s + 1) * n]
                .iter_mut()
                .zip(row)
                .for_each(|(d, v)| *d = v.max(-one).min(one));
            iterations[s] += 1;
            still.push(s);
        }
        active = still;
    }
    oracle.finish(x, labels, adv, iterations)
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
