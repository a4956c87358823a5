//! Gradient-feature alignment: the per-layer cosine between a layer input
//! and the task-loss gradient at that input, the regularized loss built from
//! it, and the training strategies that use it.

mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, no_grad, Var};
use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::nn::{mse_loss, Arch, ForwardTrace, ModelState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use train::{train, EpochLog, LrSchedule, Optimizer, TrainConfig, TrainingLog};

/// Zero-norm guard for the cosine denominators.
pub const EPSILON_DENOM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    /// Task loss only.
    #[serde(rename = "STD")]
    Std,
    /// Task loss on a clean/PGD mix.
    #[serde(rename = "ADV")]
    Adv,
    /// Alignment penalty on the first parameterized layer.
    #[serde(rename = "FIRST")]
    First,
    /// Alignment penalty on several early layers.
    #[serde(rename = "DEEP")]
    Deep,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Std, Strategy::Adv, Strategy::First, Strategy::Deep];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Std => "STD",
            Strategy::Adv => "ADV",
            Strategy::First => "FIRST",
            Strategy::Deep => "DEEP",
        }
    }

    /// Layers that carry the alignment penalty.
    pub fn gfa_layers(self, arch: &Arch) -> Vec<usize> {
        match self {
            Strategy::Std | Strategy::Adv => vec![],
            Strategy::First => vec![0],
            Strategy::Deep => arch.deep_gfa_layers(),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid("strategy", format!("unknown strategy `{s}`")))
    }
}

/// Coefficients of the regularized loss `α·L_MSE − Σ_l β_l·GFA^(l)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GfaConfig {
    pub alpha: f64,
    /// One entry per parameterized layer.
    pub beta: Vec<f64>,
    /// Layers where `beta` is non-zero.
    pub gfa_layers: Vec<usize>,
    pub epsilon_denom: f64,
}

impl GfaConfig {
    /// Task loss only.
    pub fn plain(layers: usize) -> Self {
        Self {
            alpha: 1.0,
            beta: vec![0.0; layers],
            gfa_layers: vec![],
            epsilon_denom: EPSILON_DENOM,
        }
    }

    /// `beta_active[i]` applies to the i-th layer of `gfa_layers`.
    pub fn with_layers(layers: usize, gfa_layers: &[usize], beta_active: &[f64]) -> Result<Self> {
        if gfa_layers.len() != beta_active.len() {
            return Err(Error::invalid(
                "gfa config",
                format!(
                    "{} beta values for {} regularized layers",
                    beta_active.len(),
                    gfa_layers.len()
                ),
            ));
        }
        let mut cfg = Self::plain(layers);
        for (&l, &b) in gfa_layers.iter().zip(beta_active) {
            if l >= layers {
                return Err(Error::invalid(
                    "gfa config",
                    format!("layer {l} out of range for {layers} parameterized layers"),
                ));
            }
            cfg.beta[l] = b;
        }
        cfg.gfa_layers = gfa_layers.to_vec();
        cfg.validate(layers)?;
        Ok(cfg)
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("gfa config", msg));
        if self.beta.len() != layers {
            return bad(format!("beta has {} entries for {layers} layers", self.beta.len()));
        }
        if !(self.epsilon_denom > 0.0) {
            return bad("epsilon_denom must be positive".into());
        }
        for (l, &b) in self.beta.iter().enumerate() {
            if (b != 0.0) != self.gfa_layers.contains(&l) {
                return bad(format!(
                    "beta[{l}] = {b} disagrees with gfa_layers {:?}",
                    self.gfa_layers
                ));
            }
        }
        if let Some(&l) = self.gfa_layers.iter().find(|&&l| l >= layers) {
            return bad(format!("layer {l} out of range for {layers} parameterized layers"));
        }
        Ok(())
    }
}

/// Per-sample cosine `⟨f,g⟩ / (max(‖f‖,ε)·max(‖g‖,ε))` over flattened rows,
/// shape `[B, 1]`.
pub fn gfa_cosine_rows<S: Scalar>(feature: &Var<S>, grad: &Var<S>, epsilon_denom: S) -> Result<Var<S>> {
    if feature.shape() != grad.shape() {
        return Err(Error::shape("gfa_cosine", feature.shape(), grad.shape()));
    }
    let f = feature.flatten_rows()?;
    let g = grad.flatten_rows()?;
    let floor = epsilon_denom * epsilon_denom;
    let dot = f.mul(&g)?.sum_cols()?;
    // sqrt(max(s, ε²)) = max(sqrt(s), ε), and has a finite gradient at 0.
    let nf = f.square().sum_cols()?.clamp_min(floor).sqrt();
    let ng = g.square().sum_cols()?.clamp_min(floor).sqrt();
    dot.div(&nf.mul(&ng)?)
}

/// Batch mean of [`gfa_cosine_rows`].
pub fn gfa_cosine<S: Scalar>(feature: &Var<S>, grad: &Var<S>, epsilon_denom: S) -> Result<Var<S>> {
    Ok(gfa_cosine_rows(feature, grad, epsilon_denom)?.mean())
}

/// Pieces of the regularized loss.
pub struct LossParts<S: Scalar> {
    pub total: Var<S>,
    pub task: Var<S>,
    /// `(layer, GFA^(l))` for each active layer.
    pub gfa: Vec<(usize, Var<S>)>,
}

/// `α·L_MSE − Σ_l β_l·GFA^(l)`, where `GFA^(l)` pairs the layer input with
/// the task-loss gradient at it. The inner gradients are recorded, so the
/// result can be differentiated with respect to the parameters.
///
/// Every active layer input must be graph-tracked; for layer 0 that means
/// the model input has to be a [`Var::leaf`].
pub fn total_loss<S: Scalar>(trace: &ForwardTrace<S>, targets: &Var<S>, cfg: &GfaConfig) -> Result<LossParts<S>> {
    total_loss_scaled(trace, targets, cfg, 1.0)
}

pub(crate) fn total_loss_scaled<S: Scalar>(
    trace: &ForwardTrace<S>,
    targets: &Var<S>,
    cfg: &GfaConfig,
    beta_scale: f64,
) -> Result<LossParts<S>> {
    cfg.validate(trace.layer_inputs.len())?;
    let task = mse_loss(&trace.output, targets)?;
    let layers: Vec<usize> = cfg.gfa_layers.clone();
    let inputs: Vec<Var<S>> = layers.iter().map(|&l| trace.layer_inputs[l].clone()).collect();
    if let Some(pos) = inputs.iter().position(|v| !v.requires_grad()) {
        return Err(Error::invalid(
            "total_loss",
            format!("input of layer {} is not tracked", layers[pos]),
        ));
    }
    let grads = grad(&task, &inputs, true)?;
    let eps = S::of(cfg.epsilon_denom);
    let mut total = task.scale(S::of(cfg.alpha));
    let mut gfa = Vec::with_capacity(layers.len());
    for ((&l, h), g) in layers.iter().zip(&inputs).zip(&grads) {
        let cos = gfa_cosine(h, g, eps)?;
        total = total.sub(&cos.scale(S::of(cfg.beta[l] * beta_scale)))?;
        gfa.push((l, cos));
    }
    Ok(LossParts { total, task, gfa })
}

/// Per-layer alignment statistics over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GfaReport {
    pub per_layer_mean: Vec<f64>,
    /// Population standard deviation over samples.
    pub per_layer_std: Vec<f64>,
    pub samples: usize,
}

/// Per-sample alignment at every parameterized layer, `values[layer][sample]`.
pub fn gfa_per_sample<S: Scalar>(
    model: &ModelState<S>,
    inputs: &Tensor<S>,
    targets: &Tensor<S>,
    epsilon_denom: f64,
) -> Result<Vec<Vec<f64>>> {
    let x = Var::leaf(inputs.clone());
    let trace = model.forward(&x)?;
    let task = mse_loss(&trace.output, &Var::constant(targets.clone()))?;
    let grads = grad(&task, &trace.layer_inputs, false)?;
    no_grad(|| {
        trace
            .layer_inputs
            .iter()
            .zip(&grads)
            .map(|(h, g)| {
                let rows = gfa_cosine_rows(&h.detach(), g, S::of(epsilon_denom))?;
                Ok(rows.value().to_f64_vec())
            })
            .collect()
    })
}

/// Mean and standard deviation of the per-sample alignment at every
/// parameterized layer. Batches are fanned out over `threads` workers and
/// merged in order, so the report does not depend on the thread count.
pub fn measure_gfa<S: Scalar>(
    model: &ModelState<S>,
    data: &DatasetHandle<S>,
    batch_size: usize,
    threads: usize,
) -> Result<GfaReport> {
    if data.is_empty() {
        return Err(Error::invalid("measure_gfa", "empty dataset"));
    }
    let layers = model.parameterized_layers();
    let batch = batch_size.max(1);
    let chunks = data.len().div_ceil(batch);
    let run = |c: usize| -> Result<Vec<Vec<f64>>> {
        let (lo, hi) = (c * batch, ((c + 1) * batch).min(data.len()));
        gfa_per_sample(
            model,
            &data.inputs.rows_range(lo, hi)?,
            &data.targets.rows_range(lo, hi)?,
            EPSILON_DENOM,
        )
    };
    let parts = crate::parallel::map_ordered(chunks, threads, run)?;
    let mut values: Vec<Vec<f64>> = vec![Vec::with_capacity(data.len()); layers];
    for part in parts {
        for (l, v) in part.into_iter().enumerate() {
            values[l].extend(v);
        }
    }
    let n = data.len() as f64;
    let mean: Vec<f64> = values.iter().map(|v| v.iter().sum::<f64>() / n).collect();
    let std = values
        .iter()
        .zip(&mean)
        .map(|(v, m)| (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    Ok(GfaReport {
        per_layer_mean: mean,
        per_layer_std: std,
        samples: data.len(),
    })
}
