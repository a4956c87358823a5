use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{measure_gfa, total_loss_scaled, GfaConfig, Strategy};
use crate::attacks::{gradient_attack, AttackConfig, GradientKind, Oracle};
use crate::autodiff::{grad, Var};
use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::nn::ModelState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Optimizer::Sgd { lr, .. } | Optimizer::Adam { lr, .. } => lr,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Linear decay from the base rate to zero over all steps.
    #[default]
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub gfa: GfaConfig,
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Inner PGD used by ADV training.
    pub adv_inner: AttackConfig,
    /// β ramps linearly from 0 to its full value over this many epochs.
    pub beta_warmup_epochs: usize,
    pub lr_schedule: LrSchedule,
    /// Training samples used for the per-epoch alignment probe.
    pub log_probe: usize,
}

impl TrainConfig {
    /// Defaults for `strategy`. `beta` gives one value per layer in
    /// `strategy.gfa_layers(arch)`; it is ignored by STD and ADV.
    pub fn for_strategy(strategy: Strategy, arch: &crate::nn::Arch, beta: &[f64]) -> Result<Self> {
        let layers = arch.layers().iter().filter(|l| l.is_parameterized()).count();
        let gfa_layers = strategy.gfa_layers(arch);
        let gfa = if gfa_layers.is_empty() {
            GfaConfig::plain(layers)
        } else {
            GfaConfig::with_layers(layers, &gfa_layers, beta)?
        };
        let mut adv_inner = AttackConfig::new(GradientKind::Pgd, 0.1);
        adv_inner.step_size = 0.02;
        adv_inner.iterations = 10;
        Ok(Self {
            strategy,
            gfa,
            optimizer: Optimizer::adam(1e-3),
            epochs: 20,
            batch_size: 64,
            seed: 0,
            adv_inner,
            beta_warmup_epochs: 2,
            lr_schedule: LrSchedule::Linear,
            log_probe: 512,
        })
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        self.gfa.validate(layers)?;
        let bad = |msg: &str| Err(Error::invalid("train config", msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.optimizer.lr() >= 0.0) {
            return bad("learning rate must be non-negative");
        }
        match self.strategy {
            Strategy::Std | Strategy::Adv if !self.gfa.gfa_layers.is_empty() => {
                bad("STD and ADV take no alignment penalty")
            }
            Strategy::First | Strategy::Deep if self.gfa.gfa_layers.is_empty() => {
                bad("FIRST and DEEP need at least one regularized layer")
            }
            Strategy::Adv => self.adv_inner.validate(),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Batch means over the epoch.
    pub task_loss: f64,
    pub total_loss: f64,
    /// Alignment per parameterized layer on the probe set after the epoch.
    pub gfa: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, mut w: W, layers: usize) -> std::io::Result<()> {
        write!(w, "epoch,task_loss,total_loss")?;
        for l in 0..layers {
            write!(w, ",gfa_layer_{l}")?;
        }
        writeln!(w)?;
        for e in &self.epochs {
            write!(w, "{},{},{}", e.epoch, e.task_loss, e.total_loss)?;
            for g in &e.gfa {
                write!(w, ",{g}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

enum OptState<S: Scalar> {
    Sgd {
        velocity: Vec<Tensor<S>>,
    },
    Adam {
        m: Vec<Tensor<S>>,
        v: Vec<Tensor<S>>,
        t: i32,
    },
}

impl<S: Scalar> OptState<S> {
    fn new(opt: &Optimizer, params: &[Tensor<S>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        match opt {
            Optimizer::Sgd { .. } => OptState::Sgd { velocity: zeros() },
            Optimizer::Adam { .. } => OptState::Adam {
                m: zeros(),
                v: zeros(),
                t: 0,
            },
        }
    }

    fn step(&mut self, opt: &Optimizer, lr: f64, params: &mut [Tensor<S>], grads: &[Tensor<S>]) {
        match (self, opt) {
            (OptState::Sgd { velocity }, &Optimizer::Sgd { momentum, .. }) => {
                let (lr, mu) = (S::of(lr), S::of(momentum));
                for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity) {
                    for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *v = mu * *v + g;
                        *p -= lr * *v;
                    }
                }
            }
            (OptState::Adam { m, v, t }, &Optimizer::Adam { beta1, beta2, eps, .. }) => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                let (b1, b2, eps) = (S::of(beta1), S::of(beta2), S::of(eps));
                let (one, lr_c, c2s) = (S::one(), S::of(lr / c1), S::of(c2));
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(m).zip(v) {
                    let it = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut());
                    for (((p, &g), m), v) in it {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        *p -= lr_c * *m / ((*v / c2s).sqrt() + eps);
                    }
                }
            }
            _ => unreachable!("optimizer state built from the same config"),
        }
    }
}

/// Trains a copy of `model` on `data`. Each epoch visits every sample once
/// in a seeded order; the final partial batch is kept.
///
/// ADV replaces the second half of every batch with PGD examples against
/// the current parameters. FIRST and DEEP add the alignment penalty, with β
/// ramped up over the warmup epochs.
pub fn train<S: Scalar>(
    model: &ModelState<S>,
    data: &DatasetHandle<S>,
    cfg: &TrainConfig,
) -> Result<(ModelState<S>, TrainingLog)> {
    let layers = model.parameterized_layers();
    cfg.validate(layers)?;
    if data.classes != model.classes() {
        return Err(Error::invalid(
            "train",
            format!("dataset has {} classes, model {}", data.classes, model.classes()),
        ));
    }
    let mut state = model.clone();
    let mut log = TrainingLog::default();
    if cfg.epochs == 0 || data.is_empty() {
        return Ok((state, log));
    }

    let n = data.len();
    let batches = n.div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches) as f64;
    let warmup_steps = (cfg.beta_warmup_epochs * batches) as f64;
    let probe = data.head(cfg.log_probe.min(n))?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adv_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    adv_rng.set_stream(1);
    let mut opt = OptState::new(&cfg.optimizer, &state.params);
    let regularized = !cfg.gfa.gfa_layers.is_empty();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut task_sum, mut total_sum) = (0.0, 0.0);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut xb = data.inputs.select_rows(idx)?;
            let yb = data.targets.select_rows(idx)?;
            if cfg.strategy == Strategy::Adv && idx.len() >= 2 {
                let half = idx.len() / 2;
                let clean = xb.rows_range(0, half)?;
                let labels: Vec<usize> = idx[half..].iter().map(|&i| data.labels[i]).collect();
                let oracle = Oracle::new(&state);
                let adv = gradient_attack(
                    &oracle,
                    &xb.rows_range(half, idx.len())?,
                    &labels,
                    &cfg.adv_inner,
                    &mut adv_rng,
                )?;
                xb = Tensor::concat_rows(&[clean, adv.adv])?;
            }
            let beta_scale = if warmup_steps > 0.0 {
                ((step + 1) as f64 / warmup_steps).min(1.0)
            } else {
                1.0
            };
            let lr = match cfg.lr_schedule {
                LrSchedule::Constant => cfg.optimizer.lr(),
                LrSchedule::Linear => cfg.optimizer.lr() * (1.0 - step as f64 / total_steps),
            };

            let params = state.param_leaves();
            let x = if regularized { Var::leaf(xb) } else { Var::constant(xb) };
            let trace = state.forward_with(&params, &x)?;
            let parts = total_loss_scaled(&trace, &Var::constant(yb), &cfg.gfa, beta_scale)?;
            let task = parts.task.item()?.f64();
            let total = parts.total.item()?.f64();
            let diverged = |quantity, value| Error::Diverged {
                epoch,
                batch: b,
                quantity,
                value,
            };
            if !task.is_finite() {
                return Err(diverged("task loss", task));
            }
            if !total.is_finite() {
                return Err(diverged("total loss", total));
            }
            let grads: Vec<Tensor<S>> = grad(&parts.total, &params, false)?
                .into_iter()
                .map(|g| g.value().clone())
                .collect();
            drop(parts);
            drop(trace);
            if let Some(g) = grads.iter().find(|g| !g.is_finite()) {
                return Err(diverged("gradient norm", g.norm().f64()));
            }
            opt.step(&cfg.optimizer, lr, &mut state.params, &grads);
            task_sum += task;
            total_sum += total;
            step += 1;
        }
        let report = measure_gfa(&state, &probe, 256, 1)?;
        log.epochs.push(EpochLog {
            epoch,
            task_loss: task_sum / batches as f64,
            total_loss: total_sum / batches as f64,
            gfa: report.per_layer_mean,
        });
    }
    Ok((state, log))
}
