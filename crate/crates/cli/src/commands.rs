use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use gfa_core::analysis::{decompose as decompose_sample, flatness_score, landscape as landscape_grid, DirectionPair};
use gfa_core::attacks::{predict_batched, run_attack, AttackConfig, GradientKind};
use gfa_core::gfa::{measure_gfa, train as train_model, Strategy};
use gfa_core::nn::{load_checkpoint, save_checkpoint};
use gfa_core::ModelState;
use serde::Serialize;

use crate::config::{Datasets, Loaded};
use crate::output::Output;
use crate::Failure;

const EVAL_BATCH: usize = 256;

pub struct Context {
    pub loaded: Loaded,
    pub out: Output,
    pub threads: usize,
    data: OnceCell<Datasets>,
}

impl Context {
    pub fn new(loaded: Loaded, out: &Path, threads: usize) -> Result<Self> {
        let out = Output::new(out, loaded.config.hash())?;
        out.text("config.toml", &loaded.config.to_toml()?)?;
        Ok(Self {
            loaded,
            out,
            threads,
            data: OnceCell::new(),
        })
    }

    fn data(&self) -> Result<&Datasets> {
        if self.data.get().is_none() {
            let d = self.loaded.datasets()?;
            let _ = self.data.set(d);
        }
        Ok(self.data.get().expect("just set"))
    }

    fn hash(&self) -> String {
        self.out.hash.clone()
    }

    fn checkpoint_path(&self, s: Strategy, r: usize) -> PathBuf {
        self.out.path(&format!("models/{s}_r{r}.ckpt"))
    }

    /// Loads `strategies × repetitions`, listing every missing file at once.
    fn load_models(&self, strategies: &[Strategy], reps: &[usize]) -> Result<BTreeMap<(Strategy, usize), ModelState>> {
        let missing: Vec<PathBuf> = reps
            .iter()
            .flat_map(|&r| strategies.iter().map(move |&s| (s, r)))
            .map(|(s, r)| self.checkpoint_path(s, r))
            .filter(|p| !p.exists())
            .collect();
        if !missing.is_empty() {
            return Err(Failure::Missing(missing).into());
        }
        let arch = &self.loaded.config.arch;
        let mut out = BTreeMap::new();
        for &r in reps {
            for &s in strategies {
                let path = self.checkpoint_path(s, r);
                let m: ModelState = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
                if &m.arch != arch {
                    bail!(Failure::Config(format!(
                        "{} holds a {} model, config names {arch}",
                        path.display(),
                        m.arch
                    )));
                }
                out.insert((s, r), m);
            }
        }
        Ok(out)
    }

    fn repetitions(&self) -> Vec<usize> {
        (0..self.loaded.config.repetitions).collect()
    }
}

fn accuracy(model: &ModelState, data: &gfa_core::data::DatasetHandle<f64>) -> Result<f64> {
    let pred = predict_batched(model, &data.inputs, EVAL_BATCH)?;
    let correct = pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * correct as f64 / data.len() as f64)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Serialize)]
struct TrainRow {
    strategy: Strategy,
    repetition: usize,
    epochs: usize,
    final_task_loss: f64,
    final_total_loss: f64,
    probe_gfa: Vec<f64>,
    test_accuracy: f64,
    checkpoint: String,
}

pub fn train(ctx: &Context) -> Result<()> {
    let cfg = &ctx.loaded.config;
    let data = ctx.data()?;
    let mut rows = Vec::new();
    for r in ctx.repetitions() {
        for s in &cfg.strategies {
            let tc = cfg.train_config(s, r)?;
            eprintln!(
                "train {} r{r}: {} epochs on {} samples",
                s.name,
                tc.epochs,
                data.train.len()
            );
            let init = ModelState::build(cfg.arch.clone(), cfg.run_seed(r));
            let (model, log) = train_model(&init, &data.train, &tc)?;
            let path = ctx.checkpoint_path(s.name, r);
            std::fs::create_dir_all(path.parent().expect("models dir"))?;
            save_checkpoint(&model, &path)?;
            let layers = model.parameterized_layers();
            ctx.out.csv_with(
                &format!("logs/{}_r{r}.csv", s.name),
                &[format!("strategy {} repetition {r}", s.name)],
                |w| log.write_csv(w, layers),
            )?;
            let last = log.epochs.last();
            let test_accuracy = accuracy(&model, &data.test)?;
            eprintln!("  test accuracy {test_accuracy:.2}%");
            rows.push(TrainRow {
                strategy: s.name,
                repetition: r,
                epochs: tc.epochs,
                final_task_loss: last.map_or(f64::NAN, |e| e.task_loss),
                final_total_loss: last.map_or(f64::NAN, |e| e.total_loss),
                probe_gfa: last.map_or_else(Vec::new, |e| e.gfa.clone()),
                test_accuracy,
                checkpoint: format!("models/{}_r{r}.ckpt", s.name),
            });
        }
    }
    ctx.out
        .json("train_summary.json", &serde_json::json!({ "runs": rows }))?;
    Ok(())
}

#[derive(Serialize)]
struct AttackRunRow {
    config_hash: String,
    repetition: usize,
    strategy: Strategy,
    attacker: &'static str,
    epsilon: Option<f64>,
    accuracy: f64,
    noise_mse: f64,
    samples: usize,
    forward_calls: usize,
    gradient_calls: usize,
}

#[derive(Serialize)]
struct AttackRow {
    config_hash: String,
    strategy: Strategy,
    attacker: &'static str,
    epsilon: Option<f64>,
    accuracy: f64,
    accuracy_std: f64,
    noise_mse: f64,
    samples: usize,
    repetitions: usize,
}

#[derive(Serialize)]
struct EligibleSet {
    repetition: usize,
    size: usize,
    clean_accuracy: BTreeMap<String, f64>,
}

pub fn attack(ctx: &Context) -> Result<()> {
    let cfg = &ctx.loaded.config;
    let strategies = cfg.attack_strategies();
    let models = ctx.load_models(&strategies, &ctx.repetitions())?;
    let test = &ctx.data()?.test;
    let specs = cfg.attack_specs();
    let mut runs = Vec::new();
    let mut eligible_sets = Vec::new();
    for r in ctx.repetitions() {
        let mut clean = BTreeMap::new();
        let mut eligible = vec![true; test.len()];
        for &s in &strategies {
            let pred = predict_batched(&models[&(s, r)], &test.inputs, EVAL_BATCH)?;
            let mut correct = 0;
            for (i, (p, y)) in pred.iter().zip(&test.labels).enumerate() {
                eligible[i] &= p == y;
                correct += usize::from(p == y);
            }
            clean.insert(s.to_string(), 100.0 * correct as f64 / test.len() as f64);
        }
        let idx: Vec<usize> = (0..test.len()).filter(|&i| eligible[i]).collect();
        if idx.is_empty() {
            bail!("repetition {r}: no test sample is classified correctly by every model");
        }
        eprintln!("attack r{r}: {} eligible samples", idx.len());
        eligible_sets.push(EligibleSet {
            repetition: r,
            size: idx.len(),
            clean_accuracy: clean,
        });
        let full = test.select(&idx)?;
        let few = full.head(cfg.attack.optimization_samples.min(full.len()))?;
        for spec in &specs {
            let set = if spec.epsilon().is_some() { &full } else { &few };
            for &s in &strategies {
                let res = run_attack(&models[&(s, r)], &set.inputs, &set.labels, spec, ctx.threads)?;
                let noise = res.mean_noise_mse();
                if !noise.is_finite() {
                    bail!(Failure::Numeric(format!(
                        "{} on {s}: noise_mse is {noise}",
                        spec.name()
                    )));
                }
                runs.push(AttackRunRow {
                    config_hash: ctx.hash(),
                    repetition: r,
                    strategy: s,
                    attacker: spec.name(),
                    epsilon: spec.epsilon(),
                    accuracy: 100.0 * res.accuracy(),
                    noise_mse: noise,
                    samples: set.len(),
                    forward_calls: res.forward_calls,
                    gradient_calls: res.gradient_calls,
                });
            }
        }
    }
    let cells = specs.len() * strategies.len();
    let mut rows = Vec::with_capacity(cells);
    for c in 0..cells {
        let group: Vec<&AttackRunRow> = runs.iter().skip(c).step_by(cells).collect();
        let acc: Vec<f64> = group.iter().map(|g| g.accuracy).collect();
        let m = mean(&acc);
        let std = (acc.iter().map(|a| (a - m).powi(2)).sum::<f64>() / acc.len() as f64).sqrt();
        rows.push(AttackRow {
            config_hash: ctx.hash(),
            strategy: group[0].strategy,
            attacker: group[0].attacker,
            epsilon: group[0].epsilon,
            accuracy: m,
            accuracy_std: std,
            noise_mse: mean(&group.iter().map(|g| g.noise_mse).collect::<Vec<_>>()),
            samples: group.iter().map(|g| g.samples).sum(),
            repetitions: group.len(),
        });
    }
    ctx.out.csv("attack_report_runs.csv", &runs)?;
    ctx.out.csv("attack_report.csv", &rows)?;
    ctx.out.json(
        "attack_report.json",
        &serde_json::json!({ "eligible": eligible_sets, "rows": rows }),
    )?;
    Ok(())
}

#[derive(Serialize)]
struct GfaRow {
    config_hash: String,
    strategy: Strategy,
    split: &'static str,
    layer: usize,
    mean: f64,
    std: f64,
    samples: usize,
}

#[derive(Serialize)]
struct GfaRunRow {
    config_hash: String,
    repetition: usize,
    strategy: Strategy,
    split: &'static str,
    layer: usize,
    mean: f64,
    std: f64,
    samples: usize,
}

pub fn gfa_report(ctx: &Context) -> Result<()> {
    let strategies = ctx.loaded.config.strategy_names();
    let reps = ctx.repetitions();
    let models = ctx.load_models(&strategies, &reps)?;
    let data = ctx.data()?;
    let mut runs = Vec::new();
    for &s in &strategies {
        for (split, set) in [("train", &data.train), ("test", &data.test)] {
            for &r in &reps {
                let rep = measure_gfa(&models[&(s, r)], set, EVAL_BATCH, ctx.threads)?;
                for (layer, (m, sd)) in rep.per_layer_mean.iter().zip(&rep.per_layer_std).enumerate() {
                    runs.push(GfaRunRow {
                        config_hash: ctx.hash(),
                        repetition: r,
                        strategy: s,
                        split,
                        layer,
                        mean: *m,
                        std: *sd,
                        samples: rep.samples,
                    });
                }
            }
        }
    }
    let mut rows: Vec<GfaRow> = Vec::new();
    for chunk in runs.chunk_by(|a, b| a.strategy == b.strategy && a.split == b.split) {
        let layers = chunk.iter().map(|c| c.layer).max().map_or(0, |l| l + 1);
        for layer in 0..layers {
            let g: Vec<&GfaRunRow> = chunk.iter().filter(|c| c.layer == layer).collect();
            rows.push(GfaRow {
                config_hash: ctx.hash(),
                strategy: g[0].strategy,
                split: g[0].split,
                layer,
                mean: mean(&g.iter().map(|c| c.mean).collect::<Vec<_>>()),
                std: mean(&g.iter().map(|c| c.std).collect::<Vec<_>>()),
                samples: g[0].samples,
            });
        }
    }
    ctx.out.csv("gfa_report_runs.csv", &runs)?;
    ctx.out.csv("gfa_report.csv", &rows)?;
    ctx.out.json("gfa_report.json", &serde_json::json!({ "rows": rows }))?;
    Ok(())
}

#[derive(Serialize)]
struct LandscapeEntry {
    sample: usize,
    label: usize,
    directions: [String; 2],
    center_loss: BTreeMap<String, f64>,
    flatness: BTreeMap<String, f64>,
    grids: Vec<String>,
}

pub fn landscape(ctx: &Context, sample: Option<usize>, repetition: usize) -> Result<()> {
    let cfg = &ctx.loaded.config;
    let plan = &cfg.analysis;
    if repetition >= cfg.repetitions {
        bail!(Failure::Config(format!(
            "repetition {repetition} out of range (config has {})",
            cfg.repetitions
        )));
    }
    let [sa, sb] = plan.landscape_models;
    let models = ctx.load_models(&[sa, sb], &[repetition])?;
    let (ma, mb) = (&models[&(sa, repetition)], &models[&(sb, repetition)]);
    let test = &ctx.data()?.test;
    let samples: Vec<usize> = match sample {
        Some(i) if i >= test.len() => bail!(Failure::Config(format!(
            "sample {i} out of range (test subset has {})",
            test.len()
        ))),
        Some(i) => vec![i],
        None => {
            let pa = predict_batched(ma, &test.inputs, EVAL_BATCH)?;
            let pb = predict_batched(mb, &test.inputs, EVAL_BATCH)?;
            (0..test.len())
                .filter(|&i| pa[i] == test.labels[i] && pb[i] == test.labels[i])
                .take(plan.landscape_samples)
                .collect()
        }
    };
    let mut dir_cfg = AttackConfig::new(GradientKind::Pgd, plan.direction_epsilon);
    dir_cfg.seed = cfg.seed;
    let range = (plan.landscape_range[0], plan.landscape_range[1]);
    let mut entries = Vec::new();
    let mut flatter = 0;
    for &i in &samples {
        let x = test.inputs.rows_range(i, i + 1)?;
        let label = test.labels[i];
        let pair = DirectionPair::from_pgd((ma, sa.name()), (mb, sb.name()), &x, label, &dir_cfg)?;
        let mut entry = LandscapeEntry {
            sample: i,
            label,
            directions: pair.labels.clone(),
            center_loss: BTreeMap::new(),
            flatness: BTreeMap::new(),
            grids: Vec::new(),
        };
        for (s, m) in [(sa, ma), (sb, mb)] {
            let grid = landscape_grid(m, &x, label, &pair, range, plan.landscape_resolution, ctx.threads)?;
            let rel = format!("landscape/{s}_r{repetition}_s{i}.csv");
            ctx.out.csv_with(
                &rel,
                &[format!(
                    "model {s} sample {i} label {label} d1 {} d2 {}",
                    pair.labels[0], pair.labels[1]
                )],
                |w| grid.write_csv(w),
            )?;
            entry.center_loss.insert(s.to_string(), grid.center_loss);
            entry.flatness.insert(s.to_string(), flatness_score(&grid));
            entry.grids.push(rel);
        }
        flatter += usize::from(entry.flatness[sb.name()] < entry.flatness[sa.name()]);
        entries.push(entry);
    }
    eprintln!(
        "landscape: {sb} flatter than {sa} on {flatter} of {} samples",
        entries.len()
    );
    ctx.out.json(
        "landscape_summary.json",
        &serde_json::json!({
            "models": [sa, sb],
            "repetition": repetition,
            "range": plan.landscape_range,
            "resolution": plan.landscape_resolution,
            "second_flatter": flatter,
            "samples": entries,
        }),
    )?;
    Ok(())
}

#[derive(Serialize)]
struct DecomposeRow {
    config_hash: String,
    strategy: Strategy,
    repetition: usize,
    sample: usize,
    label: usize,
    radial_coefficient: f64,
    radial_derivative: f64,
    tangential_derivative_max: f64,
    tangential_bound: f64,
    alignment: f64,
    grad_norm: f64,
}

#[derive(Serialize)]
struct DecomposeSummary {
    strategy: Strategy,
    median_alignment: f64,
    mean_alignment: f64,
    reports: usize,
    bound_violations: usize,
}

pub fn decompose(ctx: &Context) -> Result<()> {
    let cfg = &ctx.loaded.config;
    let strategies = cfg.strategy_names();
    let reps = ctx.repetitions();
    let models = ctx.load_models(&strategies, &reps)?;
    let test = &ctx.data()?.test;
    let n = cfg.analysis.decompose_samples.min(test.len());
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &s in &strategies {
        let mut align = Vec::new();
        let mut violations = 0;
        for &r in &reps {
            for i in 0..n {
                let x = test.inputs.rows_range(i, i + 1)?;
                let label = test.labels[i];
                let rep = decompose_sample(
                    &models[&(s, r)],
                    &x,
                    label,
                    cfg.analysis.tangent_samples,
                    cfg.seed.wrapping_add(i as u64),
                )?;
                let bound = rep.tangential_bound();
                violations += usize::from(rep.tangential_derivative_max > bound * (1.0 + 1e-9) + 1e-12);
                align.push(rep.alignment);
                rows.push(DecomposeRow {
                    config_hash: ctx.hash(),
                    strategy: s,
                    repetition: r,
                    sample: i,
                    label,
                    radial_coefficient: rep.radial_coefficient,
                    radial_derivative: rep.radial_derivative,
                    tangential_derivative_max: rep.tangential_derivative_max,
                    tangential_bound: bound,
                    alignment: rep.alignment,
                    grad_norm: rep.grad_norm,
                });
            }
        }
        summary.push(DecomposeSummary {
            strategy: s,
            median_alignment: median(&align),
            mean_alignment: mean(&align),
            reports: align.len(),
            bound_violations: violations,
        });
    }
    ctx.out.csv("decompose.csv", &rows)?;
    ctx.out
        .json("decompose_summary.json", &serde_json::json!({ "strategies": summary }))?;
    Ok(())
}
