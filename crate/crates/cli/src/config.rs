use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gfa_core::attacks::{
    AttackConfig, AttackSpec, DeepFoolConfig, EadConfig, GradientKind, JsmaConfig, OnePixelConfig,
};
use gfa_core::data::{load_cifar10, load_idx, subset, DatasetHandle};
use gfa_core::gfa::{LrSchedule, Optimizer, Strategy, TrainConfig};
use gfa_core::nn::Arch;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

fn default_repetitions() -> usize {
    2
}

/// One experiment: data, models to train, attacks and analyses to run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arch: Arch,
    pub seed: u64,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainDefaults,
    pub strategies: Vec<StrategyConfig>,
    #[serde(default)]
    pub attack: AttackPlan,
    #[serde(default)]
    pub analysis: AnalysisPlan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Idx,
    Cifar10,
}

/// Paths are relative to the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub format: DataFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub train_batches: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub test_batches: Vec<PathBuf>,
    /// Class-stratified training subset size.
    pub train_subset: usize,
    /// Class-stratified test subset used for every evaluation.
    pub test_subset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvPlan {
    pub epsilon: f64,
    pub iterations: usize,
    pub step_size: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainDefaults {
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub optimizer: Optimizer,
    pub lr_schedule: LrSchedule,
    pub beta_warmup_epochs: usize,
    pub log_probe: usize,
    pub adv: AdvPlan,
}

impl Default for TrainDefaults {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            alpha: 1.0,
            optimizer: Optimizer::adam(1e-3),
            lr_schedule: LrSchedule::Linear,
            beta_warmup_epochs: 2,
            log_probe: 512,
            adv: AdvPlan {
                epsilon: 0.1,
                iterations: 10,
                step_size: 0.02,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub name: Strategy,
    /// One value per regularized layer; empty means 1.0 on each.
    #[serde(default)]
    pub beta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackPlan {
    /// Models compared in the attack report; empty means every trained
    /// strategy. The eligible set is taken over exactly these.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub strategies: Vec<Strategy>,
    /// Swept over every ε.
    pub gradient: Vec<GradientKind>,
    pub epsilons: Vec<f64>,
    pub iterations: usize,
    /// Eligible samples given to the optimization attacks.
    pub optimization_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deepfool: Option<DeepFoolConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eaden: Option<EadConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cwl2: Option<EadConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jsma: Option<JsmaConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub onepixel: Option<OnePixelConfig>,
}

impl Default for AttackPlan {
    fn default() -> Self {
        Self {
            strategies: Vec::new(),
            gradient: vec![GradientKind::Fgsm, GradientKind::Pgd],
            epsilons: vec![0.02, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3],
            iterations: 10,
            optimization_samples: 200,
            deepfool: Some(DeepFoolConfig::default()),
            eaden: None,
            cwl2: None,
            jsma: None,
            onepixel: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisPlan {
    /// The two strategies compared on shared landscape directions.
    pub landscape_models: [Strategy; 2],
    pub landscape_samples: usize,
    pub landscape_range: [f64; 2],
    pub landscape_resolution: usize,
    /// PGD radius used to build the landscape directions.
    pub direction_epsilon: f64,
    pub decompose_samples: usize,
    pub tangent_samples: usize,
}

impl Default for AnalysisPlan {
    fn default() -> Self {
        Self {
            landscape_models: [Strategy::Std, Strategy::Deep],
            landscape_samples: 20,
            landscape_range: [-0.3, 0.3],
            landscape_resolution: 41,
            direction_epsilon: 0.1,
            decompose_samples: 100,
            tangent_samples: 64,
        }
    }
}

/// A parsed config together with the directory its paths are relative to.
pub struct Loaded {
    pub config: ExperimentConfig,
    pub base: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Failure::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Loaded> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::Error::new(Failure::Missing(vec![path.to_path_buf()])).context(e.to_string()))?;
        let config = Self::from_toml(&text).with_context(|| format!("config {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Loaded { config, base })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| -> Result<()> { Err(Failure::Config(msg).into()) };
        if self.strategies.is_empty() {
            return fail("at least one strategy is required".into());
        }
        for (i, s) in self.strategies.iter().enumerate() {
            if self.strategies[..i].iter().any(|o| o.name == s.name) {
                return fail(format!("strategy {} listed twice", s.name));
            }
            let layers = s.name.gfa_layers(&self.arch).len();
            if !s.beta.is_empty() && s.beta.len() != layers {
                return fail(format!(
                    "{}: {} beta values for {layers} regularized layers",
                    s.name,
                    s.beta.len()
                ));
            }
        }
        for s in self.attack.strategies.iter().chain(&self.analysis.landscape_models) {
            if !self.strategies.iter().any(|o| o.name == *s) {
                return fail(format!("{s} is compared but not trained"));
            }
        }
        if self.repetitions == 0 {
            return fail("repetitions must be at least 1".into());
        }
        if self.data.train_subset == 0 || self.data.test_subset == 0 {
            return fail("subset sizes must be positive".into());
        }
        if self.attack.epsilons.iter().any(|e| e.is_nan() || *e < 0.0) {
            return fail("epsilons must be non-negative".into());
        }
        if self.analysis.landscape_resolution < 2 {
            return fail("landscape_resolution must be at least 2".into());
        }
        let (idx, cifar) = (
            [
                &self.data.train_images,
                &self.data.train_labels,
                &self.data.test_images,
                &self.data.test_labels,
            ],
            [&self.data.train_batches, &self.data.test_batches],
        );
        match self.data.format {
            DataFormat::Idx if idx.iter().any(|p| p.is_none()) => {
                fail("idx data needs train_images, train_labels, test_images and test_labels".into())
            }
            DataFormat::Cifar10 if cifar.iter().any(|b| b.is_empty()) => {
                fail("cifar10 data needs train_batches and test_batches".into())
            }
            _ => Ok(()),
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn strategy_names(&self) -> Vec<Strategy> {
        self.strategies.iter().map(|s| s.name).collect()
    }

    pub fn attack_strategies(&self) -> Vec<Strategy> {
        if self.attack.strategies.is_empty() {
            self.strategy_names()
        } else {
            self.attack.strategies.clone()
        }
    }

    /// Initialization and training seed of repetition `r`.
    pub fn run_seed(&self, r: usize) -> u64 {
        self.seed.wrapping_add(r as u64)
    }

    pub fn train_config(&self, s: &StrategyConfig, r: usize) -> Result<TrainConfig> {
        let layers = s.name.gfa_layers(&self.arch).len();
        let beta = if s.beta.is_empty() {
            vec![1.0; layers]
        } else {
            s.beta.clone()
        };
        let mut cfg = TrainConfig::for_strategy(s.name, &self.arch, &beta)?;
        let t = &self.train;
        cfg.gfa.alpha = s.alpha.unwrap_or(t.alpha);
        cfg.epochs = s.epochs.unwrap_or(t.epochs);
        cfg.batch_size = t.batch_size;
        cfg.optimizer = t.optimizer.clone();
        cfg.lr_schedule = t.lr_schedule;
        cfg.beta_warmup_epochs = t.beta_warmup_epochs;
        cfg.log_probe = t.log_probe;
        cfg.seed = self.run_seed(r);
        cfg.adv_inner.epsilon = t.adv.epsilon;
        cfg.adv_inner.iterations = t.adv.iterations;
        cfg.adv_inner.step_size = t.adv.step_size;
        cfg.adv_inner.seed = self.run_seed(r);
        Ok(cfg)
    }

    /// Every attack cell: gradient attacks once per ε, then the
    /// optimization attacks.
    pub fn attack_specs(&self) -> Vec<AttackSpec> {
        let a = &self.attack;
        let mut out = Vec::new();
        for &kind in &a.gradient {
            for &eps in &a.epsilons {
                let mut cfg = AttackConfig::new(kind, eps);
                cfg.iterations = a.iterations;
                cfg.seed = self.seed;
                out.push(AttackSpec::Gradient(cfg));
            }
        }
        if let Some(c) = &a.deepfool {
            out.push(AttackSpec::DeepFool(c.clone()));
        }
        if let Some(c) = &a.eaden {
            out.push(AttackSpec::Ead(c.clone()));
        }
        if let Some(c) = &a.cwl2 {
            out.push(AttackSpec::Ead(EadConfig {
                beta_ead: 0.0,
                ..c.clone()
            }));
        }
        if let Some(c) = &a.jsma {
            out.push(AttackSpec::Jsma(c.clone()));
        }
        if let Some(c) = &a.onepixel {
            out.push(AttackSpec::OnePixel(OnePixelConfig {
                seed: self.seed,
                ..c.clone()
            }));
        }
        out
    }
}

/// Training and test subsets named by the config.
pub struct Datasets {
    pub train: DatasetHandle<f64>,
    pub test: DatasetHandle<f64>,
}

impl Loaded {
    fn path(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }

    pub fn datasets(&self) -> Result<Datasets> {
        let d = &self.config.data;
        let paths: Vec<PathBuf> = match d.format {
            DataFormat::Idx => [&d.train_images, &d.train_labels, &d.test_images, &d.test_labels]
                .iter()
                .map(|p| self.path(p.as_ref().expect("validated")))
                .collect(),
            DataFormat::Cifar10 => d
                .train_batches
                .iter()
                .chain(&d.test_batches)
                .map(|p| self.path(p))
                .collect(),
        };
        let missing: Vec<PathBuf> = paths.iter().filter(|p| !p.exists()).cloned().collect();
        if !missing.is_empty() {
            return Err(Failure::Missing(missing).into());
        }
        let (train, test) = match d.format {
            DataFormat::Idx => (load_idx(&paths[0], &paths[1])?, load_idx(&paths[2], &paths[3])?),
            DataFormat::Cifar10 => {
                let (tr, te) = paths.split_at(d.train_batches.len());
                (load_cifar10(tr)?, load_cifar10(te)?)
            }
        };
        let seed = self.config.seed;
        let expect = self.config.arch.input_shape();
        if train.inputs.shape()[1..] != expect[..] && train.inputs.row_len() != expect.iter().product::<usize>() {
            bail!(Failure::Config(format!(
                "architecture {} expects inputs {:?}, data has {:?}",
                self.config.arch,
                expect,
                &train.inputs.shape()[1..]
            )));
        }
        Ok(Datasets {
            train: subset(&train, d.train_subset.min(train.len()), seed)?,
            test: subset(&test, d.test_subset.min(test.len()), seed)?,
        })
    }
}
