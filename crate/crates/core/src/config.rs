//! Experiment configuration: TOML schema, profiles, validation and seeds.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{DarConfig, ObjectiveKind};
use crate::optim::{OptimizerConfig, TrainConfig};
use crate::search::{InitRule, SearchConfig};
use crate::task::{DatasetConfig, PoolSampling, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::validation("profile", format!("unknown profile `{other}`"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskBlock {
    pub name: String,
    pub pool_size: usize,
    pub keep_fraction: f64,
    /// Overrides the seed derived from the master seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub sampling: PoolSampling,
    /// Quadratic-bowl geometry; ignored by other tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub hidden: usize,
    pub init_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBlock {
    pub objective: ObjectiveKind,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    pub weight_decay: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchBlock {
    pub eta: f64,
    pub steps: usize,
    pub candidates: usize,
    pub init_rule: InitRule,
    pub record_trajectories: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsBlock {
    pub epsilon_eval: f64,
    pub radii: Vec<f64>,
    pub eval_pool_size: usize,
    pub pair_cap: usize,
    pub w1_sample_size: usize,
    /// Randomized audit trials per audit; zero skips the audit artifacts.
    pub audit_trials: usize,
    /// Points per marginal in each decomposition trial; the product has its square.
    pub audit_sample_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    pub task: TaskBlock,
    pub model: ModelBlock,
    pub train: TrainBlock,
    pub search: SearchBlock,
    pub diagnostics: DiagnosticsBlock,
    pub output: OutputBlock,
}

impl ExperimentConfig {
    /// Complete defaults for a profile.
    pub fn defaults(profile: Profile) -> Self {
        let (hidden, candidates) = match profile {
            Profile::Desk => (64, 32),
            Profile::Paper => (2048, 128),
        };
        ExperimentConfig {
            profile,
            seed: 0,
            task: TaskBlock {
                name: "branin".into(),
                pool_size: 5000,
                keep_fraction: 0.6,
                seed: None,
                noise_std: 0.0,
                sampling: PoolSampling::Uniform,
                center: None,
                lower: None,
                upper: None,
            },
            model: ModelBlock { hidden, init_scale: 1.0 },
            train: TrainBlock {
                objective: ObjectiveKind::Dar,
                iterations: 5000,
                batch_size: 64,
                learning_rate: 1e-3,
                optimizer: OptimizerConfig::default(),
                weight_decay: 0.0,
                epsilon: 0.2,
                lambda: 0.1,
                beta: 0.4,
            },
            search: SearchBlock {
                eta: 0.05,
                steps: 200,
                candidates,
                init_rule: InitRule::TopkOfSEps,
                record_trajectories: false,
            },
            diagnostics: DiagnosticsBlock {
                epsilon_eval: 0.05,
                radii: vec![0.5, 1.0, 2.0, 3.0, 5.0],
                eval_pool_size: 4000,
                pair_cap: crate::diagnostics::DEFAULT_PAIR_CAP,
                w1_sample_size: 256,
                audit_trials: 0,
                audit_sample_size: 16,
            },
            output: OutputBlock { dir: PathBuf::from("runs/default") },
        }
    }

    /// Parses TOML text, filling absent keys from the profile defaults.
    /// `profile` overrides any profile named in the text.
    pub fn from_toml_str(text: &str, profile: Option<Profile>) -> Result<Self> {
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::parse("config", e.message()))?;
        let named = match file.get("profile") {
            Some(toml::Value::String(s)) => Some(s.parse::<Profile>()?),
            Some(_) => return Err(Error::validation("profile", "must be a string")),
            None => None,
        };
        let profile = profile.or(named).unwrap_or_default();
        let mut merged = Self::defaults(profile).to_toml_value()?;
        merge_into(&mut merged, toml::Value::Table(file));
        if let toml::Value::Table(t) = &mut merged {
            t.insert("profile".into(), toml::Value::String(profile.to_string()));
        }
        Self::from_toml_value(merged)
    }

    pub fn from_file(path: &Path, profile: Option<Profile>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, profile).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
            other => other,
        })
    }

    pub fn to_toml_value(&self) -> Result<toml::Value> {
        toml::Value::try_from(self).map_err(|e| Error::parse("config", e))
    }

    pub fn from_toml_value(value: toml::Value) -> Result<Self> {
        value.try_into().map_err(|e: toml::de::Error| Error::parse("config", e.message()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::parse("config", e))
    }

    /// Sets a dotted key such as `train.lambda`, then re-checks the schema.
    pub fn with_override(&self, path: &str, value: toml::Value) -> Result<Self> {
        let mut root = self.to_toml_value()?;
        let mut node = &mut root;
        let keys: Vec<&str> = path.split('.').collect();
        for (i, key) in keys.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::validation(path.to_string(), "not a config path"))?;
            if i + 1 == keys.len() {
                table.insert((*key).to_string(), value);
                break;
            }
            node = table
                .get_mut(*key)
                .ok_or_else(|| Error::validation(path.to_string(), "not a config path"))?;
        }
        Self::from_toml_value(root).map_err(|e| match e {
            Error::Parse { message, .. } => Error::validation(path.to_string(), message),
            other => other,
        })
    }

    /// Checks every block against its module constraints.
    pub fn validate(&self) -> Result<()> {
        let task = self.task_spec()?;
        task.validate()?;
        self.dataset_config().validate()?;
        if self.model.hidden < 1 {
            return Err(Error::validation("model.hidden", "must be >= 1"));
        }
        if !(self.model.init_scale > 0.0 && self.model.init_scale.is_finite()) {
            return Err(Error::validation("model.init_scale", "must be finite and > 0"));
        }
        self.train_config().validate()?;
        // The search partition uses the training epsilon for every objective.
        self.dar_config().validate()?;
        self.search_config().validate()?;
        let d = &self.diagnostics;
        if !(d.epsilon_eval > 0.0 && d.epsilon_eval < 1.0) {
            return Err(Error::validation(
                "diagnostics.epsilon_eval",
                format!("{} is outside (0, 1)", d.epsilon_eval),
            ));
        }
        if d.radii.is_empty() {
            return Err(Error::validation("diagnostics.radii", "at least one radius is required"));
        }
        if d.radii.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::validation("diagnostics.radii", "radii must be positive"));
        }
        if d.radii.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation("diagnostics.radii", "radii must be strictly ascending"));
        }
        if d.eval_pool_size < 2 {
            return Err(Error::validation("diagnostics.eval_pool_size", "must be >= 2"));
        }
        if d.pair_cap < 1 {
            return Err(Error::validation("diagnostics.pair_cap", "must be >= 1"));
        }
        if !(1..=crate::diagnostics::ASSIGNMENT_CAP).contains(&d.w1_sample_size) {
            return Err(Error::validation(
                "diagnostics.w1_sample_size",
                format!("must be in 1..={}", crate::diagnostics::ASSIGNMENT_CAP),
            ));
        }
        let n = d.audit_sample_size;
        if n < 1 || n * n > crate::diagnostics::ASSIGNMENT_CAP {
            return Err(Error::validation(
                "diagnostics.audit_sample_size",
                "must be >= 1 with a square no larger than the assignment cap",
            ));
        }
        if self.output.dir.as_os_str().is_empty() {
            return Err(Error::validation("output.dir", "must not be empty"));
        }
        Ok(())
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        match self.task.name.as_str() {
            "quadratic_bowl" if self.task.center.is_some() => {
                let center = self.task.center.clone().unwrap_or_default();
                let dim = center.len();
                let lower = self.task.lower.clone().unwrap_or_else(|| vec![-2.0; dim]);
                let upper = self.task.upper.clone().unwrap_or_else(|| vec![2.0; dim]);
                TaskSpec::quadratic_bowl(center, lower, upper)
            }
            name => TaskSpec::by_name(name).map_err(|_| Error::validation("task.name", format!("unknown task `{name}`"))),
        }
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::derive(self.seed, self.task.seed)
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            pool_size: self.task.pool_size,
            keep_fraction: self.task.keep_fraction,
            seed: self.seeds().dataset,
            noise_std: self.task.noise_std,
            sampling: self.task.sampling,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            iterations: t.iterations,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            optimizer: t.optimizer,
            seed: self.seeds().train,
            weight_init_scale: self.model.init_scale,
            weight_decay: t.weight_decay,
        }
    }

    pub fn dar_config(&self) -> DarConfig {
        DarConfig {
            epsilon: self.train.epsilon,
            lambda: self.train.lambda,
            beta: self.train.beta,
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        let s = &self.search;
        SearchConfig {
            eta: s.eta,
            steps: s.steps,
            candidates: s.candidates,
            init_rule: s.init_rule,
            seed: self.seeds().search,
            record_trajectories: s.record_trajectories,
        }
    }
}

fn merge_into(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_into(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable seed for a named stream of a master seed.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(master ^ splitmix64(h))
}

/// Every random stream consumed by a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub dataset: u64,
    pub init: u64,
    pub train: u64,
    pub search: u64,
    pub eval_pool: u64,
    pub pair_sampling: u64,
    pub w1_subsample: u64,
    pub training_marginals: u64,
    pub audit: u64,
}

impl Seeds {
    pub fn derive(master: u64, dataset_override: Option<u64>) -> Self {
        Seeds {
            master,
            dataset: dataset_override.unwrap_or_else(|| derive_seed(master, "dataset")),
            init: derive_seed(master, "init"),
            train: derive_seed(master, "train"),
            search: derive_seed(master, "search"),
            eval_pool: derive_seed(master, "eval_pool"),
            pair_sampling: derive_seed(master, "pair_sampling"),
            w1_subsample: derive_seed(master, "w1_subsample"),
            training_marginals: derive_seed(master, "training_marginals"),
            audit: derive_seed(master, "audit"),
        }
    }

    pub fn as_map(&self) -> BTreeMap<&'static str, u64> {
        BTreeMap::from([
            ("master", self.master),
            ("dataset", self.dataset),
            ("init", self.init),
            ("train", self.train),
            ("search", self.search),
            ("eval_pool", self.eval_pool),
            ("pair_sampling", self.pair_sampling),
            ("w1_subsample", self.w1_subsample),
            ("training_marginals", self.training_marginals),
            ("audit", self.audit),
        ])
    }
}
