//! Experiment pipeline: generate, train, search, score, diagnose.
//!
//! A run directory holds exactly [`RUN_ARTIFACTS`] (plus audit CSVs when
//! audits are enabled). Every file except `manifest.json` is a pure function
//! of the config; the manifest adds timings and the version string.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Seeds};
use crate::diagnostics::{
    audit_csv, audit_marginal_decomposition, audit_mse_to_rank, radius_csv, ranking_error_report, subsample,
    subsample_indices, BoundReport, EvalPool, PairSampling, RankingErrorReport, TrainingMarginals,
};
use crate::error::{Error, Result};
use crate::objectives::{
    partition, train_dar, train_mse, train_rank_global, DarPairSampler, GlobalPairSampler, ObjectiveKind,
    PairSampler, TrainOutcome,
};
use crate::search::{propose_candidates, score_candidates, SearchResult};
use crate::surrogate::{init_surrogate_scaled, zscore_adapt, Adaptation, MlpSurrogate, SavedModel};
use crate::task::{fmt_f64, make_offline_dataset, normalized_score, DatasetMeta, OfflineDataset};

pub const DATASET_CSV: &str = "dataset.csv";
pub const MODEL_JSON: &str = "model.json";
pub const LOSS_CSV: &str = "loss.csv";
pub const SEARCH_CSV: &str = "search.csv";
pub const SEARCH_JSON: &str = "search.json";
pub const DIAGNOSTICS_CSV: &str = "diagnostics.csv";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const AUDIT_MSE_CSV: &str = "audit_mse_to_rank.csv";
pub const AUDIT_MARGINAL_CSV: &str = "audit_marginal.csv";

pub const RUN_ARTIFACTS: [&str; 7] = [
    DATASET_CSV,
    MODEL_JSON,
    LOSS_CSV,
    SEARCH_CSV,
    SEARCH_JSON,
    DIAGNOSTICS_CSV,
    MANIFEST_JSON,
];

const MANIFEST_SCHEMA: u32 = 1;

/// Package version, suffixed with `git describe` output when available.
pub fn version_string() -> String {
    let describe = env!("DAR_MBO_GIT_DESCRIBE");
    if describe.is_empty() {
        env!("CARGO_PKG_VERSION").to_string()
    } else {
        format!("{}+{describe}", env!("CARGO_PKG_VERSION"))
    }
}

/// Sizes the global worker pool. Call before any parallel work; zero keeps
/// the default of one worker per core.
pub fn init_thread_pool(threads: usize) -> Result<()> {
    if threads == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::validation("threads", e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub objective: ObjectiveKind,
    pub iterations: usize,
    pub final_loss: f64,
    pub adaptation: Option<Adaptation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub best_true: f64,
    pub best_normalized: f64,
    pub dataset_best_normalized: f64,
    pub candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub trials: usize,
    pub mse_to_rank_violations: usize,
    pub mse_to_rank_inapplicable: usize,
    pub marginal_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub version: String,
    pub command: String,
    pub started_unix_secs: u64,
    pub wall_clock_secs: BTreeMap<String, f64>,
    pub config: ExperimentConfig,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<String>,
    pub dataset: Option<DatasetMeta>,
    pub dataset_best_normalized: Option<f64>,
    pub train: Option<TrainSummary>,
    pub search: Option<SearchSummary>,
    pub diagnostics: Option<RankingErrorReport>,
    pub audits: Option<AuditSummary>,
}

impl Manifest {
    fn new(command: &str, config: &ExperimentConfig) -> Self {
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Manifest {
            schema: MANIFEST_SCHEMA,
            version: version_string(),
            command: command.into(),
            started_unix_secs: started,
            wall_clock_secs: BTreeMap::new(),
            config: config.clone(),
            seeds: BTreeMap::new(),
            artifacts: Vec::new(),
            dataset: None,
            dataset_best_normalized: None,
            train: None,
            search: None,
            diagnostics: None,
            audits: None,
        }
    }

    fn use_seeds(&mut self, seeds: &Seeds, names: &[&str]) {
        let all = seeds.as_map();
        self.seeds.insert("master".into(), seeds.master);
        for n in names {
            self.seeds.insert((*n).into(), all[n]);
        }
    }

    fn add_artifact(&mut self, name: &str) {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.into());
            self.artifacts.sort();
        }
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_JSON);
        if !path.is_file() {
            return Err(Error::validation(
                "run directory",
                format!("{} has no {MANIFEST_JSON}", dir.display()),
            ));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut m = self.clone();
        m.add_artifact(MANIFEST_JSON);
        write_json(&dir.join(MANIFEST_JSON), &m)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path.display().to_string(), e))?;
    write_text(path, &(text + "\n"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

// ---------------------------------------------------------------------------
// Pure stages

pub fn generate_dataset(config: &ExperimentConfig) -> Result<OfflineDataset> {
    make_offline_dataset(&config.task_spec()?, &config.dataset_config())
}

/// Trains the configured objective. Every objective ends with output z-score
/// adaptation so search step sizes are comparable.
pub fn train_model(config: &ExperimentConfig, dataset: &OfflineDataset) -> Result<TrainOutcome> {
    let seeds = config.seeds();
    let model = init_surrogate_scaled(dataset.dim(), config.model.hidden, seeds.init, config.model.init_scale)?;
    let train = config.train_config();
    match config.train.objective {
        ObjectiveKind::Mse => {
            let mut out = train_mse(model, dataset, &train)?;
            out.adaptation = Some(zscore_adapt(&mut out.model, dataset)?);
            Ok(out)
        }
        ObjectiveKind::RankGlobal => train_rank_global(model, dataset, &train, config.train.beta),
        ObjectiveKind::Dar => train_dar(model, dataset, &train, &config.dar_config()),
    }
}

/// Runs projected gradient ascent from the near-optimal set and grades the
/// candidates on the true objective.
pub fn search_designs(config: &ExperimentConfig, dataset: &OfflineDataset, model: &MlpSurrogate) -> Result<SearchResult> {
    let split = partition(dataset, config.train.epsilon)?;
    let proposed = propose_candidates(model, dataset, &split, &config.search_config())?;
    score_candidates(proposed, &dataset.task)
}

/// Samples of the first and second coordinates of the objective's training
/// pair distribution. Regression has no pairs; both sides are the dataset.
pub fn training_marginals(config: &ExperimentConfig, dataset: &OfflineDataset) -> Result<TrainingMarginals> {
    let n = config.diagnostics.w1_sample_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seeds().training_marginals);
    let take = |idx: Vec<usize>| idx.into_iter().map(|i| dataset.designs[i].clone()).collect::<Vec<_>>();
    let (first, second) = match config.train.objective {
        ObjectiveKind::Mse => {
            let all: Vec<usize> = (0..dataset.len()).collect();
            (take(all.clone()), take(all))
        }
        kind => {
            let split;
            let mut sampler: Box<dyn PairSampler> = if kind == ObjectiveKind::Dar {
                split = partition(dataset, config.train.epsilon)?;
                Box::new(DarPairSampler::new(&dataset.scores, &split, config.train.lambda)?)
            } else {
                Box::new(GlobalPairSampler::new(&dataset.scores)?)
            };
            let pairs: Vec<_> = (0..n).map(|_| sampler.sample(&mut rng)).collect();
            (
                take(pairs.iter().map(|p| p.preferred).collect()),
                take(pairs.iter().map(|p| p.other).collect()),
            )
        }
    };
    Ok(TrainingMarginals { first, second })
}

pub fn eval_pool(config: &ExperimentConfig, dataset: &OfflineDataset) -> Result<EvalPool> {
    EvalPool::generate(
        &dataset.task,
        config.diagnostics.eval_pool_size,
        config.diagnostics.epsilon_eval,
        config.seeds().eval_pool,
    )
}

pub fn diagnose_model(
    config: &ExperimentConfig,
    dataset: &OfflineDataset,
    model: &MlpSurrogate,
    pool: &EvalPool,
    marginals: &TrainingMarginals,
) -> Result<RankingErrorReport> {
    let seeds = config.seeds();
    let d = &config.diagnostics;
    ranking_error_report(
        model,
        pool,
        dataset,
        &d.radii,
        marginals,
        d.w1_sample_size,
        PairSampling {
            cap: d.pair_cap,
            seed: seeds.pair_sampling,
        },
        seeds.w1_subsample,
    )
}

/// Randomized audits on subsamples of the evaluation pool: the MSE-to-ranking
/// bound for the trained model and the marginal decomposition of the pair W1.
pub fn run_audits(
    config: &ExperimentConfig,
    model: &MlpSurrogate,
    pool: &EvalPool,
    marginals: &TrainingMarginals,
) -> Result<(Vec<BoundReport>, Vec<BoundReport>)> {
    let d = &config.diagnostics;
    let base = config.seeds().audit;
    let pick = |set: &[usize], n: usize, rng: &mut ChaCha8Rng| -> (Vec<Vec<f64>>, Vec<f64>) {
        let chosen = subsample_indices(set.len(), n, rng);
        let designs = chosen.iter().map(|&i| pool.designs[set[i]].clone()).collect();
        let scores = chosen.iter().map(|&i| pool.scores[set[i]]).collect();
        (designs, scores)
    };
    let trials: Vec<(BoundReport, BoundReport)> = (0..d.audit_trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(base.wrapping_add(t as u64));
            let n = d
                .audit_sample_size
                .min(pool.split.near_optimal.len())
                .min(pool.split.suboptimal.len())
                .min(marginals.first.len())
                .min(marginals.second.len());
            let (near, f_near) = pick(&pool.split.near_optimal, n, &mut rng);
            let (sub, f_sub) = pick(&pool.split.suboptimal, n, &mut rng);
            let mse = audit_mse_to_rank(model, &near, &sub, &f_near, &f_sub)?;
            let mu = subsample(&marginals.first, n, &mut rng);
            let nu = subsample(&marginals.second, n, &mut rng);
            let marginal = audit_marginal_decomposition(&near, &sub, &mu, &nu)?;
            Ok((mse, marginal))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(trials.into_iter().unzip())
}

// ---------------------------------------------------------------------------
// Artifact-writing commands

fn dataset_best_normalized(dataset: &OfflineDataset) -> Result<f64> {
    normalized_score(dataset.best_score(), &dataset.task)
}

fn load_dataset(dir: &Path, manifest: &Manifest) -> Result<OfflineDataset> {
    let meta = manifest.dataset.clone().ok_or_else(|| {
        Error::validation("run directory", format!("{} has no dataset; run gen-data first", dir.display()))
    })?;
    let path = dir.join(DATASET_CSV);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    OfflineDataset::from_csv(&text, meta)
}

fn load_model(dir: &Path) -> Result<MlpSurrogate> {
    SavedModel::read(&dir.join(MODEL_JSON))?.to_model()
}

fn timed<T>(manifest: &mut Manifest, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    manifest.wall_clock_secs.insert(stage.into(), start.elapsed().as_secs_f64());
    Ok(out)
}

fn write_dataset(dir: &Path, manifest: &mut Manifest, dataset: &OfflineDataset) -> Result<()> {
    write_text(&dir.join(DATASET_CSV), &dataset.to_csv())?;
    manifest.dataset = Some(dataset.meta());
    manifest.dataset_best_normalized = Some(dataset_best_normalized(dataset)?);
    manifest.add_artifact(DATASET_CSV);
    Ok(())
}

fn write_model(dir: &Path, manifest: &mut Manifest, config: &ExperimentConfig, out: &TrainOutcome) -> Result<()> {
    let train_json = serde_json::to_value(&config.train).map_err(|e| Error::parse("train config", e))?;
    let saved = SavedModel::from_model(&out.model, Some(config.train.objective.tag()), config.seeds().init, train_json);
    saved.write(&dir.join(MODEL_JSON))?;
    write_text(&dir.join(LOSS_CSV), &out.loss_csv())?;
    manifest.train = Some(TrainSummary {
        objective: config.train.objective,
        iterations: out.loss_trace.len(),
        final_loss: out.loss_trace.last().copied().unwrap_or(f64::NAN),
        adaptation: out.model.adaptation,
    });
    manifest.add_artifact(MODEL_JSON);
    manifest.add_artifact(LOSS_CSV);
    Ok(())
}

#[derive(Serialize)]
struct SearchJson<'a> {
    best_true: Option<f64>,
    best_normalized: Option<f64>,
    dataset_best_normalized: f64,
    config: crate::search::SearchConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    trajectories: Option<&'a Vec<Vec<Vec<f64>>>>,
}

fn write_search(
    dir: &Path,
    manifest: &mut Manifest,
    config: &ExperimentConfig,
    dataset: &OfflineDataset,
    result: &SearchResult,
) -> Result<()> {
    let ds_best = dataset_best_normalized(dataset)?;
    write_text(&dir.join(SEARCH_CSV), &result.to_csv())?;
    write_json(
        &dir.join(SEARCH_JSON),
        &SearchJson {
            best_true: result.best_true,
            best_normalized: result.best_normalized,
            dataset_best_normalized: ds_best,
            config: config.search_config(),
            trajectories: result.trajectories.as_ref(),
        },
    )?;
    manifest.search = Some(SearchSummary {
        best_true: result.best_true.unwrap_or(f64::NAN),
        best_normalized: result.best_normalized.unwrap_or(f64::NAN),
        dataset_best_normalized: ds_best,
        candidates: result.candidates.len(),
    });
    manifest.add_artifact(SEARCH_CSV);
    manifest.add_artifact(SEARCH_JSON);
    Ok(())
}

fn diagnose_and_write(
    dir: &Path,
    manifest: &mut Manifest,
    config: &ExperimentConfig,
    dataset: &OfflineDataset,
    model: &MlpSurrogate,
) -> Result<()> {
    let pool = eval_pool(config, dataset)?;
    let marginals = training_marginals(config, dataset)?;
    let report = diagnose_model(config, dataset, model, &pool, &marginals)?;
    write_text(&dir.join(DIAGNOSTICS_CSV), &radius_csv(&report.rows))?;
    manifest.add_artifact(DIAGNOSTICS_CSV);
    manifest.diagnostics = Some(report);
    if config.diagnostics.audit_trials > 0 {
        let (mse, marginal) = run_audits(config, model, &pool, &marginals)?;
        write_text(&dir.join(AUDIT_MSE_CSV), &audit_csv(&mse))?;
        write_text(&dir.join(AUDIT_MARGINAL_CSV), &audit_csv(&marginal))?;
        manifest.add_artifact(AUDIT_MSE_CSV);
        manifest.add_artifact(AUDIT_MARGINAL_CSV);
        manifest.audits = Some(AuditSummary {
            trials: config.diagnostics.audit_trials,
            mse_to_rank_violations: mse.iter().filter(|r| r.holds == Some(false)).count(),
            mse_to_rank_inapplicable: mse.iter().filter(|r| r.holds.is_none()).count(),
            marginal_violations: marginal.iter().filter(|r| r.holds == Some(false)).count(),
        });
    }
    Ok(())
}

const DIAGNOSE_SEEDS: [&str; 5] = ["eval_pool", "pair_sampling", "w1_subsample", "training_marginals", "audit"];

/// Headline numbers of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub best_normalized: f64,
    pub dataset_best_normalized: f64,
    pub overall_rank_error: f64,
}

/// The full pipeline into `config.output.dir`.
pub fn run(config: &ExperimentConfig) -> Result<RunSummary> {
    config.validate()?;
    let dir = config.output.dir.clone();
    let seeds = config.seeds();
    let mut manifest = Manifest::new("run", config);
    manifest.use_seeds(
        &seeds,
        &["dataset", "init", "train", "search", "eval_pool", "pair_sampling", "w1_subsample", "training_marginals"],
    );
    if config.diagnostics.audit_trials > 0 {
        manifest.use_seeds(&seeds, &["audit"]);
    }
    let start = Instant::now();
    create_dir(&dir)?;
    let dataset = timed(&mut manifest, "gen_data", || generate_dataset(config))?;
    write_dataset(&dir, &mut manifest, &dataset)?;
    let trained = timed(&mut manifest, "train", || train_model(config, &dataset))?;
    write_model(&dir, &mut manifest, config, &trained)?;
    let result = timed(&mut manifest, "search", || search_designs(config, &dataset, &trained.model))?;
    write_search(&dir, &mut manifest, config, &dataset, &result)?;
    let t = Instant::now();
    diagnose_and_write(&dir, &mut manifest, config, &dataset, &trained.model)?;
    manifest.wall_clock_secs.insert("diagnose".into(), t.elapsed().as_secs_f64());
    manifest.wall_clock_secs.insert("total".into(), start.elapsed().as_secs_f64());
    manifest.write(&dir)?;
    Ok(RunSummary {
        dir,
        best_normalized: result.best_normalized.unwrap_or(f64::NAN),
        dataset_best_normalized: manifest.dataset_best_normalized.unwrap_or(f64::NAN),
        overall_rank_error: manifest.diagnostics.as_ref().map(|d| d.overall).unwrap_or(f64::NAN),
    })
}

fn existing_manifest(dir: &Path, command: &str, config: &ExperimentConfig) -> Result<Manifest> {
    let mut m = Manifest::read(dir)?;
    m.command = command.into();
    m.version = version_string();
    m.config = config.clone();
    Ok(m)
}

pub fn gen_data(config: &ExperimentConfig) -> Result<()> {
    config.validate()?;
    let dir = &config.output.dir;
    let mut manifest = Manifest::new("gen-data", config);
    manifest.use_seeds(&config.seeds(), &["dataset"]);
    create_dir(dir)?;
    let dataset = timed(&mut manifest, "gen_data", || generate_dataset(config))?;
    write_dataset(dir, &mut manifest, &dataset)?;
    manifest.write(dir)
}

pub fn train(config: &ExperimentConfig) -> Result<()> {
    config.validate()?;
    let dir = &config.output.dir;
    let mut manifest = existing_manifest(dir, "train", config)?;
    let dataset = load_dataset(dir, &manifest)?;
    manifest.use_seeds(&config.seeds(), &["init", "train"]);
    let trained = timed(&mut manifest, "train", || train_model(config, &dataset))?;
    write_model(dir, &mut manifest, config, &trained)?;
    manifest.write(dir)
}

pub fn search(config: &ExperimentConfig) -> Result<()> {
    config.validate()?;
    let dir = &config.output.dir;
    let mut manifest = existing_manifest(dir, "search", config)?;
    let dataset = load_dataset(dir, &manifest)?;
    let model = load_model(dir)?;
    manifest.use_seeds(&config.seeds(), &["search"]);
    let result = timed(&mut manifest, "search", || search_designs(config, &dataset, &model))?;
    write_search(dir, &mut manifest, config, &dataset, &result)?;
    manifest.write(dir)
}

pub fn diagnose(config: &ExperimentConfig) -> Result<()> {
    config.validate()?;
    let dir = &config.output.dir;
    let mut manifest = existing_manifest(dir, "diagnose", config)?;
    let dataset = load_dataset(dir, &manifest)?;
    let model = load_model(dir)?;
    let names: &[&str] = if config.diagnostics.audit_trials > 0 { &DIAGNOSE_SEEDS } else { &DIAGNOSE_SEEDS[..4] };
    manifest.use_seeds(&config.seeds(), names);
    let t = Instant::now();
    diagnose_and_write(dir, &mut manifest, config, &dataset, &model)?;
    manifest.wall_clock_secs.insert("diagnose".into(), t.elapsed().as_secs_f64());
    manifest.write(dir)
}

// ---------------------------------------------------------------------------
// Sweeps

/// Grid file layout:
///
/// ```toml
/// seeds = [0, 1, 2]
/// [axes]
/// "train.lambda" = [0.0, 0.1]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub axes: BTreeMap<String, Vec<toml::Value>>,
}

impl SweepGrid {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("sweep grid", e.message()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
            other => other,
        })
    }

    /// Axis values of every cell, in row-major order over the sorted axes.
    pub fn cells(&self) -> Vec<Vec<(String, toml::Value)>> {
        let mut cells: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
        for (path, values) in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|cell| {
                    values.iter().map(move |v| {
                        let mut next = cell.clone();
                        next.push((path.clone(), v.clone()));
                        next
                    })
                })
                .collect();
        }
        cells
    }

    fn validate(&self, base: &ExperimentConfig) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::validation("grid.seeds", "at least one seed is required"));
        }
        for (path, values) in &self.axes {
            let first = values
                .first()
                .ok_or_else(|| Error::validation(format!("grid.axes.{path}"), "axis has no values"))?;
            base.with_override(path, first.clone())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub cell: usize,
    pub seed: u64,
    pub dir: PathBuf,
    pub outcome: std::result::Result<RunSummary, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub cell: usize,
    pub values: Vec<(String, String)>,
    pub runs: usize,
    pub failed: usize,
    pub best_normalized_mean: Option<f64>,
    pub best_normalized_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub runs: Vec<SweepRun>,
    pub cells: Vec<SweepCell>,
}

fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn cell_config(base: &ExperimentConfig, cell: &[(String, toml::Value)], seed: u64, dir: PathBuf) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    for (path, value) in cell {
        cfg = cfg.with_override(path, value.clone())?;
    }
    cfg.seed = seed;
    cfg.output.dir = dir;
    Ok(cfg)
}

/// One run per (cell, seed) under `base.output.dir/cell_XXX/seed_N`, with
/// `sweep_runs.csv` and `sweep_summary.csv` at the top level. `threads`
/// bounds the number of concurrent cells.
pub fn sweep(base: &ExperimentConfig, grid: &SweepGrid, threads: usize) -> Result<SweepSummary> {
    base.validate()?;
    grid.validate(base)?;
    let root = base.output.dir.clone();
    let cells = grid.cells();
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| grid.seeds.iter().map(move |&s| (c, s)))
        .collect();
    create_dir(&root)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::validation("threads", e.to_string()))?;
    let runs: Vec<SweepRun> = pool.install(|| {
        jobs.par_iter()
            .map(|&(cell, seed)| {
                let dir = root.join(format!("cell_{cell:03}")).join(format!("seed_{seed}"));
                let outcome = cell_config(base, &cells[cell], seed, dir.clone())
                    .and_then(|cfg| run(&cfg))
                    .map_err(|e| e.to_string());
                SweepRun { cell, seed, dir, outcome }
            })
            .collect()
    });

    let summary_cells: Vec<SweepCell> = cells
        .iter()
        .enumerate()
        .map(|(c, values)| {
            let ok: Vec<f64> = runs
                .iter()
                .filter(|r| r.cell == c)
                .filter_map(|r| r.outcome.as_ref().ok().map(|s| s.best_normalized))
                .collect();
            let total = runs.iter().filter(|r| r.cell == c).count();
            let (mean, std) = mean_std(&ok);
            SweepCell {
                cell: c,
                values: values.iter().map(|(k, v)| (k.clone(), value_label(v))).collect(),
                runs: total,
                failed: total - ok.len(),
                best_normalized_mean: mean,
                best_normalized_std: std,
            }
        })
        .collect();
    let summary = SweepSummary {
        runs,
        cells: summary_cells,
    };
    let axes: Vec<&String> = grid.axes.keys().collect();
    write_text(&root.join("sweep_runs.csv"), &sweep_runs_csv(&summary, &axes, &cells))?;
    write_text(&root.join("sweep_summary.csv"), &sweep_summary_csv(&summary, &axes))?;
    Ok(summary)
}

/// Mean and sample standard deviation; the deviation is zero for one value.
pub fn mean_std(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (Some(mean), Some(var.sqrt()))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn sweep_runs_csv(summary: &SweepSummary, axes: &[&String], cells: &[Vec<(String, toml::Value)>]) -> String {
    let mut out = String::from("cell,seed");
    for a in axes {
        let _ = write!(out, ",{}", csv_field(a));
    }
    out.push_str(",status,best_normalized,dataset_best_normalized,overall_rank_error,error\n");
    for r in &summary.runs {
        let _ = write!(out, "{},{}", r.cell, r.seed);
        for (_, v) in &cells[r.cell] {
            let _ = write!(out, ",{}", csv_field(&value_label(v)));
        }
        match &r.outcome {
            Ok(s) => {
                let _ = writeln!(
                    out,
                    ",ok,{},{},{},",
                    fmt_f64(s.best_normalized),
                    fmt_f64(s.dataset_best_normalized),
                    fmt_f64(s.overall_rank_error)
                );
            }
            Err(e) => {
                let _ = writeln!(out, ",failed,,,,{}", csv_field(e));
            }
        }
    }
    out
}

fn sweep_summary_csv(summary: &SweepSummary, axes: &[&String]) -> String {
    let mut out = String::from("cell");
    for a in axes {
        let _ = write!(out, ",{}", csv_field(a));
    }
    out.push_str(",runs,failed,best_normalized_mean,best_normalized_std,best_normalized\n");
    for c in &summary.cells {
        let _ = write!(out, "{}", c.cell);
        for (_, v) in &c.values {
            let _ = write!(out, ",{}", csv_field(v));
        }
        let pretty = match (c.best_normalized_mean, c.best_normalized_std) {
            (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
            _ => String::new(),
        };
        let _ = writeln!(
            out,
            ",{},{},{},{},{}",
            c.runs,
            c.failed,
            opt(c.best_normalized_mean),
            opt(c.best_normalized_std),
            pretty
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Comparison

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub run: String,
    pub method: String,
    pub best_normalized: f64,
    pub overall_rank_error: f64,
    pub radius_errors: Vec<Option<f64>>,
}

/// Joins finished runs into one table sorted by `best_normalized`
/// descending. Delta columns are relative to the first directory given.
pub fn compare(dirs: &[PathBuf]) -> Result<String> {
    if dirs.is_empty() {
        return Err(Error::validation("compare", "at least one run directory is required"));
    }
    let mut radii: Option<Vec<f64>> = None;
    let mut rows = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let m = Manifest::read(dir)?;
        let incomplete = || Error::validation("run directory", format!("{} has no search and diagnostics results", dir.display()));
        let diag = m.diagnostics.as_ref().ok_or_else(incomplete)?;
        let search = m.search.as_ref().ok_or_else(incomplete)?;
        let these: Vec<f64> = diag.rows.iter().map(|r| r.d).collect();
        match &radii {
            None => radii = Some(these),
            Some(r) if *r != these => {
                return Err(Error::validation(
                    "compare",
                    format!("{} uses radii {these:?}, expected {r:?}", dir.display()),
                ))
            }
            Some(_) => {}
        }
        rows.push(CompareRow {
            run: dir.display().to_string(),
            method: m.config.train.objective.tag().to_string(),
            best_normalized: search.best_normalized,
            overall_rank_error: diag.overall,
            radius_errors: diag.rows.iter().map(|r| r.rank_error).collect(),
        });
    }
    let radii = radii.unwrap_or_default();
    let reference = rows[0].clone();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[b].best_normalized.total_cmp(&rows[a].best_normalized).then(a.cmp(&b)));

    let mut out = String::from("run,method,best_normalized,overall_rank_error");
    for d in &radii {
        let _ = write!(out, ",rank_error_d_{d}");
    }
    out.push_str(",delta_best_normalized,delta_overall_rank_error");
    for d in &radii {
        let _ = write!(out, ",delta_rank_error_d_{d}");
    }
    out.push('\n');
    for &i in &order {
        let r = &rows[i];
        let _ = write!(
            out,
            "{},{},{},{}",
            csv_field(&r.run),
            r.method,
            fmt_f64(r.best_normalized),
            fmt_f64(r.overall_rank_error)
        );
        for e in &r.radius_errors {
            let _ = write!(out, ",{}", opt(*e));
        }
        let _ = write!(
            out,
            ",{},{}",
            fmt_f64(r.best_normalized - reference.best_normalized),
            fmt_f64(r.overall_rank_error - reference.overall_rank_error)
        );
        for (e, e0) in r.radius_errors.iter().zip(&reference.radius_errors) {
            let delta = match (e, e0) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            };
            let _ = write!(out, ",{}", opt(delta));
        }
        out.push('\n');
    }
    Ok(out)
}
