//! Synthetic black-box objectives and the offline dataset protocol.
//!
//! Every objective is stored "higher is better" so the rest of the pipeline
//! only ever maximizes. The Branin function is therefore negated.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

const BRANIN_A: f64 = 1.0;
const BRANIN_R: f64 = 6.0;
const BRANIN_S: f64 = 10.0;

/// Value of the negated Branin function at any of its three maximizers.
pub const BRANIN_OPTIMUM: f64 = -0.397_887_357_729_738_1;

/// The three maximizers of the negated Branin function.
pub const BRANIN_MAXIMIZERS: [[f64; 2]; 3] = [[-PI, 12.275], [PI, 2.275], [9.424_78, 2.475]];

/// Negated Branin function, defined for any finite 2-vector.
pub fn eval_branin(x: &[f64]) -> Result<f64> {
    check_len(2, x.len())?;
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("branin input {x:?}")));
    }
    let b = 5.1 / (4.0 * PI * PI);
    let c = 5.0 / PI;
    let t = 1.0 / (8.0 * PI);
    let (x1, x2) = (x[0], x[1]);
    let inner = x2 - b * x1 * x1 + c * x1 - BRANIN_R;
    Ok(-(BRANIN_A * inner * inner + BRANIN_S * (1.0 - t) * x1.cos() + BRANIN_S))
}

/// `-||x - center||^2`.
pub fn eval_quadratic_bowl(x: &[f64], center: &[f64]) -> Result<f64> {
    check_len(center.len(), x.len())?;
    Ok(-x
        .iter()
        .zip(center)
        .map(|(a, c)| (a - c) * (a - c))
        .sum::<f64>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    Branin,
    QuadraticBowl { center: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub dim: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub objective: Objective,
    /// Always true: objectives are stored in maximize orientation.
    pub maximize: bool,
    pub y_min_full: Option<f64>,
    pub y_max_full: Option<f64>,
}

impl TaskSpec {
    pub fn branin() -> Self {
        TaskSpec {
            name: "branin".into(),
            dim: 2,
            lower: vec![-5.0, 0.0],
            upper: vec![10.0, 15.0],
            objective: Objective::Branin,
            maximize: true,
            y_min_full: None,
            y_max_full: None,
        }
    }

    pub fn quadratic_bowl(center: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let task = TaskSpec {
            name: "quadratic_bowl".into(),
            dim: center.len(),
            lower,
            upper,
            objective: Objective::QuadraticBowl { center },
            maximize: true,
            y_min_full: None,
            y_max_full: None,
        };
        task.validate()?;
        Ok(task)
    }

    /// Looks up a built-in task by name.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "branin" => Ok(Self::branin()),
            "quadratic_bowl" => Self::quadratic_bowl(vec![0.5, 0.5], vec![-2.0; 2], vec![2.0; 2]),
            other => Err(Error::validation(
                "task.name",
                format!("unknown task `{other}` (expected branin or quadratic_bowl)"),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::validation("task.dim", "must be positive"));
        }
        check_len(self.dim, self.lower.len())?;
        check_len(self.dim, self.upper.len())?;
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::validation(
                    "task.bounds",
                    format!("degenerate box on coordinate {i}: [{lo}, {hi}]"),
                ));
            }
        }
        if let Objective::QuadraticBowl { center } = &self.objective {
            check_len(self.dim, center.len())?;
        }
        Ok(())
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        check_len(self.dim, x.len())?;
        match &self.objective {
            Objective::Branin => eval_branin(x),
            Objective::QuadraticBowl { center } => eval_quadratic_bowl(x, center),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }

    /// Draws `n` designs uniformly from the box.
    pub fn sample_uniform(&self, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                self.lower
                    .iter()
                    .zip(&self.upper)
                    .map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
                    .collect()
            })
            .collect()
    }

    pub fn extrema(&self) -> Result<(f64, f64)> {
        match (self.y_min_full, self.y_max_full) {
            (Some(lo), Some(hi)) => Ok((lo, hi)),
            _ => Err(Error::NoExtrema(self.name.clone())),
        }
    }
}

/// `(y - y_min) / (y_max - y_min)` using the extrema of the full generated pool.
///
/// Values above 1 are legitimate: a searched design may beat the pool optimum.
pub fn normalized_score(y: f64, task: &TaskSpec) -> Result<f64> {
    let (lo, hi) = task.extrema()?;
    if hi == lo {
        return Err(Error::DegenerateExtrema(lo));
    }
    Ok((y - lo) / (hi - lo))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolSampling {
    #[default]
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub pool_size: usize,
    pub keep_fraction: f64,
    pub seed: u64,
    /// Standard deviation of Gaussian observation noise added to the
    /// retained scores. Zero disables noise.
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub sampling: PoolSampling,
}

impl DatasetConfig {
    pub fn keep_count(&self) -> usize {
        (self.keep_fraction * self.pool_size as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_size < 2 {
            return Err(Error::validation("task.pool_size", "must be at least 2"));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::validation(
                "task.keep_fraction",
                format!("{} is outside (0, 1]", self.keep_fraction),
            ));
        }
        if self.keep_count() < 2 {
            return Err(Error::validation(
                "task.keep_fraction",
                format!("keeps {} designs; at least 2 are required", self.keep_count()),
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::validation("task.noise_std", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub designs: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub task: TaskSpec,
    pub seed: u64,
    pub pool_size: usize,
    pub keep_fraction: f64,
}

/// Indices of the `keep` lowest scores, ordered by `(score, index)`.
pub fn select_worst(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order.truncate(keep);
    order
}

/// Samples a pool, records its score extrema on the task, and keeps the
/// worst `keep_fraction` of it.
pub fn make_offline_dataset(task: &TaskSpec, config: &DatasetConfig) -> Result<OfflineDataset> {
    task.validate()?;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pool = task.sample_uniform(config.pool_size, &mut rng);
    let pool_scores = pool
        .iter()
        .map(|x| task.evaluate(x))
        .collect::<Result<Vec<_>>>()?;

    let (lo, hi) = min_max(&pool_scores);
    let mut task = task.clone();
    task.y_min_full = Some(lo);
    task.y_max_full = Some(hi);
    if !(lo < hi) {
        return Err(Error::DegenerateExtrema(lo));
    }

    let kept = select_worst(&pool_scores, config.keep_count());
    let designs: Vec<Vec<f64>> = kept.iter().map(|&i| pool[i].clone()).collect();
    let mut scores: Vec<f64> = kept.iter().map(|&i| pool_scores[i]).collect();
    if config.noise_std > 0.0 {
        let noise = Normal::new(0.0, config.noise_std)
            .map_err(|e| Error::validation("task.noise_std", e.to_string()))?;
        for y in &mut scores {
            *y += noise.sample(&mut rng);
        }
    }

    Ok(OfflineDataset {
        designs,
        scores,
        task,
        seed: config.seed,
        pool_size: config.pool_size,
        keep_fraction: config.keep_fraction,
    })
}

pub(crate) fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Sidecar metadata written next to the dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub task_name: String,
    pub seed: u64,
    pub pool_size: usize,
    pub keep_fraction: f64,
    pub y_min_full: Option<f64>,
    pub y_max_full: Option<f64>,
    pub n: usize,
    pub task: TaskSpec,
}

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl OfflineDataset {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.task.dim
    }

    pub fn best_score(&self) -> f64 {
        min_max(&self.scores).1
    }

    /// Builds a dataset from explicit points, checking every invariant.
    pub fn from_points(task: TaskSpec, designs: Vec<Vec<f64>>, scores: Vec<f64>) -> Result<Self> {
        let ds = OfflineDataset {
            pool_size: designs.len(),
            keep_fraction: 1.0,
            designs,
            scores,
            task,
            seed: 0,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        check_len(self.designs.len(), self.scores.len())?;
        if self.len() < 2 {
            return Err(Error::validation("dataset", "needs at least 2 points"));
        }
        for (i, x) in self.designs.iter().enumerate() {
            if !self.task.contains(x) {
                return Err(Error::validation(
                    "dataset",
                    format!("design {i} lies outside the task box"),
                ));
            }
        }
        if let Some(i) = self.scores.iter().position(|y| !y.is_finite()) {
            return Err(Error::NonFinite(format!("dataset score {i}")));
        }
        Ok(())
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            task_name: self.task.name.clone(),
            seed: self.seed,
            pool_size: self.pool_size,
            keep_fraction: self.keep_fraction,
            y_min_full: self.task.y_min_full,
            y_max_full: self.task.y_max_full,
            n: self.len(),
            task: self.task.clone(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..self.dim()).map(|i| format!("x{i}")).collect();
        let _ = writeln!(out, "{},y", header.join(","));
        for (x, y) in self.designs.iter().zip(&self.scores) {
            for v in x {
                out.push_str(&fmt_f64(*v));
                out.push(',');
            }
            out.push_str(&fmt_f64(*y));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, csv_path: &Path, meta_path: &Path) -> Result<()> {
        fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        let meta = serde_json::to_string_pretty(&self.meta())
            .map_err(|e| Error::parse("dataset sidecar", e))?;
        fs::write(meta_path, meta + "\n").map_err(|e| Error::io(meta_path, e))
    }

    pub fn read(csv_path: &Path, meta_path: &Path) -> Result<Self> {
        let meta_text = fs::read_to_string(meta_path).map_err(|e| Error::io(meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&meta_text)
            .map_err(|e| Error::parse(meta_path.display().to_string(), e))?;
        let csv = fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
        Self::from_csv(&csv, meta).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(csv_path.display().to_string(), message),
            other => other,
        })
    }

    /// Rebuilds a dataset from its CSV text and metadata.
    pub fn from_csv(csv: &str, meta: DatasetMeta) -> Result<Self> {
        let (designs, scores) = parse_csv(csv, meta.task.dim).map_err(|msg| Error::parse("dataset csv", msg))?;
        let ds = OfflineDataset {
            designs,
            scores,
            task: meta.task,
            seed: meta.seed,
            pool_size: meta.pool_size,
            keep_fraction: meta.keep_fraction,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn parse_csv(text: &str, dim: usize) -> std::result::Result<(Vec<Vec<f64>>, Vec<f64>), String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("missing header")?;
    let mut expected: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    expected.push("y".into());
    if header != expected.join(",") {
        return Err(format!("unexpected header `{header}`"));
    }
    let mut designs = Vec::new();
    let mut scores = Vec::new();
    for (row, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let values = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| format!("row {row}: {e}"))?;
        if values.len() != dim + 1 {
            return Err(format!("row {row}: expected {} fields", dim + 1));
        }
        scores.push(values[dim]);
        designs.push(values[..dim].to_vec());
    }
    Ok((designs, scores))
}
