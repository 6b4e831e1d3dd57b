//! Projected gradient ascent on an adapted surrogate.
//!
//! Search runs in the standardized input space the surrogate was trained in;
//! the box is mapped into that space and final designs are mapped back and
//! clamped to the original box.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::objectives::PartitionedDataset;
use crate::surrogate::MlpSurrogate;
use crate::task::{fmt_f64, normalized_score, OfflineDataset, TaskSpec};

/// A scalar field with a gradient, the thing gradient ascent climbs.
pub trait Differentiable: Sync {
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// The adapted surrogate `(h(z) - mu) / sigma` as a function of the
/// standardized input `z`.
#[derive(Debug, Clone, Copy)]
pub struct AdaptedStandardized<'a> {
    model: &'a MlpSurrogate,
    mean: f64,
    std: f64,
}

impl<'a> AdaptedStandardized<'a> {
    pub fn new(model: &'a MlpSurrogate) -> Result<Self> {
        let a = model.adaptation()?;
        Ok(AdaptedStandardized {
            model,
            mean: a.mean,
            std: a.std,
        })
    }
}

impl Differentiable for AdaptedStandardized<'_> {
    fn value(&self, z: &[f64]) -> Result<f64> {
        Ok((self.model.net.forward(z)? - self.mean) / self.std)
    }

    fn gradient(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut g = self.model.net.input_gradient(z)?;
        g.iter_mut().for_each(|v| *v /= self.std);
        Ok(g)
    }
}

/// The adapted surrogate on raw inputs.
#[derive(Debug, Clone, Copy)]
pub struct AdaptedRaw<'a>(pub &'a MlpSurrogate);

impl Differentiable for AdaptedRaw<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        self.0.predict_adapted(x)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let std = self.0.adaptation()?.std;
        let mut g = self.0.input_gradient(x)?;
        g.iter_mut().for_each(|v| *v /= std);
        Ok(g)
    }
}

/// The unadapted surrogate output on raw inputs.
#[derive(Debug, Clone, Copy)]
pub struct RawForward<'a>(pub &'a MlpSurrogate);

impl Differentiable for RawForward<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        self.0.forward(x)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.0.input_gradient(x)
    }
}

/// Per-coordinate clamp into `[lower, upper]`.
pub fn project_box(x: &[f64], lower: &[f64], upper: &[f64]) -> Result<Vec<f64>> {
    check_len(x.len(), lower.len())?;
    check_len(x.len(), upper.len())?;
    Ok(x.iter()
        .zip(lower.iter().zip(upper))
        .map(|(v, (lo, hi))| v.max(*lo).min(*hi))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitRule {
    /// The highest-scoring near-optimal designs.
    #[default]
    TopkOfSEps,
    /// A seeded shuffle of the near-optimal designs.
    RandomSEps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub eta: f64,
    pub steps: usize,
    pub candidates: usize,
    #[serde(default)]
    pub init_rule: InitRule,
    pub seed: u64,
    #[serde(default)]
    pub record_trajectories: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            eta: 0.05,
            steps: 200,
            candidates: 32,
            init_rule: InitRule::TopkOfSEps,
            seed: 0,
            record_trajectories: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::validation("search.eta", format!("{} must be finite and >= 0", self.eta)));
        }
        if self.candidates < 1 {
            return Err(Error::validation("search.candidates", "must be >= 1"));
        }
        Ok(())
    }
}

/// `steps` iterations of `x <- clamp(x + eta * grad(x))`; returns every iterate.
pub fn ascend(
    objective: &dyn Differentiable,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    eta: f64,
    steps: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut path = Vec::with_capacity(steps + 1);
    let mut x = project_box(x0, lower, upper)?;
    if x != x0 {
        return Err(Error::validation("x0", "initial design lies outside the box"));
    }
    path.push(x.clone());
    for step in 0..steps {
        let g = objective.gradient(&x).map_err(|e| match e {
            Error::NonFiniteActivation { .. } | Error::NonFinite(_) => Error::AscentDiverged { step },
            other => other,
        })?;
        check_len(x.len(), g.len())?;
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::AscentDiverged { step });
        }
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi += eta * gi;
        }
        x = project_box(&x, lower, upper)?;
        path.push(x.clone());
    }
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Dataset index the trajectory started from.
    pub init_index: usize,
    pub init: Vec<f64>,
    pub design: Vec<f64>,
    pub surrogate_score: f64,
    pub true_score: Option<f64>,
    pub normalized_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub candidates: Vec<Candidate>,
    pub best_true: Option<f64>,
    pub best_normalized: Option<f64>,
    /// Raw-space iterates per candidate when requested.
    pub trajectories: Option<Vec<Vec<Vec<f64>>>>,
}

/// Dataset indices the `candidates` trajectories start from.
pub fn initial_indices(dataset: &OfflineDataset, split: &PartitionedDataset, config: &SearchConfig) -> Result<Vec<usize>> {
    if split.near_optimal.is_empty() {
        return Err(Error::Empty("near-optimal set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order = split.near_optimal.clone();
    match config.init_rule {
        InitRule::TopkOfSEps => {
            order.sort_by(|&a, &b| dataset.scores[b].total_cmp(&dataset.scores[a]).then(a.cmp(&b)));
        }
        InitRule::RandomSEps => order.shuffle(&mut rng),
    }
    let k = config.candidates;
    let mut picks: Vec<usize> = order.iter().copied().take(k).collect();
    while picks.len() < k {
        picks.push(order[rng.random_range(0..order.len())]);
    }
    Ok(picks)
}

/// Runs one trajectory per initialization and records surrogate scores.
/// True scores are filled in later by [`score_candidates`].
pub fn propose_candidates(
    model: &MlpSurrogate,
    dataset: &OfflineDataset,
    split: &PartitionedDataset,
    config: &SearchConfig,
) -> Result<SearchResult> {
    config.validate()?;
    let view = AdaptedStandardized::new(model)?;
    let task = &dataset.task;
    let scaler = &model.scaler;
    let z_lower = scaler.apply(&task.lower);
    let z_upper = scaler.apply(&task.upper);
    let inits = initial_indices(dataset, split, config)?;

    let runs: Vec<(Candidate, Option<Vec<Vec<f64>>>)> = inits
        .par_iter()
        .map(|&idx| {
            let x0 = &dataset.designs[idx];
            let z0 = project_box(&scaler.apply(x0), &z_lower, &z_upper)?;
            let path = ascend(&view, &z0, &z_lower, &z_upper, config.eta, config.steps)?;
            let to_raw = |z: &[f64]| project_box(&scaler.invert(z), &task.lower, &task.upper);
            let design = if config.steps == 0 {
                x0.clone()
            } else {
                to_raw(path.last().unwrap())?
            };
            let surrogate_score = model.predict_adapted(&design)?;
            let trajectory = if config.record_trajectories {
                Some(path.iter().map(|z| to_raw(z)).collect::<Result<Vec<_>>>()?)
            } else {
                None
            };
            Ok((
                Candidate {
                    init_index: idx,
                    init: x0.clone(),
                    design,
                    surrogate_score,
                    true_score: None,
                    normalized_score: None,
                },
                trajectory,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let (candidates, paths): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    let trajectories = if config.record_trajectories {
        Some(paths.into_iter().map(Option::unwrap_or_default).collect())
    } else {
        None
    };
    Ok(SearchResult {
        candidates,
        best_true: None,
        best_normalized: None,
        trajectories,
    })
}

/// Evaluates every candidate on the true objective and records the best.
pub fn score_candidates(mut result: SearchResult, task: &TaskSpec) -> Result<SearchResult> {
    if result.candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    for c in &mut result.candidates {
        let y = task.evaluate(&c.design)?;
        c.true_score = Some(y);
        c.normalized_score = Some(normalized_score(y, task)?);
    }
    let best = result
        .candidates
        .iter()
        .filter_map(|c| c.true_score)
        .fold(f64::NEG_INFINITY, f64::max);
    result.best_true = Some(best);
    result.best_normalized = Some(normalized_score(best, task)?);
    Ok(result)
}

impl SearchResult {
    pub fn to_csv(&self) -> String {
        let dim = self.candidates.first().map_or(0, |c| c.design.len());
        let mut header = vec!["candidate_id".to_string()];
        header.extend((0..dim).map(|i| format!("x0_{i}")));
        header.extend((0..dim).map(|i| format!("xfinal_{i}")));
        header.extend(["surrogate_score", "true_score", "normalized_score"].map(String::from));
        let mut out = header.join(",") + "\n";
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        for (i, c) in self.candidates.iter().enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(c.init.iter().map(|v| fmt_f64(*v)));
            row.extend(c.design.iter().map(|v| fmt_f64(*v)));
            row.push(fmt_f64(c.surrogate_score));
            row.push(opt(c.true_score));
            row.push(opt(c.normalized_score));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}
