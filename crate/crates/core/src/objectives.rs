//! Training objectives: pointwise MSE, global pairwise ranking, and
//! distribution-aware ranking (DAR) over a quantile partition of the data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Optimizer, TrainConfig};
use crate::surrogate::{zscore_adapt, Adaptation, MlpSurrogate, Standardizer, Trace};
use crate::task::OfflineDataset;

/// Slack applied before taking `ceil(epsilon * m)` so that products such as
/// `0.1 * 30` do not round up to an extra element.
const QUANTILE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Mse,
    RankGlobal,
    Dar,
}

impl ObjectiveKind {
    pub fn tag(self) -> &'static str {
        match self {
            ObjectiveKind::Mse => "mse",
            ObjectiveKind::RankGlobal => "rank_global",
            ObjectiveKind::Dar => "dar",
        }
    }
}

/// Split of a dataset into the near-optimal top band and the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionedDataset {
    pub q_eps: f64,
    pub near_optimal: Vec<usize>,
    pub suboptimal: Vec<usize>,
    pub epsilon: f64,
}

/// Number of elements in the top `epsilon` band of `m` items.
pub fn top_count(epsilon: f64, m: usize) -> usize {
    ((epsilon * m as f64) - QUANTILE_SLACK).ceil().max(0.0) as usize
}

/// `q_eps` is the `ceil(epsilon * m)`-th largest score; every score at or
/// above it (threshold ties included) is near-optimal.
pub fn partition_scores(scores: &[f64], epsilon: f64) -> Result<PartitionedDataset> {
    let m = scores.len();
    if m < 2 {
        return Err(Error::validation("dataset", "partition needs at least 2 scores"));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::validation("epsilon", format!("{epsilon} is outside (0, 1)")));
    }
    let k = top_count(epsilon, m);
    if k == 0 {
        return Err(Error::Partition(format!(
            "epsilon = {epsilon} selects no designs out of {m}"
        )));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let q_eps = sorted[k - 1];
    let (near_optimal, suboptimal): (Vec<usize>, Vec<usize>) = (0..m).partition(|&i| scores[i] >= q_eps);
    if suboptimal.is_empty() {
        return Err(Error::Partition(format!(
            "every score is >= q_eps = {q_eps}; the suboptimal set is empty"
        )));
    }
    Ok(PartitionedDataset {
        q_eps,
        near_optimal,
        suboptimal,
        epsilon,
    })
}

pub fn partition(dataset: &OfflineDataset, epsilon: f64) -> Result<PartitionedDataset> {
    partition_scores(&dataset.scores, epsilon)
}

pub fn mse_loss(pred: f64, y: f64) -> f64 {
    (pred - y) * (pred - y)
}

pub fn mse_grad(pred: f64, y: f64) -> f64 {
    2.0 * (pred - y)
}

/// Hinge on the score gap, `max(0, beta - (s1 - s2))`, with `s1` preferred.
pub fn margin_rank_loss(s1: f64, s2: f64, beta: f64) -> f64 {
    (beta - (s1 - s2)).max(0.0)
}

/// `(d/ds1, d/ds2)`; zero on the flat side and at the kink.
pub fn margin_rank_grad(s1: f64, s2: f64, beta: f64) -> (f64, f64) {
    if beta - (s1 - s2) > 0.0 {
        (-1.0, 1.0)
    } else {
        (0.0, 0.0)
    }
}

/// 1 when the preferred score does not strictly beat the other.
pub fn zero_one_rank_loss(s1: f64, s2: f64) -> u8 {
    u8::from(s1 <= s2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DarConfig {
    pub epsilon: f64,
    pub lambda: f64,
    pub beta: f64,
}

impl Default for DarConfig {
    fn default() -> Self {
        DarConfig {
            epsilon: 0.2,
            lambda: 0.1,
            beta: 0.4,
        }
    }
}

impl DarConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::validation(
                "train.epsilon",
                format!("{} is outside (0, 1)", self.epsilon),
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::validation(
                "train.lambda",
                format!("{} is outside [0, 1]", self.lambda),
            ));
        }
        validate_beta(self.beta)
    }
}

pub(crate) fn validate_beta(beta: f64) -> Result<()> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::validation("train.beta", format!("{beta} must be finite and >= 0")));
    }
    Ok(())
}

/// A training pair; `preferred` should score above `other`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampledPair {
    pub preferred: usize,
    pub other: usize,
    /// True when both members come from the near-optimal set.
    pub intra: bool,
}

pub trait PairSampler {
    fn sample(&mut self, rng: &mut ChaCha8Rng) -> SampledPair;
}

/// Uniform over ordered pairs `(i, j)` with `y_i > y_j`.
#[derive(Debug, Clone)]
pub struct GlobalPairSampler<'a> {
    scores: &'a [f64],
}

impl<'a> GlobalPairSampler<'a> {
    pub fn new(scores: &'a [f64]) -> Result<Self> {
        let first = scores.first().ok_or(Error::Empty("dataset"))?;
        if scores.iter().all(|y| y == first) {
            return Err(Error::Partition("all scores are identical; no ordered pairs".into()));
        }
        Ok(GlobalPairSampler { scores })
    }
}

impl PairSampler for GlobalPairSampler<'_> {
    fn sample(&mut self, rng: &mut ChaCha8Rng) -> SampledPair {
        let m = self.scores.len();
        loop {
            let i = rng.random_range(0..m);
            let j = rng.random_range(0..m);
            let (yi, yj) = (self.scores[i], self.scores[j]);
            if yi > yj {
                return SampledPair { preferred: i, other: j, intra: false };
            }
            if yj > yi {
                return SampledPair { preferred: j, other: i, intra: false };
            }
        }
    }
}

/// Mixture sampler: with probability `1 - lambda` a cross pair
/// (near-optimal, suboptimal), otherwise two near-optimal designs ordered
/// by score with ties redrawn.
#[derive(Debug, Clone)]
pub struct DarPairSampler<'a> {
    scores: &'a [f64],
    near: &'a [usize],
    sub: &'a [usize],
    lambda: f64,
}

impl<'a> DarPairSampler<'a> {
    pub fn new(scores: &'a [f64], partition: &'a PartitionedDataset, lambda: f64) -> Result<Self> {
        let near = &partition.near_optimal;
        if near.is_empty() || partition.suboptimal.is_empty() {
            return Err(Error::Partition("both partition sides must be nonempty".into()));
        }
        if lambda > 0.0 {
            if near.len() < 2 {
                return Err(Error::Partition(format!(
                    "the near-optimal set has {} design(s); intra-region pairs need 2, set lambda = 0",
                    near.len()
                )));
            }
            let first = scores[near[0]];
            if near.iter().all(|&i| scores[i] == first) {
                return Err(Error::Partition(
                    "near-optimal scores are all tied; intra-region pairs are undefined, set lambda = 0".into(),
                ));
            }
        }
        Ok(DarPairSampler {
            scores,
            near,
            sub: &partition.suboptimal,
            lambda,
        })
    }
}

impl PairSampler for DarPairSampler<'_> {
    fn sample(&mut self, rng: &mut ChaCha8Rng) -> SampledPair {
        let u: f64 = rng.random();
        if u < 1.0 - self.lambda {
            let preferred = self.near[rng.random_range(0..self.near.len())];
            let other = self.sub[rng.random_range(0..self.sub.len())];
            return SampledPair { preferred, other, intra: false };
        }
        loop {
            let a = self.near[rng.random_range(0..self.near.len())];
            let b = self.near[rng.random_range(0..self.near.len())];
            let (ya, yb) = (self.scores[a], self.scores[b]);
            if ya > yb {
                return SampledPair { preferred: a, other: b, intra: true };
            }
            if yb > ya {
                return SampledPair { preferred: b, other: a, intra: true };
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpSurrogate,
    /// Mean minibatch loss per iteration.
    pub loss_trace: Vec<f64>,
    pub adaptation: Option<Adaptation>,
}

impl TrainOutcome {
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("iteration,loss\n");
        for (i, l) in self.loss_trace.iter().enumerate() {
            out.push_str(&format!("{i},{}\n", crate::task::fmt_f64(*l)));
        }
        out
    }
}

fn check_compatible(model: &MlpSurrogate, dataset: &OfflineDataset) -> Result<()> {
    dataset.validate()?;
    if model.dim() != dataset.dim() {
        return Err(Error::Shape {
            expected: model.dim(),
            got: dataset.dim(),
        });
    }
    Ok(())
}

fn batch_indices(rng: &mut ChaCha8Rng, m: usize, batch: usize, out: &mut Vec<usize>) {
    out.clear();
    if batch >= m {
        out.extend(0..m);
    } else {
        out.extend((0..batch).map(|_| rng.random_range(0..m)));
    }
}

/// Minibatch regression on standardized inputs and targets.
///
/// The target standardization is folded back into the output layer when
/// training ends, so the returned model predicts scores in raw units and the
/// loss trace is reported in raw units too. No output adaptation is applied.
pub fn train_mse(mut model: MlpSurrogate, dataset: &OfflineDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    check_compatible(&model, dataset)?;
    model.scaler = Standardizer::fit(&dataset.designs)?;
    model.adaptation = None;
    let inputs: Vec<Vec<f64>> = dataset.designs.iter().map(|x| model.scaler.apply(x)).collect();
    let m = inputs.len();
    let y_mean = dataset.scores.iter().sum::<f64>() / m as f64;
    let y_var = dataset.scores.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / m as f64;
    let y_std = if y_var.sqrt() < 1e-12 { 1.0 } else { y_var.sqrt() };
    let targets: Vec<f64> = dataset.scores.iter().map(|y| (y - y_mean) / y_std).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(config, model.net.num_params());
    let mut grad = vec![0.0; model.net.num_params()];
    let mut traces = vec![Trace::default(); config.batch_size.min(m)];
    let mut batch = Vec::new();
    let mut loss_trace = Vec::with_capacity(config.iterations);

    for iteration in 0..config.iterations {
        batch_indices(&mut rng, m, config.batch_size, &mut batch);
        let scale = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for (&i, trace) in batch.iter().zip(traces.iter_mut()) {
            let pred = model.net.forward_traced(&inputs[i], trace)?;
            loss += mse_loss(pred, targets[i]);
            model.net.backward(trace, scale * mse_grad(pred, targets[i]), &mut grad, None)?;
        }
        let loss = loss * scale * y_std * y_std;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration, loss });
        }
        loss_trace.push(loss);
        opt.step(model.net.params_mut(), &mut grad);
    }

    // h_raw = y_std * h_std + y_mean
    let last = model.net.num_layers() - 1;
    model.net.weights_mut(last).iter_mut().for_each(|w| *w *= y_std);
    let b = &mut model.net.biases_mut(last)[0];
    *b = *b * y_std + y_mean;

    Ok(TrainOutcome {
        model,
        loss_trace,
        adaptation: None,
    })
}

fn train_pairs(
    mut model: MlpSurrogate,
    dataset: &OfflineDataset,
    config: &TrainConfig,
    beta: f64,
    sampler: &mut dyn PairSampler,
) -> Result<TrainOutcome> {
    model.scaler = Standardizer::fit(&dataset.designs)?;
    model.adaptation = None;
    let inputs: Vec<Vec<f64>> = dataset.designs.iter().map(|x| model.scaler.apply(x)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(config, model.net.num_params());
    let mut grad = vec![0.0; model.net.num_params()];
    let (mut t1, mut t2) = (Trace::default(), Trace::default());
    let mut loss_trace = Vec::with_capacity(config.iterations);
    let scale = 1.0 / config.batch_size as f64;

    for iteration in 0..config.iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for _ in 0..config.batch_size {
            let pair = sampler.sample(&mut rng);
            let s1 = model.net.forward_traced(&inputs[pair.preferred], &mut t1)?;
            let s2 = model.net.forward_traced(&inputs[pair.other], &mut t2)?;
            loss += margin_rank_loss(s1, s2, beta);
            let (g1, g2) = margin_rank_grad(s1, s2, beta);
            if g1 != 0.0 {
                model.net.backward(&mut t1, scale * g1, &mut grad, None)?;
                model.net.backward(&mut t2, scale * g2, &mut grad, None)?;
            }
        }
        let loss = loss * scale;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration, loss });
        }
        loss_trace.push(loss);
        opt.step(model.net.params_mut(), &mut grad);
    }

    let adaptation = zscore_adapt(&mut model, dataset)?;
    Ok(TrainOutcome {
        model,
        loss_trace,
        adaptation: Some(adaptation),
    })
}

/// Margin ranking over pairs drawn uniformly from all strictly ordered
/// pairs of the dataset, followed by output z-score adaptation.
pub fn train_rank_global(
    model: MlpSurrogate,
    dataset: &OfflineDataset,
    config: &TrainConfig,
    beta: f64,
) -> Result<TrainOutcome> {
    config.validate()?;
    validate_beta(beta)?;
    check_compatible(&model, dataset)?;
    let mut sampler = GlobalPairSampler::new(&dataset.scores)?;
    train_pairs(model, dataset, config, beta, &mut sampler)
}

/// Distribution-aware ranking: quantile partition, mixed cross/intra pair
/// sampling, margin loss, then output z-score adaptation.
pub fn train_dar(
    model: MlpSurrogate,
    dataset: &OfflineDataset,
    config: &TrainConfig,
    dar: &DarConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    dar.validate()?;
    check_compatible(&model, dataset)?;
    let split = partition(dataset, dar.epsilon)?;
    let mut sampler = DarPairSampler::new(&dataset.scores, &split, dar.lambda)?;
    train_pairs(model, dataset, config, dar.beta, &mut sampler)
}
