//! Theory-facing measurements on trained surrogates.
//!
//! * optimization-oriented ranking error between a near-optimal set and a
//!   suboptimal set, overall and restricted by distance to the data manifold;
//! * exact empirical 1-Wasserstein distances via minimum-cost assignment,
//!   under the Euclidean metric or the additive pair metric;
//! * numerical audits of the MSE-to-ranking reduction and of the marginal
//!   decomposition of the pair-space Wasserstein distance.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::objectives::{partition_scores, zero_one_rank_loss, PartitionedDataset};
use crate::surrogate::MlpSurrogate;
use crate::task::{fmt_f64, min_max, OfflineDataset, TaskSpec};

/// Default number of pairs above which ranking error is estimated by sampling.
pub const DEFAULT_PAIR_CAP: usize = 10_000_000;

/// Largest sample size accepted by the exact assignment solver.
pub const ASSIGNMENT_CAP: usize = 512;

/// Tolerance used when checking audited inequalities.
pub const AUDIT_TOLERANCE: f64 = 1e-9;

/// Anything that assigns a real score to a design.
pub trait Scorer: Sync {
    fn score(&self, x: &[f64]) -> Result<f64>;
}

impl Scorer for MlpSurrogate {
    fn score(&self, x: &[f64]) -> Result<f64> {
        self.forward(x)
    }
}

/// Adapts a plain closure into a [`Scorer`].
pub struct FnScorer<F>(pub F);

impl<F: Fn(&[f64]) -> f64 + Sync> Scorer for FnScorer<F> {
    fn score(&self, x: &[f64]) -> Result<f64> {
        Ok((self.0)(x))
    }
}

impl Scorer for TaskSpec {
    fn score(&self, x: &[f64]) -> Result<f64> {
        self.evaluate(x)
    }
}

pub fn score_all<X: AsRef<[f64]>>(scorer: &dyn Scorer, designs: &[X]) -> Result<Vec<f64>> {
    designs.iter().map(|x| scorer.score(x.as_ref())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSampling {
    /// Exhaustive evaluation is used while `|near| * |sub| <= cap`.
    pub cap: usize,
    pub seed: u64,
}

impl Default for PairSampling {
    fn default() -> Self {
        PairSampling {
            cap: DEFAULT_PAIR_CAP,
            seed: 0,
        }
    }
}

/// Fraction of (near, sub) score pairs where the near-optimal score does not
/// strictly exceed the suboptimal one.
pub fn ranking_error_scores(near: &[f64], sub: &[f64], sampling: PairSampling) -> Result<f64> {
    if near.is_empty() {
        return Err(Error::Empty("near-optimal set"));
    }
    if sub.is_empty() {
        return Err(Error::Empty("suboptimal set"));
    }
    let total = near.len().saturating_mul(sub.len());
    if total <= sampling.cap {
        let mut sorted = sub.to_vec();
        sorted.sort_by(f64::total_cmp);
        let wrong: usize = near
            .iter()
            .map(|&p| sorted.len() - sorted.partition_point(|&q| q < p))
            .sum();
        return Ok(wrong as f64 / total as f64);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let wrong: u64 = (0..sampling.cap)
        .map(|_| {
            let p = near[rng.random_range(0..near.len())];
            let q = sub[rng.random_range(0..sub.len())];
            u64::from(zero_one_rank_loss(p, q))
        })
        .sum();
    Ok(wrong as f64 / sampling.cap as f64)
}

pub fn ranking_error<X: AsRef<[f64]>>(
    scorer: &dyn Scorer,
    near: &[X],
    sub: &[X],
    sampling: PairSampling,
) -> Result<f64> {
    ranking_error_scores(&score_all(scorer, near)?, &score_all(scorer, sub)?, sampling)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Nearest-neighbour Euclidean distance from `x` to the manifold points.
pub fn dist_to_manifold<X: AsRef<[f64]>>(x: &[f64], manifold: &[X]) -> Result<f64> {
    let mut best = f64::INFINITY;
    for z in manifold {
        let z = z.as_ref();
        check_len(x.len(), z.len())?;
        best = best.min(euclidean(x, z));
    }
    if manifold.is_empty() {
        return Err(Error::Empty("manifold"));
    }
    Ok(best)
}

/// Largest pairwise distance within the manifold.
pub fn manifold_diameter<X: AsRef<[f64]>>(manifold: &[X]) -> f64 {
    let mut d: f64 = 0.0;
    for (i, a) in manifold.iter().enumerate() {
        for b in &manifold[i + 1..] {
            d = d.max(euclidean(a.as_ref(), b.as_ref()));
        }
    }
    d
}

/// A fresh evaluation sample split into the true top-`epsilon` band and the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPool {
    pub designs: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub split: PartitionedDataset,
    /// `max f - q_eps`: the function-value gap implied by the quantile band.
    pub value_gap: f64,
}

impl EvalPool {
    pub fn generate(task: &TaskSpec, size: usize, epsilon: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let designs = task.sample_uniform(size, &mut rng);
        let scores = score_all(task, &designs)?;
        Self::from_points(designs, scores, epsilon)
    }

    pub fn from_points(designs: Vec<Vec<f64>>, scores: Vec<f64>, epsilon: f64) -> Result<Self> {
        check_len(designs.len(), scores.len())?;
        let split = partition_scores(&scores, epsilon)?;
        let value_gap = min_max(&scores).1 - split.q_eps;
        Ok(EvalPool {
            designs,
            scores,
            split,
            value_gap,
        })
    }

    pub fn near(&self) -> Vec<&[f64]> {
        self.split.near_optimal.iter().map(|&i| self.designs[i].as_slice()).collect()
    }

    pub fn sub(&self) -> Vec<&[f64]> {
        self.split.suboptimal.iter().map(|&i| self.designs[i].as_slice()).collect()
    }

    /// `min f(near) - max f(sub)`.
    pub fn gamma_hat(&self) -> f64 {
        let near_min = self.split.near_optimal.iter().map(|&i| self.scores[i]).fold(f64::INFINITY, f64::min);
        let sub_max = self.split.suboptimal.iter().map(|&i| self.scores[i]).fold(f64::NEG_INFINITY, f64::max);
        near_min - sub_max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusRow {
    pub d: f64,
    pub n_restricted: usize,
    pub rank_error: Option<f64>,
}

/// Indices into `pool.split.suboptimal` within distance `d` of the manifold,
/// one list per radius.
pub fn restricted_sets(sub_dists: &[f64], radii: &[f64]) -> Vec<Vec<usize>> {
    radii
        .iter()
        .map(|&d| (0..sub_dists.len()).filter(|&i| sub_dists[i] <= d).collect())
        .collect()
}

fn validate_radii(radii: &[f64]) -> Result<()> {
    if radii.iter().any(|d| !(*d > 0.0) || d.is_nan()) {
        return Err(Error::validation("diagnostics.radii", "radii must be positive"));
    }
    if radii.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::validation("diagnostics.radii", "radii must be ascending"));
    }
    Ok(())
}

/// Ranking error between the pool's near-optimal band and the suboptimal
/// pool points lying within each radius of the dataset designs.
pub fn ranking_error_vs_radius(
    scorer: &dyn Scorer,
    pool: &EvalPool,
    dataset: &OfflineDataset,
    radii: &[f64],
    sampling: PairSampling,
) -> Result<Vec<RadiusRow>> {
    validate_radii(radii)?;
    let near_scores = score_all(scorer, &pool.near())?;
    let sub = pool.sub();
    let sub_scores = score_all(scorer, &sub)?;
    let sub_dists = sub
        .iter()
        .map(|x| dist_to_manifold(x, &dataset.designs))
        .collect::<Result<Vec<_>>>()?;
    restricted_sets(&sub_dists, radii)
        .into_iter()
        .zip(radii)
        .enumerate()
        .map(|(row, (idx, &d))| {
            let restricted: Vec<f64> = idx.iter().map(|&i| sub_scores[i]).collect();
            let rank_error = if restricted.is_empty() {
                None
            } else {
                let sampling = PairSampling {
                    seed: sampling.seed.wrapping_add(row as u64),
                    ..sampling
                };
                Some(ranking_error_scores(&near_scores, &restricted, sampling)?)
            };
            Ok(RadiusRow {
                d,
                n_restricted: idx.len(),
                rank_error,
            })
        })
        .collect()
}

/// 1-D empirical W1 between equal-size samples: mean gap of the sorted values.
pub fn wasserstein1_sorted(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::Empty("sample"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Minimum-cost perfect matching on a dense `n x n` cost matrix (row-major).
///
/// Shortest augmenting paths with dual potentials, O(n^3). Returns the
/// column assigned to each row.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    check_len(n * n, cost.len())?;
    if let Some(i) = cost.iter().position(|c| !c.is_finite()) {
        return Err(Error::NonFinite(format!("cost entry {i}")));
    }
    // 1-based arrays; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    Ok(assignment)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundMetric {
    Euclidean,
    /// Points are concatenated pairs `[x, x']` split at `split`;
    /// the cost is `|x - z| + |x' - z'|`.
    Pair { split: usize },
}

impl GroundMetric {
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            GroundMetric::Euclidean => euclidean(a, b),
            GroundMetric::Pair { split } => {
                euclidean(&a[..split], &b[..split]) + euclidean(&a[split..], &b[split..])
            }
        }
    }
}

/// Exact empirical W1 between two equal-size point sets.
pub fn wasserstein1_assignment<X: AsRef<[f64]>>(a: &[X], b: &[X], metric: GroundMetric) -> Result<f64> {
    check_len(a.len(), b.len())?;
    let n = a.len();
    if n == 0 {
        return Err(Error::Empty("sample"));
    }
    if n > ASSIGNMENT_CAP {
        return Err(Error::TooLarge { n, cap: ASSIGNMENT_CAP });
    }
    let dim = a[0].as_ref().len();
    if let GroundMetric::Pair { split } = metric {
        if split > dim {
            return Err(Error::validation("metric", "pair split exceeds point dimension"));
        }
    }
    for p in a.iter().chain(b) {
        check_len(dim, p.as_ref().len())?;
    }
    let mut cost = Vec::with_capacity(n * n);
    for x in a {
        for y in b {
            cost.push(metric.distance(x.as_ref(), y.as_ref()));
        }
    }
    let assignment = min_cost_assignment(&cost, n)?;
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(total / n as f64)
}

/// Every `(a_i, b_j)` concatenated: the empirical product measure.
pub fn product_sample<X: AsRef<[f64]>>(a: &[X], b: &[X]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for x in a {
        for y in b {
            let mut p = x.as_ref().to_vec();
            p.extend_from_slice(y.as_ref());
            out.push(p);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    /// `None` when the bound's precondition fails.
    pub holds: Option<bool>,
    pub gamma_hat: Option<f64>,
}

/// Checks `E_rank <= 4 / gamma^2 * (MSE_near + MSE_sub)` with the empirical
/// margin `gamma = min f(near) - max f(sub)`.
pub fn audit_mse_to_rank<X: AsRef<[f64]>>(
    scorer: &dyn Scorer,
    near: &[X],
    sub: &[X],
    f_near: &[f64],
    f_sub: &[f64],
) -> Result<BoundReport> {
    check_len(near.len(), f_near.len())?;
    check_len(sub.len(), f_sub.len())?;
    let h_near = score_all(scorer, near)?;
    let h_sub = score_all(scorer, sub)?;
    let exact = PairSampling {
        cap: usize::MAX,
        seed: 0,
    };
    let lhs = ranking_error_scores(&h_near, &h_sub, exact)?;
    let mse = |h: &[f64], f: &[f64]| h.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / h.len() as f64;
    let gamma = f_near.iter().cloned().fold(f64::INFINITY, f64::min) - f_sub.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(gamma > 0.0) {
        return Ok(BoundReport {
            lhs,
            rhs: f64::INFINITY,
            holds: None,
            gamma_hat: Some(gamma),
        });
    }
    let rhs = 4.0 / (gamma * gamma) * (mse(&h_near, f_near) + mse(&h_sub, f_sub));
    Ok(BoundReport {
        lhs,
        rhs,
        holds: Some(lhs <= rhs + AUDIT_TOLERANCE),
        gamma_hat: Some(gamma),
    })
}

/// Checks `W1(near x sub, mu x nu) <= W1(near, mu) + W1(sub, nu)` on the
/// empirical product measures under the pair metric.
pub fn audit_marginal_decomposition<X: AsRef<[f64]>>(near: &[X], sub: &[X], mu: &[X], nu: &[X]) -> Result<BoundReport> {
    let n = near.len();
    for s in [sub.len(), mu.len(), nu.len()] {
        check_len(n, s)?;
    }
    if n * n > ASSIGNMENT_CAP {
        return Err(Error::TooLarge {
            n: n * n,
            cap: ASSIGNMENT_CAP,
        });
    }
    let split = near.first().ok_or(Error::Empty("sample"))?.as_ref().len();
    let lhs = wasserstein1_assignment(
        &product_sample(near, sub),
        &product_sample(mu, nu),
        GroundMetric::Pair { split },
    )?;
    let rhs = wasserstein1_assignment(near, mu, GroundMetric::Euclidean)?
        + wasserstein1_assignment(sub, nu, GroundMetric::Euclidean)?;
    Ok(BoundReport {
        lhs,
        rhs,
        holds: Some(lhs <= rhs + AUDIT_TOLERANCE),
        gamma_hat: None,
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Summary of one surrogate's optimization-oriented diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingErrorReport {
    pub epsilon_eval: f64,
    pub value_gap: f64,
    pub n_near: usize,
    pub n_sub: usize,
    pub rows: Vec<RadiusRow>,
    pub overall: f64,
    pub gamma_hat: f64,
    /// W1 between the near-optimal band and the first-coordinate training marginal.
    pub w1_near: f64,
    /// W1 between the suboptimal band and the second-coordinate training marginal.
    pub w1_sub: f64,
    pub w1_sample_size: usize,
    /// Mean distance from near-optimal pool designs to the dataset designs.
    pub mean_dist_to_manifold: f64,
    /// Diameter of the dataset designs, reported as the calibration constant.
    pub manifold_diameter: f64,
    pub pair_sampling: PairSampling,
}

/// Sorted indices of a uniform `n`-subset of `0..len`; all of them when `n >= len`.
pub fn subsample_indices(len: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n >= len {
        return (0..len).collect();
    }
    let mut idx = sample(rng, len, n).into_vec();
    idx.sort_unstable();
    idx
}

/// Draws a uniform subsample of `n` points without replacement.
pub fn subsample<X: AsRef<[f64]>>(points: &[X], n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    subsample_indices(points.len(), n, rng)
        .into_iter()
        .map(|i| points[i].as_ref().to_vec())
        .collect()
}

/// Inputs describing the training pair distribution of a surrogate.
pub struct TrainingMarginals {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub fn ranking_error_report(
    scorer: &dyn Scorer,
    pool: &EvalPool,
    dataset: &OfflineDataset,
    radii: &[f64],
    marginals: &TrainingMarginals,
    w1_sample_size: usize,
    sampling: PairSampling,
    w1_seed: u64,
) -> Result<RankingErrorReport> {
    let rows = ranking_error_vs_radius(scorer, pool, dataset, radii, sampling)?;
    let near = pool.near();
    let sub = pool.sub();
    let overall = ranking_error(scorer, &near, &sub, sampling)?;
    let mean_dist = near
        .iter()
        .map(|x| dist_to_manifold(x, &dataset.designs))
        .sum::<Result<f64>>()?
        / near.len() as f64;

    let n = w1_sample_size
        .min(near.len())
        .min(marginals.first.len())
        .min(marginals.second.len())
        .min(ASSIGNMENT_CAP)
        .max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(w1_seed);
    let near_s = subsample(&near, n, &mut rng);
    let sub_s = subsample(&sub, n, &mut rng);
    let mu_s = subsample(&marginals.first, n, &mut rng);
    let nu_s = subsample(&marginals.second, n, &mut rng);
    let w1_near = wasserstein1_assignment(&near_s, &mu_s, GroundMetric::Euclidean)?;
    let w1_sub = wasserstein1_assignment(&sub_s, &nu_s, GroundMetric::Euclidean)?;

    Ok(RankingErrorReport {
        epsilon_eval: pool.split.epsilon,
        value_gap: pool.value_gap,
        n_near: near.len(),
        n_sub: sub.len(),
        rows,
        overall,
        gamma_hat: pool.gamma_hat(),
        w1_near,
        w1_sub,
        w1_sample_size: n,
        mean_dist_to_manifold: mean_dist,
        manifold_diameter: manifold_diameter(&dataset.designs),
        pair_sampling: sampling,
    })
}

pub fn radius_csv(rows: &[RadiusRow]) -> String {
    let mut out = String::from("d,n_restricted,rank_error\n");
    for r in rows {
        let d = if r.d.is_infinite() { "inf".to_string() } else { fmt_f64(r.d) };
        let e = r.rank_error.map(fmt_f64).unwrap_or_default();
        let _ = writeln!(out, "{d},{},{e}", r.n_restricted);
    }
    out
}

pub fn audit_csv(reports: &[BoundReport]) -> String {
    let mut out = String::from("trial,lhs,rhs,holds\n");
    for (i, r) in reports.iter().enumerate() {
        let holds = match r.holds {
            Some(h) => h.to_string(),
            None => "inapplicable".into(),
        };
        let _ = writeln!(out, "{i},{},{},{holds}", fmt_f64(r.lhs), fmt_f64(r.rhs));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    fn brute_force_assignment(cost: &[f64], n: usize) -> f64 {
        fn rec(cost: &[f64], n: usize, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    rec(cost, n, row + 1, used, acc + cost[row * n + j], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, n, 0, &mut vec![false; n], 0.0, &mut best);
        best
    }

    #[test]
    fn ranking_error_examples() {
        let f = FnScorer(|x: &[f64]| x[0]);
        let neg = FnScorer(|x: &[f64]| -x[0]);
        let near = pts(&[5.0, 6.0]);
        let sub = pts(&[1.0, 2.0, 3.0]);
        let s = PairSampling::default();
        assert_eq!(ranking_error(&f, &near, &sub, s).unwrap(), 0.0);
        assert_eq!(ranking_error(&neg, &near, &sub, s).unwrap(), 1.0);
        assert_eq!(ranking_error_scores(&[1.0], &[2.0, 0.0], s).unwrap(), 0.5);
        assert_eq!(ranking_error_scores(&[1.0], &[1.0], s).unwrap(), 1.0);
        assert!(ranking_error_scores(&[], &[1.0], s).is_err());
        assert!(ranking_error_scores(&[1.0], &[], s).is_err());
    }

    #[test]
    fn ranking_error_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(1..60);
            let m = rng.random_range(1..60);
            // Coarse values so ties occur.
            let near: Vec<f64> = (0..n).map(|_| rng.random_range(0..10) as f64).collect();
            let sub: Vec<f64> = (0..m).map(|_| rng.random_range(0..10) as f64).collect();
            let mut wrong = 0;
            for p in &near {
                for q in &sub {
                    wrong += zero_one_rank_loss(*p, *q) as usize;
                }
            }
            let expected = wrong as f64 / (n * m) as f64;
            let got = ranking_error_scores(&near, &sub, PairSampling::default()).unwrap();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn ranking_error_sampling_path() {
        let near: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let sub: Vec<f64> = (0..100).map(|i| i as f64 / 100.0 - 0.3).collect();
        let exact = ranking_error_scores(&near, &sub, PairSampling::default()).unwrap();
        let cap = PairSampling { cap: 5000, seed: 3 };
        let est = ranking_error_scores(&near, &sub, cap).unwrap();
        assert!((est - exact).abs() < 0.03, "{est} vs {exact}");
        assert_eq!(est, ranking_error_scores(&near, &sub, cap).unwrap());
    }

    #[test]
    fn manifold_distance() {
        let m = vec![vec![0.0, 0.0]];
        assert_eq!(dist_to_manifold(&[3.0, 4.0], &m).unwrap(), 5.0);
        assert_eq!(dist_to_manifold(&[0.0, 0.0], &m).unwrap(), 0.0);
        let bigger = vec![vec![0.0, 0.0], vec![3.0, 3.0]];
        assert!(dist_to_manifold(&[3.0, 4.0], &bigger).unwrap() <= 5.0);
        assert!(dist_to_manifold(&[3.0, 4.0], &Vec::<Vec<f64>>::new()).is_err());
        assert_eq!(manifold_diameter(&[vec![0.0, 0.0], vec![3.0, 4.0], vec![1.0, 1.0]]), 5.0);
    }

    #[test]
    fn sorted_w1_examples() {
        assert_eq!(wasserstein1_sorted(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 0.0);
        assert_eq!(wasserstein1_sorted(&[0.0], &[3.0]).unwrap(), 3.0);
        assert_eq!(wasserstein1_sorted(&[0.0, 1.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert!(wasserstein1_sorted(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn assignment_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let n = rng.random_range(1..=7);
            let cost: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..10.0)).collect();
            let a = min_cost_assignment(&cost, n).unwrap();
            let mut seen = a.clone();
            seen.sort_unstable();
            assert_eq!(seen, (0..n).collect::<Vec<_>>());
            let got: f64 = a.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
            assert!((got - brute_force_assignment(&cost, n)).abs() < 1e-9);
        }
    }

    #[test]
    fn assignment_identity_and_caps() {
        let a = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![-1.0, 5.0]];
        assert_eq!(wasserstein1_assignment(&a, &a, GroundMetric::Euclidean).unwrap(), 0.0);
        let big = vec![vec![0.0]; ASSIGNMENT_CAP + 1];
        assert!(matches!(
            wasserstein1_assignment(&big, &big, GroundMetric::Euclidean),
            Err(Error::TooLarge { .. })
        ));
        assert!(wasserstein1_assignment(&a, &a[..2], GroundMetric::Euclidean).is_err());
    }

    #[test]
    fn one_dimensional_assignment_equals_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let n = rng.random_range(1..40);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let exact = wasserstein1_assignment(&pts(&a), &pts(&b), GroundMetric::Euclidean).unwrap();
            assert!((exact - wasserstein1_sorted(&a, &b).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn product_pair_w1_brute_force_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..30 {
            let n = rng.random_range(1..=2);
            let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
                (0..n).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()
            };
            let (a, a2, b, b2) = (draw(&mut rng), draw(&mut rng), draw(&mut rng), draw(&mut rng));
            let pa = product_sample(&a, &a2);
            let pb = product_sample(&b, &b2);
            let metric = GroundMetric::Pair { split: 2 };
            let k = pa.len();
            let cost: Vec<f64> = pa.iter().flat_map(|x| pb.iter().map(move |y| metric.distance(x, y))).collect();
            let brute = brute_force_assignment(&cost, k) / k as f64;
            let solved = wasserstein1_assignment(&pa, &pb, metric).unwrap();
            assert!((brute - solved).abs() < 1e-9);
            let bound = wasserstein1_assignment(&a, &b, GroundMetric::Euclidean).unwrap()
                + wasserstein1_assignment(&a2, &b2, GroundMetric::Euclidean).unwrap();
            assert!(solved <= bound + 1e-9);
        }
    }

    #[test]
    fn w1_metric_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..12).map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect()
        };
        for _ in 0..20 {
            let (a, b, c) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
            let w = |x: &[Vec<f64>], y: &[Vec<f64>]| wasserstein1_assignment(x, y, GroundMetric::Euclidean).unwrap();
            let (ab, ba, bc, ac) = (w(&a, &b), w(&b, &a), w(&b, &c), w(&a, &c));
            assert!((ab - ba).abs() < 1e-9);
            assert!(ab > 0.0);
            assert!(ac <= ab + bc + 1e-9);
        }
    }

    #[test]
    fn mse_audit_examples() {
        let near = pts(&[10.0, 12.0]);
        let sub = pts(&[0.0, 1.0, 4.0]);
        let f = |x: &[f64]| x[0];
        let fn_ = [10.0, 12.0];
        let fs = [0.0, 1.0, 4.0];
        let exact = audit_mse_to_rank(&FnScorer(f), &near, &sub, &fn_, &fs).unwrap();
        assert_eq!((exact.lhs, exact.rhs, exact.holds), (0.0, 0.0, Some(true)));
        assert_eq!(exact.gamma_hat, Some(6.0));

        let c = 1.5;
        let shifted = audit_mse_to_rank(&FnScorer(move |x: &[f64]| x[0] + c), &near, &sub, &fn_, &fs).unwrap();
        assert_eq!(shifted.lhs, 0.0);
        assert!((shifted.rhs - 4.0 * c * c * 2.0 / 36.0).abs() < 1e-12);
        assert_eq!(shifted.holds, Some(true));

        let overlap = audit_mse_to_rank(&FnScorer(f), &near, &sub, &[10.0, 12.0], &[0.0, 11.0, 4.0]).unwrap();
        assert_eq!(overlap.holds, None);
    }

    #[test]
    fn marginal_audit_examples() {
        let same = vec![vec![0.5, 1.0], vec![2.0, -1.0]];
        let r = audit_marginal_decomposition(&same, &same, &same, &same).unwrap();
        assert_eq!((r.lhs, r.rhs, r.holds), (0.0, 0.0, Some(true)));

        let r = audit_marginal_decomposition(&pts(&[0.0]), &pts(&[10.0]), &pts(&[1.0]), &pts(&[9.0])).unwrap();
        assert!((r.lhs - 2.0).abs() < 1e-12 && (r.rhs - 2.0).abs() < 1e-12);
        assert_eq!(r.holds, Some(true));

        let too_many = vec![vec![0.0]; 23];
        assert!(audit_marginal_decomposition(&too_many, &too_many, &too_many, &too_many).is_err());
    }

    #[test]
    fn radius_rows_nest_and_flag_empties() {
        let task = TaskSpec::branin();
        let pool = EvalPool::generate(&task, 400, 0.05, 1).unwrap();
        let ds = OfflineDataset::from_points(task.clone(), vec![vec![0.0, 0.0], vec![1.0, 1.0]], vec![-55.6, -40.0]).unwrap();
        let f = FnScorer(|x: &[f64]| eval_or_zero(x));
        let radii = [1e-6, 2.0, 5.0, 10.0, f64::INFINITY];
        let rows = ranking_error_vs_radius(&f, &pool, &ds, &radii, PairSampling::default()).unwrap();
        assert_eq!(rows[0].rank_error, None);
        assert_eq!(rows[0].n_restricted, 0);
        assert!(rows.windows(2).all(|w| w[0].n_restricted <= w[1].n_restricted));
        assert_eq!(rows[4].n_restricted, pool.split.suboptimal.len());
        assert_eq!(rows[4].rank_error, Some(0.0));
        let csv = radius_csv(&rows);
        assert!(csv.starts_with("d,n_restricted,rank_error\n"));
        assert!(csv.lines().nth(1).unwrap().ends_with(",0,"));
        assert!(csv.lines().last().unwrap().starts_with("inf,"));
        assert!(ranking_error_vs_radius(&f, &pool, &ds, &[2.0, 1.0], PairSampling::default()).is_err());
    }

    fn eval_or_zero(x: &[f64]) -> f64 {
        crate::task::eval_branin(x).unwrap_or(0.0)
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0], &[1.0, 1.0]), None);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn ranking_error_monotone_invariant(
            near in proptest::collection::vec(-3.0f64..3.0, 1..20),
            sub in proptest::collection::vec(-3.0f64..3.0, 1..20),
        ) {
            let s = PairSampling::default();
            let base = ranking_error_scores(&near, &sub, s).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&base));
            let t = |v: &[f64], f: fn(f64) -> f64| v.iter().map(|&x| f(x)).collect::<Vec<_>>();
            proptest::prop_assert_eq!(base, ranking_error_scores(&t(&near, f64::exp), &t(&sub, f64::exp), s).unwrap());
            let aff = |x: f64| 2.5 * x - 7.0;
            proptest::prop_assert_eq!(base, ranking_error_scores(&t(&near, aff), &t(&sub, aff), s).unwrap());
        }
    }
}
