//! Cross-trajectory statistics: scaled-error covariances, quantile bands,
//! active-set hit times, projected-gradient residuals, and the discrete
//! optimal-IS oracle.

use nalgebra::DMatrix;
use rand::Rng;
use thiserror::Error;

use crate::is_families::{BaseDistribution, Draw, IsFamily};
use crate::linalg::{active_set, LinalgError, Polytope, Projector};
use crate::problems::{active_set_at_solution, Problem};
use crate::solver::{EngineKind, RecordPoint, TrajectoryRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("need at least {needed} trajectories, got {got}")]
    TooFewTrajectories { needed: usize, got: usize },
    #[error("checkpoint {checkpoint} does not exceed burn-in {burn_in}")]
    BeforeBurnIn { checkpoint: usize, burn_in: usize },
    #[error("trajectory with seed {seed} has no record at n = {n}")]
    MissingCheckpoint { n: usize, seed: u64 },
    #[error("{0} is not available for this problem")]
    Unsupported(&'static str),
    #[error("all projected gradients vanish on the support")]
    DegenerateOracle,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, DiagnosticsError>;

/// Welford accumulator for a scalar stream.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero below two observations.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.count == 0 {
            return f64::INFINITY;
        }
        (self.variance() / self.count as f64).sqrt()
    }
}

/// Linearly interpolated empirical quantile of sorted data (type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean and 10%-90% band of one coordinate at one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub n: usize,
    pub mean: f64,
    pub q10: f64,
    pub q90: f64,
}

impl Band {
    pub fn from_values(n: usize, values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Band {
            n,
            mean: values.iter().sum::<f64>() / values.len() as f64,
            q10: quantile_sorted(&sorted, 0.1),
            q90: quantile_sorted(&sorted, 0.9),
        }
    }

    pub fn width(&self) -> f64 {
        self.q90 - self.q10
    }
}

/// Checkpoints `ceil(n0 r^k)` up to and including `horizon`.
pub fn geometric_checkpoints(n0: usize, ratio: f64, horizon: usize) -> Vec<usize> {
    assert!(n0 >= 1 && ratio > 1.0, "need n0 >= 1 and ratio > 1");
    let mut out = Vec::new();
    let mut x = n0 as f64;
    while (x.ceil() as usize) < horizon {
        let n = x.ceil() as usize;
        if out.last() != Some(&n) {
            out.push(n);
        }
        x *= ratio;
    }
    out.push(horizon);
    out
}

fn point_at(record: &TrajectoryRecord, n: usize) -> Result<&RecordPoint> {
    record
        .at(n)
        .ok_or(DiagnosticsError::MissingCheckpoint { n, seed: record.seed })
}

/// The burn-in-restarted average at `n` and its weight `n - b`; the plain
/// average and `n` when `n <= b`.
fn restarted_average(record: &TrajectoryRecord, n: usize, burn_in: usize) -> Result<(Vec<f64>, f64)> {
    let at_n = point_at(record, n)?;
    if n <= burn_in {
        return Ok((at_n.theta_bar.clone(), n as f64));
    }
    let at_b = point_at(record, burn_in)?;
    let span = (n - burn_in) as f64;
    let avg = at_n
        .theta_bar
        .iter()
        .zip(&at_b.theta_bar)
        .map(|(x, y)| (n as f64 * x - burn_in as f64 * y) / span)
        .collect();
    Ok((avg, span))
}

/// Unbiased covariance across trajectories of `sqrt(n - b) (theta_bar_n^(b) - theta*)`
/// at each checkpoint, where averaging restarts at the burn-in `b`:
/// `theta_bar_n^(b) = (n theta_bar_n - b theta_bar_b) / (n - b)`.
pub fn scaled_error_variance(
    records: &[TrajectoryRecord],
    theta_star: &[f64],
    checkpoints: &[usize],
    burn_in: usize,
) -> Result<Vec<DMatrix<f64>>> {
    if records.len() < 2 {
        return Err(DiagnosticsError::TooFewTrajectories {
            needed: 2,
            got: records.len(),
        });
    }
    let s = theta_star.len();
    let mut out = Vec::with_capacity(checkpoints.len());
    for &n in checkpoints {
        if n <= burn_in {
            return Err(DiagnosticsError::BeforeBurnIn { checkpoint: n, burn_in });
        }
        let mut errors = Vec::with_capacity(records.len());
        for rec in records {
            let (avg, span) = restarted_average(rec, n, burn_in)?;
            if avg.len() != s {
                return Err(DiagnosticsError::Dimension(format!("theta* has {s} entries, record has {}", avg.len())));
            }
            let e: Vec<f64> = avg.iter().zip(theta_star).map(|(a, t)| span.sqrt() * (a - t)).collect();
            errors.push(e);
        }
        out.push(sample_covariance(&errors));
    }
    Ok(out)
}

fn sample_covariance(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let s = rows[0].len();
    let t = rows.len() as f64;
    let mean: Vec<f64> = (0..s).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / t).collect();
    let mut cov = DMatrix::zeros(s, s);
    for r in rows {
        for i in 0..s {
            for j in 0..=i {
                cov[(i, j)] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..s {
        for j in 0..=i {
            let v = cov[(i, j)] / (t - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    cov
}

/// Which iterate a hit time is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Track {
    Theta,
    Mu,
}

/// Smallest recorded `n` from which `target_rows` of `k` stay active at
/// every later recorded iteration, or `None` if they are inactive at the end.
pub fn active_set_hit_time(record: &TrajectoryRecord, track: Track, k: &Polytope, target_rows: &[usize]) -> Option<usize> {
    let mut hit = None;
    for p in record.points.iter().rev() {
        let x = match track {
            Track::Theta => &p.theta,
            Track::Mu => &p.mu,
        };
        if active_set(x, k, None).contains_all(target_rows) {
            hit = Some(p.n);
        } else {
            break;
        }
    }
    hit
}

/// Gradients `G(theta, x_j)` at every atom of a finite-support nominal law,
/// with the atom probabilities.
fn atom_gradients(problem: &dyn Problem, theta: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let BaseDistribution::FiniteSupport(law) = problem.nominal() else {
        return Err(DiagnosticsError::Unsupported("a finite-support oracle"));
    };
    let mut grads = Vec::with_capacity(law.atoms().len());
    for (j, atom) in law.atoms().iter().enumerate() {
        let draw = Draw {
            point: atom.clone(),
            atom: Some(j),
        };
        let mut g = vec![0.0; problem.dim()];
        problem.stochastic_gradient(theta, &draw, &mut g);
        grads.push(g);
    }
    Ok((grads, law.probs().to_vec()))
}

fn normalise(weights: Vec<f64>) -> Result<Vec<f64>> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(DiagnosticsError::DegenerateOracle);
    }
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// `P*(x_j) proportional to ||P G(theta*, x_j)||^2 p_j`.
pub fn optimal_is_discrete(problem: &dyn Problem, theta_star: &[f64], projector: &Projector) -> Result<Vec<f64>> {
    let (grads, probs) = atom_gradients(problem, theta_star)?;
    normalise(grads.iter().zip(&probs).map(|(g, p)| projector.norm_squared(g) * p).collect())
}

/// The proposal `q_j proportional to ||P G(theta*, x_j)|| p_j`, which minimises
/// `sum_j p_j^2 ||P G_j||^2 / q_j` over the simplex.
pub fn min_variance_is_discrete(problem: &dyn Problem, theta_star: &[f64], projector: &Projector) -> Result<Vec<f64>> {
    let (grads, probs) = atom_gradients(problem, theta_star)?;
    normalise(grads.iter().zip(&probs).map(|(g, p)| projector.norm_squared(g).sqrt() * p).collect())
}

/// Exact `E_P[||P G(theta, X)||^2 dP/dQ(X)]` for a finite-support proposal `q`.
/// Infinite when `q` misses an atom carrying projected gradient.
pub fn discrete_variance_objective(problem: &dyn Problem, theta: &[f64], projector: &Projector, q: &[f64]) -> Result<f64> {
    let (grads, probs) = atom_gradients(problem, theta)?;
    if q.len() != probs.len() {
        return Err(DiagnosticsError::Dimension(format!("{} atoms, {} proposal weights", probs.len(), q.len())));
    }
    let mut total = 0.0;
    for ((g, p), qj) in grads.iter().zip(&probs).zip(q) {
        let w = projector.norm_squared(g);
        if w == 0.0 {
            continue;
        }
        total += if *qj > 0.0 { p * p * w / qj } else { f64::INFINITY };
    }
    Ok(total)
}

/// Monte Carlo mean and standard error of
/// `V(theta, mu, X) = ||P_A G(theta, X)||^2 l(X, mu)` over nominal draws, with
/// `A` the rows of `Theta` active at `theta`.
pub fn variance_objective_estimate<R: Rng + ?Sized>(
    problem: &dyn Problem,
    family: &IsFamily,
    theta: &[f64],
    mu: &[f64],
    n_samples: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let theta_set = problem.feasible_set();
    let projector = theta_set.projector_for(&active_set(theta, theta_set, None))?;
    let base = problem.nominal();
    let mut draw = Draw::zeros(base.dim());
    let mut g = vec![0.0; problem.dim()];
    let mut stats = RunningStats::new();
    for _ in 0..n_samples {
        base.sample_into(rng, &mut draw);
        problem.stochastic_gradient(theta, &draw, &mut g);
        stats.push(projector.norm_squared(&g) * family.likelihood_ratio(&draw, mu));
    }
    Ok((stats.mean(), stats.std_error()))
}

/// `||P_{A*} grad f(theta_bar)||` with the active set taken at the known
/// minimizer.
pub fn projected_gradient_residual(theta_bar: &[f64], problem: &dyn Problem) -> Result<f64> {
    let grad = problem
        .gradient(theta_bar)
        .ok_or(DiagnosticsError::Unsupported("an analytic gradient"))?;
    let active = active_set_at_solution(problem).ok_or(DiagnosticsError::Unsupported("a known minimizer"))?;
    let projector = problem.feasible_set().projector_for(&active)?;
    Ok(projector.norm_squared(&grad).sqrt())
}

/// What [`ExperimentSummary::from_records`] computes.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryOptions {
    pub checkpoints: Vec<usize>,
    pub burn_in: usize,
    /// Rows of `M` whose identification time is tracked.
    pub mu_target_rows: Option<Vec<usize>>,
}

/// Aggregates over the trajectories of one engine.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub engine: EngineKind,
    pub trajectories: usize,
    pub burn_in: usize,
    pub checkpoints: Vec<usize>,
    /// Indexed `[coordinate][checkpoint]`.
    pub theta_bands: Vec<Vec<Band>>,
    pub theta_bar_bands: Vec<Vec<Band>>,
    pub mu_bands: Vec<Vec<Band>>,
    pub mu_bar_bands: Vec<Vec<Band>>,
    /// Covariance of the restarted scaled error at each checkpoint past the
    /// burn-in; `None` before it or without a known minimizer.
    pub scaled_variance: Vec<Option<DMatrix<f64>>>,
    /// Mean over trajectories of `(n - b) ||P_{A*} grad f(theta_bar_n^(b))||^2`,
    /// with averaging restarted at the burn-in `b` once `n > b` (plain
    /// `n ||P_{A*} grad f(theta_bar_n)||^2` before).
    pub residual_second_moment: Vec<Option<f64>>,
    pub mu_hit_times: Vec<Option<usize>>,
}

impl ExperimentSummary {
    pub fn from_records(
        records: &[TrajectoryRecord],
        problem: &dyn Problem,
        mu_domain: Option<&Polytope>,
        options: &SummaryOptions,
    ) -> Result<Self> {
        let first = records.first().ok_or(DiagnosticsError::TooFewTrajectories { needed: 1, got: 0 })?;
        let mut checkpoints = options.checkpoints.clone();
        checkpoints.sort_unstable();
        checkpoints.dedup();
        let s = first.points[0].theta.len();
        let m = first.points[0].mu.len();

        let bands = |pick: fn(&RecordPoint) -> &Vec<f64>, dim: usize| -> Result<Vec<Vec<Band>>> {
            let mut out = vec![Vec::with_capacity(checkpoints.len()); dim];
            for &n in &checkpoints {
                let pts = records.iter().map(|r| point_at(r, n)).collect::<Result<Vec<_>>>()?;
                for (i, col) in out.iter_mut().enumerate() {
                    let vals: Vec<f64> = pts.iter().map(|p| pick(p)[i]).collect();
                    col.push(Band::from_values(n, &vals));
                }
            }
            Ok(out)
        };
        let theta_bands = bands(|p| &p.theta, s)?;
        let theta_bar_bands = bands(|p| &p.theta_bar, s)?;
        let mu_bands = bands(|p| &p.mu, m)?;
        let mu_bar_bands = bands(|p| &p.mu_bar, m)?;

        let scaled_variance = checkpoints
            .iter()
            .map(|&n| match problem.solution() {
                Some(star) if n > options.burn_in && records.len() >= 2 => {
                    scaled_error_variance(records, star, &[n], options.burn_in).map(|mut v| v.pop())
                }
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;

        let residual_second_moment = checkpoints
            .iter()
            .map(|&n| {
                let mut acc = RunningStats::new();
                for r in records {
                    let (avg, weight) = restarted_average(r, n, options.burn_in)?;
                    match projected_gradient_residual(&avg, problem) {
                        Ok(res) => acc.push(weight * res * res),
                        Err(DiagnosticsError::Unsupported(_)) => return Ok(None),
                        Err(e) => return Err(e),
                    }
                }
                Ok(Some(acc.mean()))
            })
            .collect::<Result<Vec<_>>>()?;

        let mu_hit_times = match (mu_domain, &options.mu_target_rows) {
            (Some(k), Some(rows)) if m == k.dim() => records
                .iter()
                .map(|r| active_set_hit_time(r, Track::Mu, k, rows))
                .collect(),
            _ => Vec::new(),
        };

        Ok(ExperimentSummary {
            engine: first.engine,
            trajectories: records.len(),
            burn_in: options.burn_in,
            checkpoints,
            theta_bands,
            theta_bar_bands,
            mu_bands,
            mu_bar_bands,
            scaled_variance,
            residual_second_moment,
            mu_hit_times,
        })
    }

    /// Fraction of trajectories whose tracked rows became active at or
    /// before `n` and stayed active.
    pub fn identified_fraction(&self, n: usize) -> f64 {
        if self.mu_hit_times.is_empty() {
            return 0.0;
        }
        let hits = self.mu_hit_times.iter().filter(|h| matches!(h, Some(t) if *t <= n)).count();
        hits as f64 / self.mu_hit_times.len() as f64
    }

    /// Median hit time, counting misses as never.
    pub fn median_hit_time(&self) -> Option<usize> {
        let mut times: Vec<usize> = self.mu_hit_times.iter().map(|h| h.unwrap_or(usize::MAX)).collect();
        if times.is_empty() {
            return None;
        }
        times.sort_unstable();
        let mid = times[(times.len() - 1) / 2];
        (mid != usize::MAX).then_some(mid)
    }
}
