//! Concrete instances of `min_{theta in Theta} E_P[F(theta, X)]`.

use nalgebra::{DMatrix, DVector};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::is_families::{BaseDistribution, Draw, FiniteSupport};
use crate::linalg::{active_set, solve_qp, ActiveSet, LinalgError, Polytope, QpSolution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("{name} = {value} is outside its domain {domain}")]
    Domain {
        name: &'static str,
        value: f64,
        domain: &'static str,
    },
    #[error("matrix {0} is not symmetric positive definite")]
    NotSpd(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty sample")]
    EmptySample,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, ProblemError>;

/// A stochastic objective `f(theta) = E_P[F(theta, X)]` over a polytope.
pub trait Problem: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    fn feasible_set(&self) -> &Polytope;

    /// The nominal sampling law `P`.
    fn nominal(&self) -> &BaseDistribution;

    /// Writes `G(theta, x)`, an unbiased sample of `grad f(theta)`.
    fn stochastic_gradient(&self, theta: &[f64], x: &Draw, out: &mut [f64]);

    fn objective(&self, _theta: &[f64]) -> Option<f64> {
        None
    }

    fn gradient(&self, _theta: &[f64]) -> Option<Vec<f64>> {
        None
    }

    fn solution(&self) -> Option<&[f64]> {
        None
    }

    fn hessian_at_solution(&self) -> Option<DMatrix<f64>> {
        None
    }
}

/// Active rows of `Theta` at the known minimizer.
pub fn active_set_at_solution(problem: &dyn Problem) -> Option<ActiveSet> {
    problem
        .solution()
        .map(|theta| active_set(theta, problem.feasible_set(), None))
}

fn check_tail(alpha_tail: f64) -> Result<()> {
    if alpha_tail > 0.0 && alpha_tail < 0.5 {
        Ok(())
    } else {
        Err(ProblemError::Domain {
            name: "alpha_tail",
            value: alpha_tail,
            domain: "(0, 1/2)",
        })
    }
}

fn check_scalar_box(theta_set: &Polytope) -> Result<()> {
    if theta_set.dim() != 1 {
        return Err(ProblemError::Dimension(format!(
            "quantile problems are scalar, got Theta in R^{}",
            theta_set.dim()
        )));
    }
    Ok(())
}

/// Standard normal upper tail `P[X >= t]`.
pub fn normal_tail(t: f64) -> f64 {
    0.5 * erfc(t / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(t: f64) -> f64 {
    (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Solves `tail(t) = target` for a decreasing tail by bisection.
fn invert_tail(tail: impl Fn(f64) -> f64, target: f64) -> f64 {
    let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if tail(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, PartialEq)]
enum QuantileLaw {
    Normal,
    SymmetricExponential,
    Finite,
}

/// Quantile estimation as `min_theta scale * E[alpha theta + (X - theta)^+]`,
/// with stochastic gradient `scale * (alpha - 1{x >= theta})`.
///
/// The scale leaves the minimizer unchanged; `1/alpha` turns the objective
/// into the Rockafellar-Uryasev form whose gradient has unit drift away from
/// the quantile.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileProblem {
    name: String,
    law: QuantileLaw,
    base: BaseDistribution,
    alpha_tail: f64,
    scale: f64,
    theta_set: Polytope,
    theta_star: [f64; 1],
}

/// Quantile of `N(0, 1)` at level `1 - alpha_tail`.
pub fn normal_quantile_problem(alpha_tail: f64, theta_set: Polytope) -> Result<QuantileProblem> {
    check_tail(alpha_tail)?;
    check_scalar_box(&theta_set)?;
    let theta_star = invert_tail(normal_tail, alpha_tail);
    Ok(QuantileProblem {
        name: "normal-quantile".into(),
        law: QuantileLaw::Normal,
        base: BaseDistribution::StandardNormal { dim: 1 },
        alpha_tail,
        scale: 1.0,
        theta_set,
        theta_star: [theta_star],
    })
}

/// Quantile of the density `exp(-|x|) / 2` at level `1 - alpha_tail`.
pub fn exponential_quantile_problem(alpha_tail: f64, theta_set: Polytope) -> Result<QuantileProblem> {
    check_tail(alpha_tail)?;
    check_scalar_box(&theta_set)?;
    Ok(QuantileProblem {
        name: "exponential-quantile".into(),
        law: QuantileLaw::SymmetricExponential,
        base: BaseDistribution::SymmetricExponential { dim: 1 },
        alpha_tail,
        scale: 1.0,
        theta_set,
        theta_star: [(1.0 / (2.0 * alpha_tail)).ln()],
    })
}

/// Quantile of a scalar finite-support law: the smallest atom `t` with
/// `P[X > t] <= alpha_tail`.
pub fn finite_quantile_problem(law: FiniteSupport, alpha_tail: f64, theta_set: Polytope) -> Result<QuantileProblem> {
    check_tail(alpha_tail)?;
    check_scalar_box(&theta_set)?;
    if law.dim() != 1 {
        return Err(ProblemError::Dimension("finite quantile law must be scalar".into()));
    }
    let mut atoms: Vec<(f64, f64)> = law.atoms().iter().map(|a| a[0]).zip(law.probs().iter().copied()).collect();
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut above: f64 = atoms.iter().map(|a| a.1).sum();
    let mut theta_star = atoms[atoms.len() - 1].0;
    for &(x, p) in &atoms {
        above -= p;
        if above <= alpha_tail {
            theta_star = x;
            break;
        }
    }
    Ok(QuantileProblem {
        name: "finite-quantile".into(),
        law: QuantileLaw::Finite,
        base: BaseDistribution::FiniteSupport(law),
        alpha_tail,
        scale: 1.0,
        theta_set,
        theta_star: [theta_star],
    })
}

impl QuantileProblem {
    pub fn with_gradient_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(ProblemError::Domain {
                name: "gradient_scale",
                value: scale,
                domain: "(0, inf)",
            });
        }
        self.scale = scale;
        Ok(self)
    }

    pub fn alpha_tail(&self) -> f64 {
        self.alpha_tail
    }

    pub fn gradient_scale(&self) -> f64 {
        self.scale
    }

    /// `P[X >= theta]`.
    pub fn tail(&self, theta: f64) -> f64 {
        match &self.law {
            QuantileLaw::Normal => normal_tail(theta),
            QuantileLaw::SymmetricExponential => {
                if theta >= 0.0 {
                    0.5 * (-theta).exp()
                } else {
                    1.0 - 0.5 * theta.exp()
                }
            }
            QuantileLaw::Finite => self.finite_law().map_or(0.0, |fs| {
                fs.atoms()
                    .iter()
                    .zip(fs.probs())
                    .filter(|(a, _)| a[0] >= theta)
                    .map(|(_, p)| p)
                    .sum()
            }),
        }
    }

    fn finite_law(&self) -> Option<&FiniteSupport> {
        match &self.base {
            BaseDistribution::FiniteSupport(fs) => Some(fs),
            _ => None,
        }
    }

    /// `E[(X - theta)^+]`.
    fn expected_excess(&self, theta: f64) -> f64 {
        match &self.law {
            QuantileLaw::Normal => normal_pdf(theta) - theta * normal_tail(theta),
            QuantileLaw::SymmetricExponential => {
                if theta >= 0.0 {
                    0.5 * (-theta).exp()
                } else {
                    -theta + 0.5 * theta.exp()
                }
            }
            QuantileLaw::Finite => self.finite_law().map_or(0.0, |fs| {
                fs.atoms()
                    .iter()
                    .zip(fs.probs())
                    .map(|(a, p)| p * (a[0] - theta).max(0.0))
                    .sum()
            }),
        }
    }
}

impl Problem for QuantileProblem {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        1
    }

    fn feasible_set(&self) -> &Polytope {
        &self.theta_set
    }

    fn nominal(&self) -> &BaseDistribution {
        &self.base
    }

    fn stochastic_gradient(&self, theta: &[f64], x: &Draw, out: &mut [f64]) {
        let hit = if x.point[0] >= theta[0] { 1.0 } else { 0.0 };
        out[0] = self.scale * (self.alpha_tail - hit);
    }

    fn objective(&self, theta: &[f64]) -> Option<f64> {
        Some(self.scale * (self.alpha_tail * theta[0] + self.expected_excess(theta[0])))
    }

    fn gradient(&self, theta: &[f64]) -> Option<Vec<f64>> {
        match self.law {
            QuantileLaw::Finite => None,
            _ => Some(vec![self.scale * (self.alpha_tail - self.tail(theta[0]))]),
        }
    }

    fn solution(&self) -> Option<&[f64]> {
        Some(&self.theta_star)
    }

    fn hessian_at_solution(&self) -> Option<DMatrix<f64>> {
        let t = self.theta_star[0];
        let density = match self.law {
            QuantileLaw::Normal => normal_pdf(t),
            QuantileLaw::SymmetricExponential => 0.5 * (-t.abs()).exp(),
            QuantileLaw::Finite => return None,
        };
        Some(DMatrix::from_element(1, 1, self.scale * density))
    }
}

/// `f(theta) = 1/2 theta' H theta` with `G(theta, z) = H theta + L z`,
/// `z ~ N(0, I)` and `L L' = Sigma_noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProblem {
    hessian: DMatrix<f64>,
    noise_factor: DMatrix<f64>,
    theta_set: Polytope,
    base: BaseDistribution,
    qp: QpSolution,
}

pub fn constrained_quadratic_problem(
    hessian: DMatrix<f64>,
    noise_cov: DMatrix<f64>,
    theta_set: Polytope,
) -> Result<QuadraticProblem> {
    let s = theta_set.dim();
    if hessian.shape() != (s, s) || noise_cov.shape() != (s, s) {
        return Err(ProblemError::Dimension(format!(
            "H is {:?} and Sigma is {:?} for Theta in R^{s}",
            hessian.shape(),
            noise_cov.shape()
        )));
    }
    let spd = |m: &DMatrix<f64>| (m - m.transpose()).amax() <= 1e-12 * (1.0 + m.amax());
    if !spd(&hessian) || hessian.clone().cholesky().is_none() {
        return Err(ProblemError::NotSpd("H"));
    }
    if !spd(&noise_cov) {
        return Err(ProblemError::NotSpd("Sigma_noise"));
    }
    let noise_factor = noise_cov.cholesky().ok_or(ProblemError::NotSpd("Sigma_noise"))?.l();
    let qp = solve_qp(&hessian, &DVector::zeros(s), &theta_set)?;
    Ok(QuadraticProblem {
        hessian,
        noise_factor,
        theta_set,
        base: BaseDistribution::StandardNormal { dim: s },
        qp,
    })
}

impl QuadraticProblem {
    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    /// KKT multipliers of the rows active at the minimizer.
    pub fn active_multipliers(&self) -> Vec<(usize, f64)> {
        let active = active_set(self.qp.x.as_slice(), &self.theta_set, None);
        active.indices.iter().map(|&i| (i, self.qp.multipliers[i])).collect()
    }
}

impl Problem for QuadraticProblem {
    fn name(&self) -> &str {
        "quadratic"
    }

    fn dim(&self) -> usize {
        self.theta_set.dim()
    }

    fn feasible_set(&self) -> &Polytope {
        &self.theta_set
    }

    fn nominal(&self) -> &BaseDistribution {
        &self.base
    }

    fn stochastic_gradient(&self, theta: &[f64], x: &Draw, out: &mut [f64]) {
        let s = self.dim();
        for i in 0..s {
            let mut g = 0.0;
            for j in 0..s {
                g += self.hessian[(i, j)] * theta[j];
            }
            for j in 0..=i {
                g += self.noise_factor[(i, j)] * x.point[j];
            }
            out[i] = g;
        }
    }

    fn objective(&self, theta: &[f64]) -> Option<f64> {
        let t = DVector::from_column_slice(theta);
        Some(0.5 * t.dot(&(&self.hessian * &t)))
    }

    fn gradient(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let t = DVector::from_column_slice(theta);
        Some((&self.hessian * t).iter().copied().collect())
    }

    fn solution(&self) -> Option<&[f64]> {
        Some(self.qp.x.as_slice())
    }

    fn hessian_at_solution(&self) -> Option<DMatrix<f64>> {
        Some(self.hessian.clone())
    }
}

/// Empirical `(1 - alpha_tail)`-quantile: the order statistic at 1-based
/// index `ceil((1 - alpha_tail) n)`.
pub fn saa_quantile_baseline(samples: &[f64], alpha_tail: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(ProblemError::EmptySample);
    }
    if !(alpha_tail > 0.0 && alpha_tail < 1.0) {
        return Err(ProblemError::Domain {
            name: "alpha_tail",
            value: alpha_tail,
            domain: "(0, 1)",
        });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let k = (((1.0 - alpha_tail) * n as f64) - 1e-9).ceil() as usize;
    Ok(sorted[k.clamp(1, n) - 1])
}
