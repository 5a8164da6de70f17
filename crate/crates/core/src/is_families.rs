//! Parametric importance-sampling families.
//!
//! A family `{P_mu : mu in M}` is described by how to draw from `P_mu` and by
//! the likelihood ratio `l(x, mu) = dP/dP_mu (x)` together with its gradient
//! in `mu`. Likelihood ratios are always assembled in log space and
//! exponentiated last.

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use thiserror::Error;

use crate::linalg::{LinalgError, Polytope};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FamilyError {
    #[error("parameter {mu:?} lies outside the family's parameter set")]
    OutOfDomain { mu: Vec<f64> },
    #[error("cumulant generating function diverges at {mu:?}")]
    DivergentCumulant { mu: Vec<f64> },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("unsupported family configuration: {0}")]
    Unsupported(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, FamilyError>;

const PROB_SUM_TOL: f64 = 1e-12;

/// A draw from a base or proposal law. Finite-support draws also carry the
/// index of the atom they landed on.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub point: Vec<f64>,
    pub atom: Option<usize>,
}

impl Draw {
    pub fn zeros(dim: usize) -> Self {
        Draw {
            point: vec![0.0; dim],
            atom: None,
        }
    }

    pub fn at(point: Vec<f64>) -> Self {
        Draw { point, atom: None }
    }
}

/// Atoms `x_j` with probabilities `p_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteSupport {
    atoms: Vec<Vec<f64>>,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl FiniteSupport {
    pub fn new(atoms: Vec<Vec<f64>>, probs: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != probs.len() {
            return Err(FamilyError::InvalidDistribution(format!(
                "{} atoms with {} probabilities",
                atoms.len(),
                probs.len()
            )));
        }
        let dim = atoms[0].len();
        if dim == 0 || atoms.iter().any(|a| a.len() != dim) {
            return Err(FamilyError::InvalidDistribution("atoms must share a positive dimension".into()));
        }
        if atoms.iter().flatten().any(|v| !v.is_finite()) {
            return Err(FamilyError::InvalidDistribution("non-finite atom".into()));
        }
        if probs.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(FamilyError::InvalidDistribution("probabilities must be positive".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(FamilyError::InvalidDistribution(format!("probabilities sum to {total}")));
        }
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Ok(FiniteSupport { atoms, probs, log_probs })
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].len()
    }

    /// Exponentially tilted weights `p_j exp(mu'x_j - phi(mu))` and `phi(mu)`.
    fn tilted(&self, mu: &[f64]) -> (Vec<f64>, f64) {
        let logits: Vec<f64> = self
            .atoms
            .iter()
            .zip(&self.log_probs)
            .map(|(x, lp)| lp + dot(mu, x))
            .collect();
        let phi = log_sum_exp(&logits);
        (logits.iter().map(|l| (l - phi).exp()).collect(), phi)
    }
}

/// The nominal law `P` of the random input.
#[derive(Debug, Clone, PartialEq)]
pub enum BaseDistribution {
    /// `N(0, I_dim)`.
    StandardNormal { dim: usize },
    /// i.i.d. coordinates with density `exp(-|x|) / 2`.
    SymmetricExponential { dim: usize },
    FiniteSupport(FiniteSupport),
}

impl BaseDistribution {
    pub fn dim(&self) -> usize {
        match self {
            BaseDistribution::StandardNormal { dim } | BaseDistribution::SymmetricExponential { dim } => *dim,
            BaseDistribution::FiniteSupport(fs) => fs.dim(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Draw {
        let mut d = Draw::zeros(self.dim());
        self.sample_into(rng, &mut d);
        d
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Draw) {
        match self {
            BaseDistribution::StandardNormal { .. } => {
                for v in out.point.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                out.atom = None;
            }
            BaseDistribution::SymmetricExponential { .. } => {
                for v in out.point.iter_mut() {
                    *v = sample_tilted_laplace(rng, 0.0);
                }
                out.atom = None;
            }
            BaseDistribution::FiniteSupport(fs) => {
                let j = sample_categorical(rng, &fs.probs);
                out.point.copy_from_slice(&fs.atoms[j]);
                out.atom = Some(j);
            }
        }
    }

    /// Convex potential `Delta = -log p` up to an additive constant.
    fn potential(&self, x: &[f64]) -> Option<f64> {
        match self {
            BaseDistribution::StandardNormal { .. } => Some(0.5 * dot(x, x)),
            BaseDistribution::SymmetricExponential { .. } => Some(x.iter().map(|v| v.abs()).sum()),
            BaseDistribution::FiniteSupport(_) => None,
        }
    }

    /// `grad p(y) / p(y) = -grad Delta(y)`; the Laplace kink gets the
    /// symmetric subgradient 0.
    fn score(&self, y: &[f64], out: &mut [f64]) {
        match self {
            BaseDistribution::StandardNormal { .. } => {
                for (o, v) in out.iter_mut().zip(y) {
                    *o = -v;
                }
            }
            BaseDistribution::SymmetricExponential { .. } => {
                for (o, v) in out.iter_mut().zip(y) {
                    *o = if *v > 0.0 {
                        -1.0
                    } else if *v < 0.0 {
                        1.0
                    } else {
                        0.0
                    };
                }
            }
            BaseDistribution::FiniteSupport(_) => out.fill(0.0),
        }
    }

    fn is_continuous(&self) -> bool {
        !matches!(self, BaseDistribution::FiniteSupport(_))
    }
}

/// Cumulant generating function `phi(mu) = log E[exp(mu'X)]` and its gradient.
pub fn cumulant(base: &BaseDistribution, mu: &[f64]) -> Result<(f64, Vec<f64>)> {
    if mu.len() != base.dim() {
        return Err(FamilyError::Dimension(format!(
            "tilt of length {} for a base of dimension {}",
            mu.len(),
            base.dim()
        )));
    }
    match base {
        BaseDistribution::StandardNormal { .. } => Ok((0.5 * dot(mu, mu), mu.to_vec())),
        BaseDistribution::SymmetricExponential { .. } => {
            if mu.iter().any(|m| m.abs() >= 1.0) {
                return Err(FamilyError::DivergentCumulant { mu: mu.to_vec() });
            }
            // MGF of the Laplace law is 1 / (1 - t^2)
            let phi = mu.iter().map(|m| -(1.0 - m * m).ln()).sum();
            let grad = mu.iter().map(|m| 2.0 * m / (1.0 - m * m)).collect();
            Ok((phi, grad))
        }
        BaseDistribution::FiniteSupport(fs) => {
            let (w, phi) = fs.tilted(mu);
            let mut grad = vec![0.0; fs.dim()];
            for (wj, x) in w.iter().zip(&fs.atoms) {
                for (g, xi) in grad.iter_mut().zip(x) {
                    *g += wj * xi;
                }
            }
            Ok((phi, grad))
        }
    }
}

fn phi_or_inf(base: &BaseDistribution, mu: &[f64]) -> f64 {
    match base {
        BaseDistribution::StandardNormal { .. } => 0.5 * dot(mu, mu),
        _ => cumulant(base, mu).map(|(phi, _)| phi).unwrap_or(f64::INFINITY),
    }
}

/// One component `P_i` of a mixture family.
#[derive(Debug, Clone, PartialEq)]
pub enum Component {
    /// Exponential tilt of the base law by a fixed vector.
    Tilt(Vec<f64>),
    /// Translation of a continuous base law by a fixed vector.
    Shift(Vec<f64>),
    /// Arbitrary positive weights over the atoms of a finite-support base.
    Weights(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum FamilyKind {
    ExponentialTilting,
    MeanTranslation,
    Mixture(Vec<Component>),
}

/// An importance-sampling family over a base law with parameter set `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct IsFamily {
    kind: FamilyKind,
    base: BaseDistribution,
    domain: Polytope,
}

impl IsFamily {
    pub fn exponential_tilting(base: BaseDistribution, domain: Polytope) -> Result<Self> {
        check_param_dim(&domain, base.dim())?;
        if let BaseDistribution::SymmetricExponential { .. } = base {
            check_inside_unit_box(&domain)?;
        }
        Ok(IsFamily {
            kind: FamilyKind::ExponentialTilting,
            base,
            domain,
        })
    }

    pub fn mean_translation(base: BaseDistribution, domain: Polytope) -> Result<Self> {
        if !base.is_continuous() {
            return Err(FamilyError::Unsupported(
                "mean translation needs a base law with a density".into(),
            ));
        }
        check_param_dim(&domain, base.dim())?;
        Ok(IsFamily {
            kind: FamilyKind::MeanTranslation,
            base,
            domain,
        })
    }

    /// Mixture `sum_i mu_i P_i` over the probability simplex.
    pub fn mixture(base: BaseDistribution, components: Vec<Component>) -> Result<Self> {
        if components.is_empty() {
            return Err(FamilyError::InvalidDistribution("mixture needs a component".into()));
        }
        for c in &components {
            match (c, &base) {
                (Component::Tilt(t), _) => {
                    if t.len() != base.dim() {
                        return Err(FamilyError::Dimension("tilt length differs from base dimension".into()));
                    }
                    cumulant(&base, t)?;
                }
                (Component::Shift(s), b) if b.is_continuous() => {
                    if s.len() != base.dim() {
                        return Err(FamilyError::Dimension("shift length differs from base dimension".into()));
                    }
                }
                (Component::Weights(q), BaseDistribution::FiniteSupport(fs)) => {
                    FiniteSupport::new(fs.atoms.clone(), q.clone())?;
                }
                _ => {
                    return Err(FamilyError::Unsupported(format!(
                        "component {c:?} is incompatible with the base law"
                    )))
                }
            }
        }
        let domain = Polytope::simplex(components.len())?;
        Ok(IsFamily {
            kind: FamilyKind::Mixture(components),
            base,
            domain,
        })
    }

    pub fn kind(&self) -> &FamilyKind {
        &self.kind
    }

    pub fn base(&self) -> &BaseDistribution {
        &self.base
    }

    pub fn domain(&self) -> &Polytope {
        &self.domain
    }

    pub fn param_dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn is_exponential_tilting(&self) -> bool {
        matches!(self.kind, FamilyKind::ExponentialTilting)
    }

    /// Draws from `P_mu`, rejecting parameters outside `M`.
    pub fn sample<R: Rng + ?Sized>(&self, mu: &[f64], rng: &mut R) -> Result<Draw> {
        if mu.len() != self.param_dim() || !self.domain.contains(mu) {
            return Err(FamilyError::OutOfDomain { mu: mu.to_vec() });
        }
        let mut d = Draw::zeros(self.base.dim());
        self.sample_into(mu, rng, &mut d);
        Ok(d)
    }

    /// Unchecked draw from `P_mu` into a reusable buffer.
    pub fn sample_into<R: Rng + ?Sized>(&self, mu: &[f64], rng: &mut R, out: &mut Draw) {
        match &self.kind {
            FamilyKind::ExponentialTilting => sample_tilted(&self.base, mu, rng, out),
            FamilyKind::MeanTranslation => {
                self.base.sample_into(rng, out);
                for (x, m) in out.point.iter_mut().zip(mu) {
                    *x += m;
                }
            }
            FamilyKind::Mixture(components) => {
                let weights: Vec<f64> = mu.iter().map(|m| m.max(0.0)).collect();
                let i = sample_categorical(rng, &weights);
                match &components[i] {
                    Component::Tilt(t) => sample_tilted(&self.base, t, rng, out),
                    Component::Shift(s) => {
                        self.base.sample_into(rng, out);
                        for (x, m) in out.point.iter_mut().zip(s) {
                            *x += m;
                        }
                    }
                    Component::Weights(q) => {
                        let BaseDistribution::FiniteSupport(fs) = &self.base else {
                            unreachable!("weights components require a finite base")
                        };
                        let j = sample_categorical(rng, q);
                        out.point.copy_from_slice(&fs.atoms[j]);
                        out.atom = Some(j);
                    }
                }
            }
        }
    }

    /// Draws from `P_{-mu}` for the secondary sampler of a tilting family.
    pub(crate) fn sample_reflected_into<R: Rng + ?Sized>(&self, mu: &[f64], rng: &mut R, out: &mut Draw, scratch: &mut Vec<f64>) {
        scratch.clear();
        scratch.extend(mu.iter().map(|m| -m));
        self.sample_into(scratch, rng, out);
    }

    /// `log l(x, mu)`.
    pub fn log_likelihood_ratio(&self, x: &Draw, mu: &[f64]) -> f64 {
        match &self.kind {
            FamilyKind::ExponentialTilting => -dot(mu, &x.point) + phi_or_inf(&self.base, mu),
            FamilyKind::MeanTranslation => mt_log_ratio(&self.base, &x.point, mu),
            FamilyKind::Mixture(components) => {
                let neg_logs: Vec<f64> = components
                    .iter()
                    .map(|c| -self.component_log_ratio(c, x))
                    .collect();
                let shift = neg_logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = mu.iter().zip(&neg_logs).map(|(m, nl)| m * (nl - shift).exp()).sum();
                if total > 0.0 {
                    -(shift + total.ln())
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// `l(x, mu) = dP/dP_mu (x)`.
    pub fn likelihood_ratio(&self, x: &Draw, mu: &[f64]) -> f64 {
        self.log_likelihood_ratio(x, mu).exp()
    }

    /// `grad_mu l(x, mu)`.
    pub fn likelihood_ratio_grad(&self, x: &Draw, mu: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.param_dim()];
        self.likelihood_ratio_grad_into(x, mu, &mut out);
        out
    }

    /// Writes `grad_mu l(x, mu)` into `out` and returns `l(x, mu)`.
    pub fn likelihood_ratio_grad_into(&self, x: &Draw, mu: &[f64], out: &mut [f64]) -> f64 {
        match &self.kind {
            FamilyKind::ExponentialTilting => {
                let log_l = self.log_likelihood_ratio(x, mu);
                let l = log_l.exp();
                match &self.base {
                    BaseDistribution::StandardNormal { .. } => {
                        for ((o, m), xi) in out.iter_mut().zip(mu).zip(&x.point) {
                            *o = (m - xi) * l;
                        }
                    }
                    base => match cumulant(base, mu) {
                        Ok((_, grad_phi)) => {
                            for ((o, g), xi) in out.iter_mut().zip(&grad_phi).zip(&x.point) {
                                *o = (g - xi) * l;
                            }
                        }
                        Err(_) => out.fill(f64::NAN),
                    },
                }
                l
            }
            FamilyKind::MeanTranslation => {
                let l = mt_log_ratio(&self.base, &x.point, mu).exp();
                let y: Vec<f64> = x.point.iter().zip(mu).map(|(a, b)| a - b).collect();
                self.base.score(&y, out);
                for o in out.iter_mut() {
                    *o *= l;
                }
                l
            }
            FamilyKind::Mixture(components) => {
                let log_l = self.log_likelihood_ratio(x, mu);
                for (o, c) in out.iter_mut().zip(components) {
                    *o = -(2.0 * log_l - self.component_log_ratio(c, x)).exp();
                }
                log_l.exp()
            }
        }
    }

    /// `log l_i(x) = log dP/dP_i (x)` for a mixture component.
    fn component_log_ratio(&self, c: &Component, x: &Draw) -> f64 {
        match c {
            Component::Tilt(t) => -dot(t, &x.point) + phi_or_inf(&self.base, t),
            Component::Shift(s) => mt_log_ratio(&self.base, &x.point, s),
            Component::Weights(q) => {
                let BaseDistribution::FiniteSupport(fs) = &self.base else {
                    return f64::NAN;
                };
                let j = x.atom.or_else(|| fs.atoms.iter().position(|a| a == &x.point));
                match j {
                    Some(j) => fs.log_probs[j] - q[j].ln(),
                    None => f64::NAN,
                }
            }
        }
    }
}

fn mt_log_ratio(base: &BaseDistribution, x: &[f64], mu: &[f64]) -> f64 {
    let y: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
    match (base.potential(x), base.potential(&y)) {
        (Some(dx), Some(dy)) => -(dx - dy),
        _ => f64::NAN,
    }
}

fn sample_tilted<R: Rng + ?Sized>(base: &BaseDistribution, mu: &[f64], rng: &mut R, out: &mut Draw) {
    match base {
        BaseDistribution::StandardNormal { .. } => {
            for (x, m) in out.point.iter_mut().zip(mu) {
                let z: f64 = rng.sample(StandardNormal);
                *x = m + z;
            }
            out.atom = None;
        }
        BaseDistribution::SymmetricExponential { .. } => {
            for (x, m) in out.point.iter_mut().zip(mu) {
                *x = sample_tilted_laplace(rng, *m);
            }
            out.atom = None;
        }
        BaseDistribution::FiniteSupport(fs) => {
            let (w, _) = fs.tilted(mu);
            let j = sample_categorical(rng, &w);
            out.point.copy_from_slice(&fs.atoms[j]);
            out.atom = Some(j);
        }
    }
}

/// Density proportional to `exp(t x - |x|)`, `|t| < 1`: a two-sided
/// exponential with rate `1 - t` on the right and `1 + t` on the left.
fn sample_tilted_laplace<R: Rng + ?Sized>(rng: &mut R, t: f64) -> f64 {
    let right = rng.random::<f64>() < 0.5 * (1.0 + t);
    let e: f64 = rng.sample(Exp1);
    if right {
        e / (1.0 - t)
    } else {
        -e / (1.0 + t)
    }
}

fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(weights.len() - 1)
}

fn check_param_dim(domain: &Polytope, dim: usize) -> Result<()> {
    if domain.dim() != dim {
        return Err(FamilyError::Dimension(format!(
            "parameter set has dimension {} but the base law has dimension {dim}",
            domain.dim()
        )));
    }
    Ok(())
}

fn check_inside_unit_box(domain: &Polytope) -> Result<()> {
    // every coordinate of M must be bounded strictly inside (-1, 1)
    for i in 0..domain.dim() {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for r in 0..domain.rows() {
            let nz: Vec<usize> = (0..domain.dim()).filter(|&c| domain.a()[(r, c)] != 0.0).collect();
            if nz != [i] {
                continue;
            }
            let a = domain.a()[(r, i)];
            if a > 0.0 {
                hi = hi.min(domain.b()[r] / a);
            } else {
                lo = lo.max(domain.b()[r] / a);
            }
        }
        if !(lo > -1.0 && hi < 1.0) {
            return Err(FamilyError::Unsupported(
                "tilting the symmetric exponential law needs M inside (-1, 1)^m".into(),
            ));
        }
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
