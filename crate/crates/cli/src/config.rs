//! Experiment configuration: TOML with flat sections, unknown keys rejected.
//!
//! ```toml
//! name = "demo"
//! engines = ["joint-nda", "projected-sgd"]
//! trajectories = 20
//! horizon = 10000
//! seed = 0
//!
//! [problem]
//! kind = "normal-quantile"      # exponential-quantile, finite-quantile, quadratic
//! alpha_tail = 1e-4
//! gradient_scale = 1e4
//! theta_lower = [-10.0]
//! theta_upper = [10.0]
//!
//! [family]
//! kind = "exponential-tilting"  # mean-translation, mixture
//! mu_lower = [-1.7]
//! mu_upper = [1.7]
//!
//! [schedule]
//! gamma = 0.55
//! theta_alpha0 = 0.05
//! mu_alpha0 = 3e-6
//!
//! [init]
//! theta0 = [7.0]
//! mu0 = [0.2]
//!
//! [record]
//! stride = 100
//! burn_in = 4000
//! ```
//!
//! Polytopes are given either as `*_lower`/`*_upper` boxes or as
//! `*_rows`/`*_rhs` for `A x <= b`.

use std::path::Path;

use adaptis_core::diagnostics::geometric_checkpoints;
use adaptis_core::is_families::{BaseDistribution, Component, FiniteSupport, IsFamily};
use adaptis_core::linalg::Polytope;
use adaptis_core::problems::{
    constrained_quadratic_problem, exponential_quantile_problem, finite_quantile_problem, normal_quantile_problem, Problem,
};
use adaptis_core::solver::{Engine, EngineKind, StepSchedule};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("`{field}`: {message}")]
    Invalid { field: &'static str, message: String },
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub description: Option<String>,
    pub engines: Vec<String>,
    pub trajectories: Option<usize>,
    pub horizon: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<String>,
    pub problem: ProblemSpec,
    #[serde(default)]
    pub family: Option<FamilySpec>,
    pub schedule: ScheduleSpec,
    pub init: InitSpec,
    #[serde(default)]
    pub record: RecordSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub kind: String,
    #[serde(default)]
    pub alpha_tail: Option<f64>,
    #[serde(default)]
    pub gradient_scale: Option<f64>,
    #[serde(default)]
    pub theta_lower: Option<Vec<f64>>,
    #[serde(default)]
    pub theta_upper: Option<Vec<f64>>,
    #[serde(default)]
    pub theta_rows: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub theta_rhs: Option<Vec<f64>>,
    #[serde(default)]
    pub hessian: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub noise_cov: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub atoms: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub probs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub kind: String,
    #[serde(default)]
    pub mu_lower: Option<Vec<f64>>,
    #[serde(default)]
    pub mu_upper: Option<Vec<f64>>,
    #[serde(default)]
    pub mu_rows: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub mu_rhs: Option<Vec<f64>>,
    /// Mixture components, in the order tilts, shifts, weights.
    #[serde(default)]
    pub tilts: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub shifts: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub weights: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub gamma: f64,
    pub theta_alpha0: f64,
    /// Defaults to `theta_alpha0` (one shared schedule).
    #[serde(default)]
    pub mu_alpha0: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub theta0: Vec<f64>,
    #[serde(default)]
    pub mu0: Vec<f64>,
    #[serde(default)]
    pub theta_center: Option<Vec<f64>>,
    #[serde(default)]
    pub mu_center: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordSpec {
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Every iteration in the last `dense_window` steps is recorded, so hit
    /// times near the horizon are exact.
    #[serde(default = "default_dense_window")]
    pub dense_window: usize,
    #[serde(default)]
    pub burn_in: usize,
    /// CSV checkpoints; geometric plus a linear grid past the burn-in when
    /// omitted.
    #[serde(default)]
    pub checkpoints: Option<Vec<usize>>,
    /// Rows of `M` whose identification is tracked.
    #[serde(default)]
    pub mu_target_rows: Option<Vec<usize>>,
}

fn default_stride() -> usize {
    100
}

fn default_dense_window() -> usize {
    100
}

impl Default for RecordSpec {
    fn default() -> Self {
        RecordSpec {
            stride: default_stride(),
            dense_window: default_dense_window(),
            burn_in: 0,
            checkpoints: None,
            mu_target_rows: None,
        }
    }
}

/// Command-line overrides applied before validation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub trajectories: Option<usize>,
    pub horizon: Option<usize>,
    pub seed: Option<u64>,
    pub output: Option<String>,
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text).map_err(|e| match e {
        ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

impl ExperimentConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if o.trajectories.is_some() {
            self.trajectories = o.trajectories;
        }
        if o.horizon.is_some() {
            self.horizon = o.horizon;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if o.output.is_some() {
            self.output = o.output.clone();
        }
    }

    /// Checks every field and builds the runnable experiment.
    pub fn validate(&self) -> Result<Experiment, ConfigError> {
        let horizon = self.horizon.ok_or_else(|| invalid("horizon", "missing"))?;
        if horizon == 0 {
            return Err(invalid("horizon", "must be at least 1"));
        }
        let trajectories = self.trajectories.ok_or_else(|| invalid("trajectories", "missing"))?;
        if trajectories == 0 {
            return Err(invalid("trajectories", "must be at least 1"));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(invalid("name", "must be a non-empty file-name-safe string"));
        }
        if self.engines.is_empty() {
            return Err(invalid("engines", "list at least one engine"));
        }
        let mut engines = Vec::new();
        for e in &self.engines {
            let kind: EngineKind = e.parse().map_err(|_| invalid("engines", format!("unknown engine `{e}`")))?;
            if engines.contains(&kind) {
                return Err(invalid("engines", format!("`{e}` listed twice")));
            }
            engines.push(kind);
        }

        let s = &self.schedule;
        if !(s.gamma > 0.5 && s.gamma < 1.0) {
            return Err(invalid("schedule.gamma", format!("{} is outside the open interval (1/2, 1)", s.gamma)));
        }
        let schedule = StepSchedule::new(s.gamma, s.theta_alpha0, s.mu_alpha0.unwrap_or(s.theta_alpha0))
            .map_err(|e| invalid("schedule", e.to_string()))?;

        let problem = build_problem(&self.problem)?;
        let family = match &self.family {
            Some(f) => Some(build_family(f, problem.nominal())?),
            None => None,
        };
        if engines.iter().any(|e| e.is_joint()) && family.is_none() {
            return Err(invalid("family", "joint engines need an IS family"));
        }
        for &kind in &engines {
            Engine::new(kind, problem.as_ref(), family.as_ref(), schedule).map_err(|e| invalid("engines", e.to_string()))?;
        }

        if self.init.theta0.len() != problem.dim() {
            return Err(invalid(
                "init.theta0",
                format!("has {} entries, the problem has dimension {}", self.init.theta0.len(), problem.dim()),
            ));
        }
        if !problem.feasible_set().contains(&self.init.theta0) {
            return Err(invalid("init.theta0", "is outside Theta"));
        }
        if let Some(f) = &family {
            if self.init.mu0.len() != f.param_dim() {
                return Err(invalid(
                    "init.mu0",
                    format!("has {} entries, the family has {} parameters", self.init.mu0.len(), f.param_dim()),
                ));
            }
            if !f.domain().contains(&self.init.mu0) {
                return Err(invalid("init.mu0", "is outside M"));
            }
        }

        let r = &self.record;
        if r.burn_in >= horizon {
            return Err(invalid("record.burn_in", format!("{} is not below the horizon {horizon}", r.burn_in)));
        }
        let mut checkpoints = match &r.checkpoints {
            Some(c) => {
                if let Some(bad) = c.iter().find(|&&n| n > horizon) {
                    return Err(invalid("record.checkpoints", format!("{bad} exceeds the horizon {horizon}")));
                }
                c.clone()
            }
            None => default_checkpoints(horizon, r.burn_in),
        };
        checkpoints.push(r.burn_in);
        checkpoints.push(horizon);
        checkpoints.sort_unstable();
        checkpoints.dedup();
        if let (Some(rows), Some(f)) = (&r.mu_target_rows, &family) {
            if let Some(bad) = rows.iter().find(|&&i| i >= f.domain().rows()) {
                return Err(invalid("record.mu_target_rows", format!("M has no row {bad}")));
            }
        }

        Ok(Experiment {
            name: self.name.clone(),
            engines,
            trajectories,
            horizon,
            seed: self.seed,
            problem,
            family,
            schedule,
            theta0: self.init.theta0.clone(),
            mu0: self.init.mu0.clone(),
            theta_center: self.init.theta_center.clone(),
            mu_center: self.init.mu_center.clone(),
            stride: r.stride,
            dense_window: r.dense_window.min(horizon),
            burn_in: r.burn_in,
            checkpoints,
            mu_target_rows: r.mu_target_rows.clone(),
        })
    }
}

/// Geometric checkpoints from 10 with ratio `10^(1/8)`, plus twenty evenly
/// spaced ones past the burn-in.
pub fn default_checkpoints(horizon: usize, burn_in: usize) -> Vec<usize> {
    let mut c = if horizon > 10 {
        geometric_checkpoints(10, 10f64.powf(0.125), horizon)
    } else {
        (1..=horizon).collect()
    };
    let span = horizon - burn_in;
    c.extend((1..=20).map(|k| burn_in + k * span / 20).filter(|&n| n > burn_in));
    c.sort_unstable();
    c.dedup();
    c
}

/// A validated configuration with its problem and family built.
pub struct Experiment {
    pub name: String,
    pub engines: Vec<EngineKind>,
    pub trajectories: usize,
    pub horizon: usize,
    pub seed: u64,
    pub problem: Box<dyn Problem>,
    pub family: Option<IsFamily>,
    pub schedule: StepSchedule,
    pub theta0: Vec<f64>,
    pub mu0: Vec<f64>,
    pub theta_center: Option<Vec<f64>>,
    pub mu_center: Option<Vec<f64>>,
    pub stride: usize,
    pub dense_window: usize,
    pub burn_in: usize,
    pub checkpoints: Vec<usize>,
    pub mu_target_rows: Option<Vec<usize>>,
}

fn matrix(field: &'static str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ConfigError> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(invalid(field, "rows have different lengths"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn polytope(
    field: &'static str,
    lower: &Option<Vec<f64>>,
    upper: &Option<Vec<f64>>,
    rows: &Option<Vec<Vec<f64>>>,
    rhs: &Option<Vec<f64>>,
    dim: Option<usize>,
) -> Result<Polytope, ConfigError> {
    let built = match (lower, upper, rows, rhs) {
        (Some(lo), Some(hi), None, None) => Polytope::bounds(lo, hi),
        (None, None, Some(a), Some(b)) => Polytope::from_rows(a, b),
        (None, None, None, None) => match dim {
            Some(d) => Ok(Polytope::unconstrained(d)),
            None => return Err(invalid(field, "give lower/upper bounds or rows/rhs")),
        },
        _ => return Err(invalid(field, "give either lower and upper, or rows and rhs")),
    };
    let p = built.map_err(|e| invalid(field, e.to_string()))?;
    if let Some(d) = dim {
        if p.dim() != d {
            return Err(invalid(field, format!("has dimension {}, expected {d}", p.dim())));
        }
    }
    Ok(p)
}

fn build_problem(spec: &ProblemSpec) -> Result<Box<dyn Problem>, ConfigError> {
    let theta_set = |dim| polytope("problem.theta", &spec.theta_lower, &spec.theta_upper, &spec.theta_rows, &spec.theta_rhs, dim);
    let alpha = || spec.alpha_tail.ok_or_else(|| invalid("problem.alpha_tail", "missing"));
    let scaled = |p: adaptis_core::problems::QuantileProblem| -> Result<Box<dyn Problem>, ConfigError> {
        let p = match spec.gradient_scale {
            Some(s) => p.with_gradient_scale(s).map_err(|e| invalid("problem.gradient_scale", e.to_string()))?,
            None => p,
        };
        Ok(Box::new(p))
    };
    let quantile_only = [
        ("problem.hessian", spec.hessian.is_some()),
        ("problem.noise_cov", spec.noise_cov.is_some()),
    ];
    match spec.kind.as_str() {
        "normal-quantile" | "exponential-quantile" | "finite-quantile" => {
            if let Some((f, _)) = quantile_only.iter().find(|(_, set)| *set) {
                return Err(invalid(f, format!("not used by {}", spec.kind)));
            }
            let theta = theta_set(Some(1))?;
            let a = alpha()?;
            let e = |e: adaptis_core::problems::ProblemError| invalid("problem", e.to_string());
            match spec.kind.as_str() {
                "normal-quantile" => scaled(normal_quantile_problem(a, theta).map_err(e)?),
                "exponential-quantile" => scaled(exponential_quantile_problem(a, theta).map_err(e)?),
                _ => {
                    let atoms = spec.atoms.clone().ok_or_else(|| invalid("problem.atoms", "missing"))?;
                    let probs = spec.probs.clone().ok_or_else(|| invalid("problem.probs", "missing"))?;
                    let law = FiniteSupport::new(atoms, probs).map_err(|err| invalid("problem.probs", err.to_string()))?;
                    scaled(finite_quantile_problem(law, a, theta).map_err(e)?)
                }
            }
        }
        "quadratic" => {
            if spec.alpha_tail.is_some() || spec.gradient_scale.is_some() || spec.atoms.is_some() {
                return Err(invalid("problem", "quadratic takes hessian, noise_cov and Theta only"));
            }
            let h = matrix("problem.hessian", spec.hessian.as_deref().ok_or_else(|| invalid("problem.hessian", "missing"))?)?;
            let sigma = match &spec.noise_cov {
                Some(rows) => matrix("problem.noise_cov", rows)?,
                None => DMatrix::identity(h.nrows(), h.nrows()),
            };
            let theta = theta_set(Some(h.nrows()))?;
            let p = constrained_quadratic_problem(h, sigma, theta).map_err(|e| invalid("problem.hessian", e.to_string()))?;
            Ok(Box::new(p))
        }
        other => Err(invalid("problem.kind", format!("unknown problem `{other}`"))),
    }
}

fn build_family(spec: &FamilySpec, base: &BaseDistribution) -> Result<IsFamily, ConfigError> {
    let mixture_fields = spec.tilts.is_some() || spec.shifts.is_some() || spec.weights.is_some();
    let err = |e: adaptis_core::is_families::FamilyError| invalid("family", e.to_string());
    match spec.kind.as_str() {
        "exponential-tilting" | "mean-translation" => {
            if mixture_fields {
                return Err(invalid("family", "tilts/shifts/weights are mixture-only"));
            }
            let domain = polytope("family.mu", &spec.mu_lower, &spec.mu_upper, &spec.mu_rows, &spec.mu_rhs, None)?;
            if spec.kind == "exponential-tilting" {
                IsFamily::exponential_tilting(base.clone(), domain).map_err(err)
            } else {
                IsFamily::mean_translation(base.clone(), domain).map_err(err)
            }
        }
        "mixture" => {
            if spec.mu_lower.is_some() || spec.mu_upper.is_some() || spec.mu_rows.is_some() || spec.mu_rhs.is_some() {
                return Err(invalid("family.mu", "a mixture's parameter set is always the simplex"));
            }
            let mut components = Vec::new();
            components.extend(spec.tilts.iter().flatten().cloned().map(Component::Tilt));
            components.extend(spec.shifts.iter().flatten().cloned().map(Component::Shift));
            components.extend(spec.weights.iter().flatten().cloned().map(Component::Weights));
            IsFamily::mixture(base.clone(), components).map_err(err)
        }
        other => Err(invalid("family.kind", format!("unknown family `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "t"
engines = ["joint-nda"]
trajectories = 2
horizon = 100

[problem]
kind = "normal-quantile"
alpha_tail = 0.01
theta_lower = [-10.0]
theta_upper = [10.0]

[family]
kind = "exponential-tilting"
mu_lower = [-1.0]
mu_upper = [1.0]

[schedule]
gamma = 0.6
theta_alpha0 = 0.1

[init]
theta0 = [0.0]
mu0 = [0.0]
"#;

    #[test]
    fn minimal_config_validates() {
        let exp = parse_config(MINIMAL).unwrap().validate().unwrap();
        assert_eq!(exp.horizon, 100);
        assert_eq!(exp.schedule.mu_step(1), 0.1);
        assert_eq!(*exp.checkpoints.last().unwrap(), 100);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("theta_alpha0 = 0.1", "theta_alpha0 = 0.1\nalpha_0 = 0.2");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("alpha_0"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn missing_horizon_names_the_field() {
        let text = MINIMAL.replace("horizon = 100\n", "");
        let err = parse_config(&text).unwrap().validate().err().unwrap();
        assert!(matches!(err, ConfigError::Invalid { field: "horizon", .. }));
    }

    #[test]
    fn gamma_interval_is_open() {
        for g in ["0.5", "1.0"] {
            let text = MINIMAL.replace("gamma = 0.6", &format!("gamma = {g}"));
            let err = parse_config(&text).unwrap().validate().err().unwrap();
            assert!(matches!(err, ConfigError::Invalid { field: "schedule.gamma", .. }), "{g}");
        }
    }

    #[test]
    fn dimensions_are_cross_checked() {
        let text = MINIMAL.replace("mu0 = [0.0]", "mu0 = [0.0, 0.0]");
        assert!(matches!(
            parse_config(&text).unwrap().validate().err().unwrap(),
            ConfigError::Invalid { field: "init.mu0", .. }
        ));
        let text = MINIMAL.replace("theta0 = [0.0]", "theta0 = [11.0]");
        assert!(parse_config(&text).unwrap().validate().is_err());
        let text = MINIMAL.replace("trajectories = 2", "trajectories = 0");
        assert!(parse_config(&text).unwrap().validate().is_err());
    }

    #[test]
    fn overrides_fill_missing_values() {
        let text = MINIMAL.replace("horizon = 100\n", "");
        let mut cfg = parse_config(&text).unwrap();
        cfg.apply(&Overrides {
            horizon: Some(50),
            ..Overrides::default()
        });
        assert_eq!(cfg.validate().unwrap().horizon, 50);
    }

    #[test]
    fn default_checkpoints_cover_the_post_burn_in_window() {
        let c = default_checkpoints(100_000, 40_000);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert!(c.contains(&43_000) && c.contains(&100_000) && c.contains(&10));
    }
}
