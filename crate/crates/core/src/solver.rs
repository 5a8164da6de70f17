//! Iteration engines sharing one step schedule and one recording contract.
//!
//! The joint engine runs dual averaging on the pair `(theta, mu)`: the
//! decision block is driven by importance-weighted gradients drawn from
//! `P_mu`, the sampler block by the gradient of the variance objective
//! `v(theta, mu) = E_P[||P_A G(theta, X)||^2 l(X, mu)]`. Because the proximal
//! term is separable the joint argmin splits into two independent prox solves.
//!
//! Each trajectory owns two ChaCha streams derived from its seed: the
//! *decision* stream feeds the draw behind the `theta` gradient and the
//! *parameter* stream feeds the draw behind the `mu` gradient. Baselines only
//! touch the decision stream, which makes a frozen-`mu` joint run and vanilla
//! dual averaging consume identical randomness.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::is_families::{cumulant, BaseDistribution, Draw, FamilyError, IsFamily};
use crate::linalg::{active_set, dual_average_step_into, ActiveSet, LinalgError, Polytope, Projector};
use crate::problems::Problem;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("non-finite gradient at iteration {iteration} (sample {sample:?}, mu {mu:?})")]
    NonFiniteGradient {
        iteration: usize,
        sample: Vec<f64>,
        mu: Vec<f64>,
    },
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Family(#[from] FamilyError),
}

pub type Result<T> = std::result::Result<T, SolverError>;

/// `alpha_n = alpha0 * n^(-gamma)` for `n >= 1`, with separate `alpha0` for
/// the decision and sampler blocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    gamma: f64,
    theta_alpha0: f64,
    mu_alpha0: f64,
}

impl StepSchedule {
    pub fn new(gamma: f64, theta_alpha0: f64, mu_alpha0: f64) -> Result<Self> {
        if !(gamma > 0.5 && gamma < 1.0) {
            return Err(SolverError::Config(format!("gamma = {gamma} must lie in (1/2, 1)")));
        }
        for (name, a) in [("theta_alpha0", theta_alpha0), ("mu_alpha0", mu_alpha0)] {
            if !(a > 0.0 && a.is_finite()) {
                return Err(SolverError::Config(format!("{name} = {a} must be positive")));
            }
        }
        Ok(StepSchedule {
            gamma,
            theta_alpha0,
            mu_alpha0,
        })
    }

    /// One `alpha0` for both blocks.
    pub fn shared(alpha0: f64, gamma: f64) -> Result<Self> {
        Self::new(gamma, alpha0, alpha0)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn theta_step(&self, n: usize) -> f64 {
        debug_assert!(n >= 1);
        self.theta_alpha0 * (n as f64).powf(-self.gamma)
    }

    pub fn mu_step(&self, n: usize) -> f64 {
        debug_assert!(n >= 1);
        self.mu_alpha0 * (n as f64).powf(-self.gamma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EngineKind {
    JointNda,
    JointNdaSecondary,
    VanillaNda,
    ProjectedSgd,
    PrSa,
    RmSa,
}

impl EngineKind {
    pub const ALL: [EngineKind; 6] = [
        EngineKind::JointNda,
        EngineKind::JointNdaSecondary,
        EngineKind::VanillaNda,
        EngineKind::ProjectedSgd,
        EngineKind::PrSa,
        EngineKind::RmSa,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EngineKind::JointNda => "joint-nda",
            EngineKind::JointNdaSecondary => "joint-nda-secondary",
            EngineKind::VanillaNda => "vanilla-nda",
            EngineKind::ProjectedSgd => "projected-sgd",
            EngineKind::PrSa => "pr-sa",
            EngineKind::RmSa => "rm-sa",
        }
    }

    pub fn is_joint(&self) -> bool {
        matches!(self, EngineKind::JointNda | EngineKind::JointNdaSecondary)
    }
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EngineKind {
    type Err = SolverError;

    fn from_str(s: &str) -> Result<Self> {
        EngineKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| SolverError::Config(format!("unknown engine `{s}`")))
    }
}

/// Two independent ChaCha streams for one trajectory.
#[derive(Debug, Clone)]
pub struct SampleStreams {
    pub decision: ChaCha8Rng,
    pub parameter: ChaCha8Rng,
}

impl SampleStreams {
    pub fn from_seed(seed: u64) -> Self {
        let mut decision = ChaCha8Rng::seed_from_u64(seed);
        decision.set_stream(0);
        let mut parameter = ChaCha8Rng::seed_from_u64(seed);
        parameter.set_stream(1);
        SampleStreams { decision, parameter }
    }
}

/// Compensated running sum, one accumulator per coordinate.
#[derive(Debug, Clone, PartialEq)]
struct KahanSum {
    sum: Vec<f64>,
    carry: Vec<f64>,
}

impl KahanSum {
    fn new(dim: usize) -> Self {
        KahanSum {
            sum: vec![0.0; dim],
            carry: vec![0.0; dim],
        }
    }

    fn add(&mut self, v: &[f64]) {
        for ((s, c), x) in self.sum.iter_mut().zip(self.carry.iter_mut()).zip(v) {
            let y = x - *c;
            let t = *s + y;
            *c = (t - *s) - y;
            *s = t;
        }
    }
}

/// Iterates, dual-averaging accumulators and running averages after `n` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub n: usize,
    pub theta: Vec<f64>,
    pub mu: Vec<f64>,
    /// `sum_{k<n} alpha_{k+1} G_k`.
    pub g_accum: Vec<f64>,
    /// `sum_{k<n} alpha_{k+1} H_k`.
    pub h_accum: Vec<f64>,
    pub theta_center: Vec<f64>,
    pub mu_center: Vec<f64>,
    /// Draws consumed so far.
    pub samples: u64,
    theta_sum: KahanSum,
    mu_sum: KahanSum,
}

impl JointState {
    /// Starts at `(theta0, mu0)`, which also serve as prox centers.
    pub fn new(theta0: Vec<f64>, mu0: Vec<f64>) -> Self {
        let (s, m) = (theta0.len(), mu0.len());
        JointState {
            n: 0,
            g_accum: vec![0.0; s],
            h_accum: vec![0.0; m],
            theta_center: theta0.clone(),
            mu_center: mu0.clone(),
            theta: theta0,
            mu: mu0,
            samples: 0,
            theta_sum: KahanSum::new(s),
            mu_sum: KahanSum::new(m),
        }
    }

    /// Separate prox centers from the initial iterate.
    pub fn with_centers(mut self, theta_center: Vec<f64>, mu_center: Vec<f64>) -> Self {
        self.theta_center = theta_center;
        self.mu_center = mu_center;
        self
    }

    /// `(1/n) sum_{i<n} theta_i`; equal to `theta_0` before the first step.
    pub fn theta_bar(&self) -> Vec<f64> {
        average(&self.theta_sum, self.n, &self.theta)
    }

    pub fn mu_bar(&self) -> Vec<f64> {
        average(&self.mu_sum, self.n, &self.mu)
    }

    fn push_averages(&mut self) {
        self.theta_sum.add(&self.theta);
        self.mu_sum.add(&self.mu);
    }
}

fn average(acc: &KahanSum, n: usize, current: &[f64]) -> Vec<f64> {
    if n == 0 {
        current.to_vec()
    } else {
        acc.sum.iter().map(|s| s / n as f64).collect()
    }
}

#[derive(Debug, Clone)]
struct Workspace {
    draw_theta: Draw,
    draw_mu: Draw,
    grad: Vec<f64>,
    grad_mu_side: Vec<f64>,
    lr_grad: Vec<f64>,
    h: Vec<f64>,
    scratch: Vec<f64>,
    next: Vec<f64>,
    projector: Option<(ActiveSet, Projector)>,
}

/// One configured iteration engine bound to a problem (and a family for the
/// joint variants).
pub struct Engine<'a> {
    kind: EngineKind,
    problem: &'a dyn Problem,
    family: Option<&'a IsFamily>,
    schedule: StepSchedule,
    gain: Option<DMatrix<f64>>,
    ws: Workspace,
}

impl<'a> Engine<'a> {
    pub fn new(
        kind: EngineKind,
        problem: &'a dyn Problem,
        family: Option<&'a IsFamily>,
        schedule: StepSchedule,
    ) -> Result<Self> {
        let s = problem.dim();
        let r = problem.nominal().dim();
        if problem.feasible_set().dim() != s {
            return Err(SolverError::Config("feasible set dimension differs from the problem".into()));
        }
        let family = if kind.is_joint() {
            let fam = family.ok_or_else(|| SolverError::Config(format!("{kind} needs an IS family")))?;
            if fam.base() != problem.nominal() {
                return Err(SolverError::Config("IS family base differs from the problem's nominal law".into()));
            }
            if kind == EngineKind::JointNdaSecondary {
                if !fam.is_exponential_tilting() {
                    return Err(SolverError::Config("secondary sampling needs an exponential tilting family".into()));
                }
                if !fam.domain().is_symmetric() {
                    return Err(SolverError::Config("secondary sampling needs M = -M".into()));
                }
            }
            Some(fam)
        } else {
            None
        };
        let m = family.map_or(0, |f| f.param_dim());
        Ok(Engine {
            kind,
            problem,
            family,
            schedule,
            gain: None,
            ws: Workspace {
                draw_theta: Draw::zeros(r),
                draw_mu: Draw::zeros(r),
                grad: vec![0.0; s],
                grad_mu_side: vec![0.0; s],
                lr_grad: vec![0.0; m],
                h: vec![0.0; m],
                scratch: Vec::with_capacity(m),
                next: vec![0.0; s.max(m)],
                projector: None,
            },
        })
    }

    /// Gain matrix `K` of Robbins-Monro (identity when unset).
    pub fn with_gain(mut self, gain: DMatrix<f64>) -> Result<Self> {
        let s = self.problem.dim();
        if gain.shape() != (s, s) {
            return Err(SolverError::Config(format!("gain must be {s}x{s}")));
        }
        self.gain = Some(gain);
        Ok(self)
    }

    pub fn kind(&self) -> EngineKind {
        self.kind
    }

    pub fn param_dim(&self) -> usize {
        self.family.map_or(0, |f| f.param_dim())
    }

    /// Initial state at `(theta0, mu0)`; `mu0` is ignored by the baselines.
    pub fn init_state(&self, theta0: &[f64], mu0: &[f64]) -> Result<JointState> {
        let theta_set = self.problem.feasible_set();
        if theta0.len() != self.problem.dim() || !theta_set.contains(theta0) {
            return Err(SolverError::Config(format!("theta0 = {theta0:?} is not in Theta")));
        }
        let mu0 = match self.family {
            Some(fam) => {
                if mu0.len() != fam.param_dim() || !fam.domain().contains(mu0) {
                    return Err(SolverError::Config(format!("mu0 = {mu0:?} is not in M")));
                }
                mu0.to_vec()
            }
            None => Vec::new(),
        };
        Ok(JointState::new(theta0.to_vec(), mu0))
    }

    pub fn step(&mut self, state: &mut JointState, streams: &mut SampleStreams) -> Result<()> {
        match self.kind {
            EngineKind::JointNda | EngineKind::JointNdaSecondary => self.joint_step(state, streams),
            EngineKind::VanillaNda => self.nda_step(state, streams),
            EngineKind::ProjectedSgd => self.projected_step(state, streams),
            EngineKind::PrSa | EngineKind::RmSa => self.sa_step(state, streams),
        }
    }

    fn non_finite(&self, state: &JointState, sample: &Draw) -> SolverError {
        SolverError::NonFiniteGradient {
            iteration: state.n,
            sample: sample.point.clone(),
            mu: state.mu.clone(),
        }
    }

    fn projector_at(&mut self, theta: &[f64]) -> Result<()> {
        let theta_set = self.problem.feasible_set();
        let active = if theta_set.rows() == 0 {
            ActiveSet::default()
        } else {
            active_set(theta, theta_set, None)
        };
        if self.ws.projector.as_ref().is_some_and(|(a, _)| *a == active) {
            return Ok(());
        }
        let p = theta_set.projector_for(&active)?;
        self.ws.projector = Some((active, p));
        Ok(())
    }

    fn joint_step(&mut self, state: &mut JointState, streams: &mut SampleStreams) -> Result<()> {
        let fam = self.family.expect("joint engines carry a family");
        let k = state.n + 1;
        let a_theta = self.schedule.theta_step(k);
        let a_mu = self.schedule.mu_step(k);

        // G_n = G(theta_n, X) l(X, mu_n), X ~ P_{mu_n}
        fam.sample_into(&state.mu, &mut streams.decision, &mut self.ws.draw_theta);
        self.problem
            .stochastic_gradient(&state.theta, &self.ws.draw_theta, &mut self.ws.grad);
        let weight = fam.likelihood_ratio(&self.ws.draw_theta, &state.mu);
        for g in self.ws.grad.iter_mut() {
            *g *= weight;
        }
        if self.ws.grad.iter().any(|g| !g.is_finite()) {
            return Err(self.non_finite(state, &self.ws.draw_theta));
        }

        // H_n from an independent draw
        self.projector_at(&state.theta)?;
        if self.kind == EngineKind::JointNda {
            self.problem.nominal().sample_into(&mut streams.parameter, &mut self.ws.draw_mu);
            self.problem
                .stochastic_gradient(&state.theta, &self.ws.draw_mu, &mut self.ws.grad_mu_side);
            let pg2 = self.ws.projector.as_ref().unwrap().1.norm_squared(&self.ws.grad_mu_side);
            fam.likelihood_ratio_grad_into(&self.ws.draw_mu, &state.mu, &mut self.ws.lr_grad);
            for (h, dl) in self.ws.h.iter_mut().zip(&self.ws.lr_grad) {
                *h = pg2 * dl;
            }
        } else {
            // X ~ P_{-mu}: H = (grad phi(mu) - X) ||P G||^2 exp(phi(mu) + phi(-mu))
            fam.sample_reflected_into(&state.mu, &mut streams.parameter, &mut self.ws.draw_mu, &mut self.ws.scratch);
            self.problem
                .stochastic_gradient(&state.theta, &self.ws.draw_mu, &mut self.ws.grad_mu_side);
            let pg2 = self.ws.projector.as_ref().unwrap().1.norm_squared(&self.ws.grad_mu_side);
            let (log_weight, grad_phi) = reflected_weight(fam.base(), &state.mu)?;
            let w = pg2 * log_weight.exp();
            for ((h, gp), x) in self.ws.h.iter_mut().zip(&grad_phi).zip(&self.ws.draw_mu.point) {
                *h = (gp - x) * w;
            }
        }
        if self.ws.h.iter().any(|h| !h.is_finite()) {
            return Err(self.non_finite(state, &self.ws.draw_mu));
        }

        for (acc, g) in state.g_accum.iter_mut().zip(&self.ws.grad) {
            *acc += a_theta * g;
        }
        for (acc, h) in state.h_accum.iter_mut().zip(&self.ws.h) {
            *acc += a_mu * h;
        }
        state.push_averages();

        let s = state.theta.len();
        dual_average_step_into(&state.g_accum, &state.theta_center, self.problem.feasible_set(), &mut self.ws.next[..s])?;
        state.theta.copy_from_slice(&self.ws.next[..s]);
        let m = state.mu.len();
        dual_average_step_into(&state.h_accum, &state.mu_center, fam.domain(), &mut self.ws.next[..m])?;
        state.mu.copy_from_slice(&self.ws.next[..m]);

        state.n += 1;
        state.samples += 2;
        Ok(())
    }

    fn nominal_gradient(&mut self, state: &JointState, streams: &mut SampleStreams) -> Result<()> {
        self.problem.nominal().sample_into(&mut streams.decision, &mut self.ws.draw_theta);
        self.problem
            .stochastic_gradient(&state.theta, &self.ws.draw_theta, &mut self.ws.grad);
        if self.ws.grad.iter().any(|g| !g.is_finite()) {
            return Err(self.non_finite(state, &self.ws.draw_theta));
        }
        Ok(())
    }

    fn nda_step(&mut self, state: &mut JointState, streams: &mut SampleStreams) -> Result<()> {
        self.nominal_gradient(state, streams)?;
        let a = self.schedule.theta_step(state.n + 1);
        for (acc, g) in state.g_accum.iter_mut().zip(&self.ws.grad) {
            *acc += a * g;
        }
        state.push_averages();
        let s = state.theta.len();
        dual_average_step_into(&state.g_accum, &state.theta_center, self.problem.feasible_set(), &mut self.ws.next[..s])?;
        state.theta.copy_from_slice(&self.ws.next[..s]);
        state.n += 1;
        state.samples += 1;
        Ok(())
    }

    fn projected_step(&mut self, state: &mut JointState, streams: &mut SampleStreams) -> Result<()> {
        self.nominal_gradient(state, streams)?;
        let a = self.schedule.theta_step(state.n + 1);
        for (acc, g) in state.g_accum.iter_mut().zip(self.ws.grad.iter_mut()) {
            *g *= a;
            *acc += *g;
        }
        state.push_averages();
        let s = state.theta.len();
        dual_average_step_into(&self.ws.grad, &state.theta, self.problem.feasible_set(), &mut self.ws.next[..s])?;
        state.theta.copy_from_slice(&self.ws.next[..s]);
        state.n += 1;
        state.samples += 1;
        Ok(())
    }

    /// Unconstrained Robbins-Monro `theta_{n+1} = theta_n - alpha_{n+1} K G_n`,
    /// kept in accumulated form `theta_0 - sum alpha K G`.
    fn sa_step(&mut self, state: &mut JointState, streams: &mut SampleStreams) -> Result<()> {
        self.nominal_gradient(state, streams)?;
        let a = self.schedule.theta_step(state.n + 1);
        match (&self.gain, self.kind) {
            (Some(k), EngineKind::RmSa) => {
                let s = state.theta.len();
                for i in 0..s {
                    let kg: f64 = (0..s).map(|j| k[(i, j)] * self.ws.grad[j]).sum();
                    state.g_accum[i] += a * kg;
                }
            }
            _ => {
                for (acc, g) in state.g_accum.iter_mut().zip(&self.ws.grad) {
                    *acc += a * g;
                }
            }
        }
        state.push_averages();
        for ((t, c), acc) in state.theta.iter_mut().zip(&state.theta_center).zip(&state.g_accum) {
            *t = c - acc;
        }
        state.n += 1;
        state.samples += 1;
        Ok(())
    }
}

/// `(phi(mu) + phi(-mu), grad phi(mu))`.
fn reflected_weight(base: &BaseDistribution, mu: &[f64]) -> Result<(f64, Vec<f64>)> {
    if let BaseDistribution::StandardNormal { .. } = base {
        let sq: f64 = mu.iter().map(|m| m * m).sum();
        return Ok((sq, mu.to_vec()));
    }
    let (phi_plus, grad) = cumulant(base, mu)?;
    let neg: Vec<f64> = mu.iter().map(|m| -m).collect();
    let (phi_minus, _) = cumulant(base, &neg)?;
    Ok((phi_plus + phi_minus, grad))
}

fn single_step(
    kind: EngineKind,
    state: &mut JointState,
    problem: &dyn Problem,
    family: Option<&IsFamily>,
    schedule: StepSchedule,
    streams: &mut SampleStreams,
) -> Result<()> {
    Engine::new(kind, problem, family, schedule)?.step(state, streams)
}

/// One step of joint dual averaging with adaptive importance sampling.
pub fn joint_nda_step(
    state: &mut JointState,
    problem: &dyn Problem,
    family: &IsFamily,
    schedule: StepSchedule,
    streams: &mut SampleStreams,
) -> Result<()> {
    single_step(EngineKind::JointNda, state, problem, Some(family), schedule, streams)
}

/// Joint step whose sampler gradient is drawn from `P_{-mu}`.
pub fn joint_nda_secondary_step(
    state: &mut JointState,
    problem: &dyn Problem,
    family: &IsFamily,
    schedule: StepSchedule,
    streams: &mut SampleStreams,
) -> Result<()> {
    single_step(EngineKind::JointNdaSecondary, state, problem, Some(family), schedule, streams)
}

pub fn vanilla_nda_step(state: &mut JointState, problem: &dyn Problem, schedule: StepSchedule, streams: &mut SampleStreams) -> Result<()> {
    single_step(EngineKind::VanillaNda, state, problem, None, schedule, streams)
}

pub fn projected_sgd_step(state: &mut JointState, problem: &dyn Problem, schedule: StepSchedule, streams: &mut SampleStreams) -> Result<()> {
    single_step(EngineKind::ProjectedSgd, state, problem, None, schedule, streams)
}

pub fn pr_sa_step(state: &mut JointState, problem: &dyn Problem, schedule: StepSchedule, streams: &mut SampleStreams) -> Result<()> {
    single_step(EngineKind::PrSa, state, problem, None, schedule, streams)
}

pub fn rm_sa_step(
    state: &mut JointState,
    problem: &dyn Problem,
    gain: Option<&DMatrix<f64>>,
    schedule: StepSchedule,
    streams: &mut SampleStreams,
) -> Result<()> {
    let mut engine = Engine::new(EngineKind::RmSa, problem, None, schedule)?;
    if let Some(k) = gain {
        engine = engine.with_gain(k.clone())?;
    }
    engine.step(state, streams)
}

/// Which iterations a run keeps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Thinning {
    /// Every `stride`-th iteration is kept (0 keeps only checkpoints).
    pub stride: usize,
    /// Extra iterations that are always kept.
    pub checkpoints: Vec<usize>,
}

impl Thinning {
    pub fn every(stride: usize) -> Self {
        Thinning {
            stride,
            checkpoints: Vec::new(),
        }
    }

    fn keeps(&self, n: usize, horizon: usize) -> bool {
        n == 0 || n == horizon || (self.stride > 0 && n.is_multiple_of(self.stride)) || self.checkpoints.binary_search(&n).is_ok()
    }
}

/// Snapshot of a trajectory at iteration `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordPoint {
    pub n: usize,
    pub theta: Vec<f64>,
    pub mu: Vec<f64>,
    pub theta_bar: Vec<f64>,
    pub mu_bar: Vec<f64>,
    pub active_theta: Vec<usize>,
    pub active_mu: Vec<usize>,
}

/// Thinned trajectory with strictly increasing `n`; the first and last
/// iterations are always present.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub engine: EngineKind,
    pub seed: u64,
    pub stride: usize,
    pub samples: u64,
    pub points: Vec<RecordPoint>,
}

impl TrajectoryRecord {
    pub fn at(&self, n: usize) -> Option<&RecordPoint> {
        self.points
            .binary_search_by_key(&n, |p| p.n)
            .ok()
            .map(|i| &self.points[i])
    }

    pub fn last(&self) -> &RecordPoint {
        self.points.last().expect("records keep the first iteration")
    }
}

/// Everything `run` needs besides the problem, family and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub engine: EngineKind,
    pub schedule: StepSchedule,
    pub theta0: Vec<f64>,
    pub mu0: Vec<f64>,
    pub horizon: usize,
    pub thinning: Thinning,
    pub gain: Option<DMatrix<f64>>,
    pub theta_center: Option<Vec<f64>>,
    pub mu_center: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn new(engine: EngineKind, schedule: StepSchedule, theta0: Vec<f64>, mu0: Vec<f64>, horizon: usize) -> Self {
        RunConfig {
            engine,
            schedule,
            theta0,
            mu0,
            horizon,
            thinning: Thinning::every(1),
            gain: None,
            theta_center: None,
            mu_center: None,
        }
    }
}

fn snapshot(state: &JointState, theta_set: &Polytope, mu_set: Option<&Polytope>) -> RecordPoint {
    RecordPoint {
        n: state.n,
        theta: state.theta.clone(),
        mu: state.mu.clone(),
        theta_bar: state.theta_bar(),
        mu_bar: state.mu_bar(),
        active_theta: active_set(&state.theta, theta_set, None).indices,
        active_mu: mu_set.map_or_else(Vec::new, |m| active_set(&state.mu, m, None).indices),
    }
}

/// Runs one trajectory for `horizon` steps. Deterministic in
/// `(config, seed)`.
pub fn run(config: &RunConfig, problem: &dyn Problem, family: Option<&IsFamily>, seed: u64) -> Result<TrajectoryRecord> {
    if config.horizon == 0 {
        return Err(SolverError::Config("horizon must be at least 1".into()));
    }
    let mut engine = Engine::new(config.engine, problem, family, config.schedule)?;
    if let Some(k) = &config.gain {
        engine = engine.with_gain(k.clone())?;
    }
    let mut state = engine.init_state(&config.theta0, &config.mu0)?;
    if config.theta_center.is_some() || config.mu_center.is_some() {
        let tc = config.theta_center.clone().unwrap_or_else(|| state.theta_center.clone());
        let mc = match (&config.mu_center, engine.param_dim()) {
            (_, 0) => Vec::new(),
            (Some(c), _) => c.clone(),
            (None, _) => state.mu_center.clone(),
        };
        state = state.with_centers(tc, mc);
    }
    let mut thinning = config.thinning.clone();
    thinning.checkpoints.sort_unstable();
    thinning.checkpoints.dedup();

    let mu_set = if config.engine.is_joint() { family.map(|f| f.domain()) } else { None };
    let theta_set = problem.feasible_set();
    let mut streams = SampleStreams::from_seed(seed);
    let mut points = vec![snapshot(&state, theta_set, mu_set)];
    while state.n < config.horizon {
        engine.step(&mut state, &mut streams)?;
        if thinning.keeps(state.n, config.horizon) {
            points.push(snapshot(&state, theta_set, mu_set));
        }
    }
    Ok(TrajectoryRecord {
        engine: config.engine,
        seed,
        stride: thinning.stride,
        samples: state.samples,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::normal_quantile_problem;

    fn quantile() -> crate::problems::QuantileProblem {
        normal_quantile_problem(1e-4, Polytope::bounds(&[-10.0], &[10.0]).unwrap())
            .unwrap()
            .with_gradient_scale(1e4)
            .unwrap()
    }

    fn tilting(lo: f64, hi: f64) -> IsFamily {
        IsFamily::exponential_tilting(
            BaseDistribution::StandardNormal { dim: 1 },
            Polytope::bounds(&[lo], &[hi]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn schedule_validates_gamma() {
        assert!(StepSchedule::new(0.5, 1.0, 1.0).is_err());
        assert!(StepSchedule::new(1.0, 1.0, 1.0).is_err());
        assert!(StepSchedule::new(0.75, 0.0, 1.0).is_err());
        let s = StepSchedule::new(0.55, 0.05, 3e-6).unwrap();
        assert_eq!(s.theta_step(1), 0.05);
        assert_eq!(s.mu_step(1), 3e-6);
        assert!((s.theta_step(100) - 0.05 * 100f64.powf(-0.55)).abs() < 1e-18);
    }

    #[test]
    fn engine_names_round_trip() {
        for k in EngineKind::ALL {
            assert_eq!(k.as_str().parse::<EngineKind>().unwrap(), k);
        }
        assert!("sgd".parse::<EngineKind>().is_err());
    }

    #[test]
    fn secondary_needs_symmetric_tilting_family() {
        let p = quantile();
        let sched = StepSchedule::new(0.55, 0.05, 3e-6).unwrap();
        let lopsided = tilting(0.0, 1.7);
        assert!(Engine::new(EngineKind::JointNdaSecondary, &p, Some(&lopsided), sched).is_err());
        let sym = tilting(-1.7, 1.7);
        assert!(Engine::new(EngineKind::JointNdaSecondary, &p, Some(&sym), sched).is_ok());
        let mt = IsFamily::mean_translation(
            BaseDistribution::StandardNormal { dim: 1 },
            Polytope::bounds(&[-1.7], &[1.7]).unwrap(),
        )
        .unwrap();
        assert!(Engine::new(EngineKind::JointNdaSecondary, &p, Some(&mt), sched).is_err());
        assert!(Engine::new(EngineKind::JointNda, &p, None, sched).is_err());
    }

    #[test]
    fn init_state_rejects_infeasible_start() {
        let p = quantile();
        let fam = tilting(-1.7, 1.7);
        let sched = StepSchedule::new(0.55, 0.05, 3e-6).unwrap();
        let e = Engine::new(EngineKind::JointNda, &p, Some(&fam), sched).unwrap();
        assert!(e.init_state(&[11.0], &[0.0]).is_err());
        assert!(e.init_state(&[7.0], &[2.0]).is_err());
        assert!(e.init_state(&[7.0], &[0.2]).is_ok());
    }

    #[test]
    fn averages_match_direct_summation() {
        let p = quantile();
        let fam = tilting(-1.7, 1.7);
        let sched = StepSchedule::new(0.55, 0.05, 3e-6).unwrap();
        let mut e = Engine::new(EngineKind::JointNda, &p, Some(&fam), sched).unwrap();
        let mut st = e.init_state(&[7.0], &[0.2]).unwrap();
        let mut streams = SampleStreams::from_seed(5);
        let mut thetas = Vec::new();
        let mut mus = Vec::new();
        for _ in 0..10_000 {
            thetas.push(st.theta[0]);
            mus.push(st.mu[0]);
            e.step(&mut st, &mut streams).unwrap();
        }
        let direct_t = thetas.iter().sum::<f64>() / thetas.len() as f64;
        let direct_m = mus.iter().sum::<f64>() / mus.len() as f64;
        assert!((st.theta_bar()[0] - direct_t).abs() <= 1e-12);
        assert!((st.mu_bar()[0] - direct_m).abs() <= 1e-12);
        assert_eq!(st.samples, 20_000);
    }

    #[test]
    fn thinning_keeps_first_last_and_checkpoints() {
        let p = quantile();
        let sched = StepSchedule::new(0.55, 0.05, 3e-6).unwrap();
        let mut cfg = RunConfig::new(EngineKind::VanillaNda, sched, vec![7.0], vec![], 1005);
        cfg.thinning = Thinning {
            stride: 100,
            checkpoints: vec![37, 3],
        };
        let rec = run(&cfg, &p, None, 1).unwrap();
        let ns: Vec<usize> = rec.points.iter().map(|p| p.n).collect();
        assert_eq!(ns[..4], [0, 3, 37, 100]);
        assert_eq!(*ns.last().unwrap(), 1005);
        assert!(ns.windows(2).all(|w| w[0] < w[1]));
        assert!(rec.at(37).is_some() && rec.at(38).is_none());
    }

    #[test]
    fn zero_horizon_is_rejected() {
        let p = quantile();
        let sched = StepSchedule::new(0.55, 0.05, 3e-6).unwrap();
        let cfg = RunConfig::new(EngineKind::VanillaNda, sched, vec![7.0], vec![], 0);
        assert!(run(&cfg, &p, None, 1).is_err());
    }
}
