//! Fans trajectories out over a rayon pool and aggregates them per engine.

use adaptis_core::diagnostics::{active_set_hit_time, DiagnosticsError, ExperimentSummary, SummaryOptions, Track};
use adaptis_core::solver::{run, EngineKind, RunConfig, SolverError, Thinning, TrajectoryRecord};
use thiserror::Error;

use crate::config::Experiment;

/// Worker-count override read by [`workers_from_env`].
pub const WORKERS_ENV: &str = "ADAPTIS_WORKERS";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{engine} trajectory {traj} (seed {seed}) failed: {source}")]
    Trajectory {
        engine: EngineKind,
        traj: usize,
        seed: u64,
        source: SolverError,
    },
    #[error("summarising {engine}: {source}")]
    Summary {
        engine: EngineKind,
        source: DiagnosticsError,
    },
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("{WORKERS_ENV}=`{0}` is not a worker count")]
    BadWorkers(String),
}

/// `None` when unset, meaning one worker per core.
pub fn workers_from_env() -> Result<Option<usize>, RunError> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| RunError::BadWorkers(v)),
        Err(_) => Ok(None),
    }
}

/// Per-engine results; records are thinned to the CSV checkpoints.
pub struct EngineOutcome {
    pub engine: EngineKind,
    pub records: Vec<TrajectoryRecord>,
    pub summary: ExperimentSummary,
}

pub struct ExperimentOutcome {
    pub name: String,
    pub seed: u64,
    pub horizon: usize,
    pub trajectories: usize,
    pub burn_in: usize,
    pub checkpoints: Vec<usize>,
    pub theta_star: Option<Vec<f64>>,
    pub engines: Vec<EngineOutcome>,
}

impl ExperimentOutcome {
    pub fn engine(&self, kind: EngineKind) -> Option<&EngineOutcome> {
        self.engines.iter().find(|e| e.engine == kind)
    }
}

struct Trajectory {
    record: TrajectoryRecord,
    hit_time: Option<usize>,
}

fn run_one(exp: &Experiment, engine: EngineKind, traj: usize) -> Result<Trajectory, RunError> {
    let seed = exp.seed.wrapping_add(traj as u64);
    let mu0 = if engine.is_joint() { exp.mu0.clone() } else { Vec::new() };
    let mut cfg = RunConfig::new(engine, exp.schedule, exp.theta0.clone(), mu0, exp.horizon);
    let mut kept = exp.checkpoints.clone();
    kept.extend(exp.horizon - exp.dense_window..=exp.horizon);
    cfg.thinning = Thinning {
        stride: exp.stride,
        checkpoints: kept,
    };
    cfg.theta_center = exp.theta_center.clone();
    cfg.mu_center = exp.mu_center.clone().filter(|_| engine.is_joint());
    let mut record = run(&cfg, exp.problem.as_ref(), exp.family.as_ref(), seed).map_err(|source| RunError::Trajectory {
        engine,
        traj,
        seed,
        source,
    })?;
    let hit_time = match (&exp.family, &exp.mu_target_rows) {
        (Some(f), Some(rows)) if engine.is_joint() => active_set_hit_time(&record, Track::Mu, f.domain(), rows),
        _ => None,
    };
    record.points.retain(|p| exp.checkpoints.binary_search(&p.n).is_ok());
    Ok(Trajectory { record, hit_time })
}

/// Runs every engine of `exp` for all trajectories. Output is independent of
/// the worker count.
pub fn run_experiment(exp: &Experiment, workers: Option<usize>) -> Result<ExperimentOutcome, RunError> {
    use rayon::prelude::*;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| RunError::Pool(e.to_string()))?;
    let mut engines = Vec::with_capacity(exp.engines.len());
    for &engine in &exp.engines {
        let trajectories: Vec<Trajectory> = pool.install(|| {
            (0..exp.trajectories)
                .into_par_iter()
                .map(|i| run_one(exp, engine, i))
                .collect::<Result<_, _>>()
        })?;
        let (records, hits): (Vec<_>, Vec<_>) = trajectories.into_iter().map(|t| (t.record, t.hit_time)).unzip();
        let options = SummaryOptions {
            checkpoints: exp.checkpoints.clone(),
            burn_in: exp.burn_in,
            mu_target_rows: None,
        };
        let mu_domain = exp.family.as_ref().filter(|_| engine.is_joint()).map(|f| f.domain());
        let mut summary = ExperimentSummary::from_records(&records, exp.problem.as_ref(), mu_domain, &options)
            .map_err(|source| RunError::Summary { engine, source })?;
        if engine.is_joint() && exp.mu_target_rows.is_some() {
            summary.mu_hit_times = hits;
        }
        engines.push(EngineOutcome {
            engine,
            records,
            summary,
        });
    }
    Ok(ExperimentOutcome {
        name: exp.name.clone(),
        seed: exp.seed,
        horizon: exp.horizon,
        trajectories: exp.trajectories,
        burn_in: exp.burn_in,
        checkpoints: exp.checkpoints.clone(),
        theta_star: exp.problem.solution().map(<[f64]>::to_vec),
        engines,
    })
}
