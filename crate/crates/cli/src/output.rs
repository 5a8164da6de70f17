//! CSV and JSON writers.
//!
//! Per engine, `trajectories_<engine>.csv` has one row per trajectory and
//! checkpoint:
//!
//! ```text
//! traj,seed,n,theta_<i>...,mu_<j>...,theta_bar_<i>...,mu_bar_<j>...,active_theta_rows,active_mu_rows
//! ```
//!
//! Active rows are `;`-separated indices. Floats use Rust's `Display`, the
//! shortest decimal that round-trips. `summary.csv` holds the mean and
//! 10%/90% quantiles of every coordinate (`engine,series,index,n,mean,q10,q90`),
//! `variance.csv` the trace of the scaled-error covariance and the residual
//! second moment (`engine,n,scaled_variance_trace,residual_second_moment`),
//! and `summary.json` the headline metrics.

use std::fs;
use std::path::{Path, PathBuf};

use adaptis_core::diagnostics::{Band, ExperimentSummary};
use adaptis_core::solver::{EngineKind, TrajectoryRecord};
use serde_json::{json, Value};

use crate::runner::ExperimentOutcome;

pub const SUMMARY_CSV: &str = "summary.csv";
pub const VARIANCE_CSV: &str = "variance.csv";
pub const SUMMARY_JSON: &str = "summary.json";

pub fn trajectory_file(engine: EngineKind) -> String {
    format!("trajectories_{engine}.csv")
}

fn join_rows(rows: &[usize]) -> String {
    rows.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

/// Writes the trajectory CSV for one engine; records are in trajectory order.
pub fn write_trajectories<W: std::io::Write>(records: &[TrajectoryRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let s = records.first().map_or(0, |r| r.points.first().map_or(0, |p| p.theta.len()));
    let m = records.first().map_or(0, |r| r.points.first().map_or(0, |p| p.mu.len()));
    let mut header = vec!["traj".to_string(), "seed".into(), "n".into()];
    header.extend((0..s).map(|i| format!("theta_{i}")));
    header.extend((0..m).map(|j| format!("mu_{j}")));
    header.extend((0..s).map(|i| format!("theta_bar_{i}")));
    header.extend((0..m).map(|j| format!("mu_bar_{j}")));
    header.extend(["active_theta_rows".into(), "active_mu_rows".into()]);
    w.write_record(&header)?;
    for (traj, rec) in records.iter().enumerate() {
        for p in &rec.points {
            let mut row = vec![traj.to_string(), rec.seed.to_string(), p.n.to_string()];
            row.extend(p.theta.iter().chain(&p.mu).chain(&p.theta_bar).chain(&p.mu_bar).map(f64::to_string));
            row.push(join_rows(&p.active_theta));
            row.push(join_rows(&p.active_mu));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_bands<W: std::io::Write>(w: &mut csv::Writer<W>, engine: EngineKind, series: &str, bands: &[Vec<Band>]) -> csv::Result<()> {
    for (i, col) in bands.iter().enumerate() {
        for b in col {
            w.write_record([
                engine.to_string(),
                series.to_string(),
                i.to_string(),
                b.n.to_string(),
                b.mean.to_string(),
                b.q10.to_string(),
                b.q90.to_string(),
            ])?;
        }
    }
    Ok(())
}

pub fn write_summary_csv<W: std::io::Write>(summaries: &[&ExperimentSummary], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["engine", "series", "index", "n", "mean", "q10", "q90"])?;
    for s in summaries {
        write_bands(&mut w, s.engine, "theta", &s.theta_bands)?;
        write_bands(&mut w, s.engine, "theta_bar", &s.theta_bar_bands)?;
        write_bands(&mut w, s.engine, "mu", &s.mu_bands)?;
        write_bands(&mut w, s.engine, "mu_bar", &s.mu_bar_bands)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_variance_csv<W: std::io::Write>(summaries: &[&ExperimentSummary], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["engine", "n", "scaled_variance_trace", "residual_second_moment"])?;
    for s in summaries {
        for (k, &n) in s.checkpoints.iter().enumerate() {
            w.write_record([
                s.engine.to_string(),
                n.to_string(),
                opt(s.scaled_variance[k].as_ref().map(|v| v.trace())),
                opt(s.residual_second_moment[k]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn band_json(b: &Band) -> Value {
    json!({ "n": b.n, "mean": b.mean, "q10": b.q10, "q90": b.q90, "width": b.width() })
}

fn last_bands(bands: &[Vec<Band>]) -> Vec<Value> {
    bands.iter().filter_map(|col| col.last()).map(band_json).collect()
}

fn engine_json(s: &ExperimentSummary, records: &[TrajectoryRecord], horizon: usize) -> Value {
    let k = s.checkpoints.len() - 1;
    let variance = s.scaled_variance[k]
        .as_ref()
        .map(|v| v.row_iter().map(|r| r.iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>());
    let samples = records.iter().map(|r| r.samples).sum::<u64>() as f64 / records.len() as f64;
    let mut v = json!({
        "trajectories": s.trajectories,
        "samples_per_trajectory": samples,
        "theta": last_bands(&s.theta_bands),
        "theta_bar": last_bands(&s.theta_bar_bands),
        "mu": last_bands(&s.mu_bands),
        "mu_bar": last_bands(&s.mu_bar_bands),
        "scaled_variance": variance,
        "residual_second_moment": s.residual_second_moment[k],
    });
    if !s.mu_hit_times.is_empty() {
        v["identified_fraction_half_horizon"] = json!(s.identified_fraction(horizon / 2));
        v["identified_fraction_horizon"] = json!(s.identified_fraction(horizon));
        v["median_hit_time"] = json!(s.median_hit_time());
        v["hit_times"] = json!(s.mu_hit_times);
    }
    v
}

fn final_variance(o: &ExperimentOutcome, kind: EngineKind) -> Option<f64> {
    o.engine(kind)?.summary.scaled_variance.last()?.as_ref().map(|v| v.trace())
}

fn final_theta_width(o: &ExperimentOutcome, kind: EngineKind) -> Option<f64> {
    let bands = &o.engine(kind)?.summary.theta_bands;
    Some(bands.iter().filter_map(|c| c.last()).map(Band::width).fold(0.0, f64::max))
}

/// Headline metrics plus per-engine final-checkpoint aggregates.
pub fn summary_json(o: &ExperimentOutcome) -> Value {
    let mut engines = serde_json::Map::new();
    for e in &o.engines {
        engines.insert(e.engine.to_string(), engine_json(&e.summary, &e.records, o.horizon));
    }
    let ratio = |a, b| match (a, b) {
        (Some(x), Some(y)) if y > 0.0 => Some(x / y),
        _ => None,
    };
    let joint = EngineKind::JointNda;
    json!({
        "name": o.name,
        "seed": o.seed,
        "horizon": o.horizon,
        "trajectories": o.trajectories,
        "burn_in": o.burn_in,
        "theta_star": o.theta_star,
        "checkpoints": o.checkpoints,
        "metrics": {
            "variance_ratio_joint_vs_projected_sgd":
                ratio(final_variance(o, joint), final_variance(o, EngineKind::ProjectedSgd)),
            "band_width_ratio_vanilla_vs_joint":
                ratio(final_theta_width(o, EngineKind::VanillaNda), final_theta_width(o, joint)),
            "band_width_ratio_projected_sgd_vs_joint":
                ratio(final_theta_width(o, EngineKind::ProjectedSgd), final_theta_width(o, joint)),
        },
        "engines": engines,
    })
}

/// Writes every CSV plus `summary.json` into `dir` and returns the paths.
pub fn write_outputs(o: &ExperimentOutcome, dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    use anyhow::Context;

    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    let mut create = |name: &str| -> anyhow::Result<(fs::File, PathBuf)> {
        let path = dir.join(name);
        let f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        written.push(path.clone());
        Ok((f, path))
    };
    for e in &o.engines {
        let (f, path) = create(&trajectory_file(e.engine))?;
        write_trajectories(&e.records, std::io::BufWriter::new(f)).with_context(|| format!("writing {}", path.display()))?;
    }
    let summaries: Vec<&ExperimentSummary> = o.engines.iter().map(|e| &e.summary).collect();
    let (f, path) = create(SUMMARY_CSV)?;
    write_summary_csv(&summaries, std::io::BufWriter::new(f)).with_context(|| format!("writing {}", path.display()))?;
    let (f, path) = create(VARIANCE_CSV)?;
    write_variance_csv(&summaries, std::io::BufWriter::new(f)).with_context(|| format!("writing {}", path.display()))?;
    let (f, path) = create(SUMMARY_JSON)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &summary_json(o)).with_context(|| format!("writing {}", path.display()))?;
    Ok(written)
}
