//! Static SVG figures rebuilt from `summary.csv` and `variance.csv`.
//!
//! Three figures: the decision iterate band per engine (`theta.svg`), the IS
//! parameter band for the joint engines (`mu.svg`) and the scaled-error
//! variance after the burn-in (`variance.svg`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;

use crate::output::{SUMMARY_CSV, VARIANCE_CSV};

#[derive(Debug, Deserialize)]
struct BandRow {
    engine: String,
    series: String,
    index: usize,
    n: usize,
    mean: f64,
    q10: f64,
    q90: f64,
}

#[derive(Debug, Deserialize)]
struct VarianceRow {
    engine: String,
    n: usize,
    scaled_variance_trace: Option<f64>,
    #[allow(dead_code)]
    residual_second_moment: Option<f64>,
}

#[derive(Debug, Default)]
pub struct PlotReport {
    pub written: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const W: f64 = 720.0;
const H: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

/// `(x, mean, lo, hi)`.
type BandPoint = (f64, f64, f64, f64);

struct Series {
    label: String,
    points: Vec<BandPoint>,
}

struct Chart<'a> {
    title: &'a str,
    x_label: &'a str,
    y_label: &'a str,
    log_y: bool,
    series: Vec<Series>,
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>, log: bool) -> Axis {
        let (mut lo, mut hi) = values
            .map(|v| if log { v.log10() } else { v })
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            let pad = if lo == 0.0 { 1.0 } else { 0.05 * lo.abs() };
            (lo, hi) = (lo - pad, hi + pad);
        } else if !log {
            let pad = 0.05 * (hi - lo);
            (lo, hi) = (lo - pad, hi + pad);
        }
        if log {
            (lo, hi) = (lo.floor(), hi.ceil());
        }
        Axis { lo, hi, log }
    }

    fn frac(&self, v: f64) -> f64 {
        let v = if self.log { v.log10() } else { v };
        (v - self.lo) / (self.hi - self.lo)
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            let (a, b) = (self.lo as i32, self.hi as i32);
            let step = ((b - a) / 6).max(1);
            return (a..=b).step_by(step as usize).map(|e| (10f64.powi(e), format!("1e{e}"))).collect();
        }
        let raw = (self.hi - self.lo) / 5.0;
        let mag = 10f64.powf(raw.log10().floor());
        let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
        let mut t = (self.lo / step).ceil() * step;
        let mut out = Vec::new();
        while t <= self.hi + 1e-9 * step {
            let t0 = if t.abs() < 1e-12 * step { 0.0 } else { t };
            out.push((t0, format!("{}", (t0 / step).round() * step)));
            t += step;
        }
        out
    }
}

fn render(chart: &Chart) -> String {
    let xs = Axis::new(chart.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)), true);
    let ys = Axis::new(
        chart.series.iter().flat_map(|s| s.points.iter().flat_map(|p| [p.1, p.2, p.3])),
        chart.log_y,
    );
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let px = |x: f64| LEFT + xs.frac(x) * pw;
    let py = |y: f64| TOP + (1.0 - ys.frac(y)) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, LEFT + pw / 2.0, chart.title);
    for (v, label) in xs.ticks() {
        let x = px(v);
        let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#e0e0e0"/>"##, TOP + ph);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{label}</text>"#, TOP + ph + 18.0);
    }
    for (v, label) in ys.ticks() {
        let y = py(v);
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e0e0e0"/>"##, LEFT + pw);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"#, LEFT - 6.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 15.0, chart.x_label);
    let _ = writeln!(
        s,
        r#"<text x="20" y="{:.2}" text-anchor="middle" transform="rotate(-90 20 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        chart.y_label
    );

    for (k, series) in chart.series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts = &series.points;
        if pts.iter().any(|p| p.2 != p.1 || p.3 != p.1) {
            let mut poly = String::new();
            for p in pts {
                let _ = write!(poly, "{:.2},{:.2} ", px(p.0), py(p.3));
            }
            for p in pts.iter().rev() {
                let _ = write!(poly, "{:.2},{:.2} ", px(p.0), py(p.2));
            }
            let _ = writeln!(s, r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, poly.trim_end());
        }
        let line: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", px(p.0), py(p.1))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.6"/>"#, line.join(" "));
        let ly = TOP + 14.0 + 20.0 * k as f64;
        let lx = LEFT + pw + 14.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#, lx + 22.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 28.0, ly + 4.0, series.label);
    }
    s.push_str("</svg>\n");
    s
}

fn band_series(rows: &[BandRow], series: &str) -> Vec<Series> {
    let mut grouped: BTreeMap<(String, usize), Vec<BandPoint>> = BTreeMap::new();
    let multi = rows.iter().any(|r| r.series == series && r.index > 0);
    for r in rows.iter().filter(|r| r.series == series && r.n > 0) {
        grouped
            .entry((r.engine.clone(), r.index))
            .or_default()
            .push((r.n as f64, r.mean, r.q10, r.q90));
    }
    grouped
        .into_iter()
        .map(|((engine, i), mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            let label = if multi { format!("{engine} [{i}]") } else { engine };
            Series { label, points }
        })
        .collect()
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize().collect::<Result<_, _>>().with_context(|| format!("reading {}", path.display()))
}

/// Writes the figures into `dir`, which must hold the summary CSVs. Figures
/// with nothing to show are skipped with a warning.
pub fn emit_plots(dir: &Path) -> anyhow::Result<PlotReport> {
    let bands: Vec<BandRow> = read_rows(&dir.join(SUMMARY_CSV))?;
    let variance: Vec<VarianceRow> = read_rows(&dir.join(VARIANCE_CSV))?;
    let mut report = PlotReport::default();
    if bands.is_empty() {
        report.warnings.push("no checkpoints recorded; nothing to plot".into());
        return Ok(report);
    }

    let mut var_series: BTreeMap<String, Vec<BandPoint>> = BTreeMap::new();
    for r in &variance {
        if let Some(v) = r.scaled_variance_trace.filter(|v| *v > 0.0) {
            var_series.entry(r.engine.clone()).or_default().push((r.n as f64, v, v, v));
        }
    }
    let figures = [
        (
            "theta.svg",
            Chart {
                title: "Decision iterate: mean and 10%-90% band",
                x_label: "iteration n",
                y_label: "theta_n",
                log_y: false,
                series: band_series(&bands, "theta"),
            },
        ),
        (
            "mu.svg",
            Chart {
                title: "IS parameter: mean and 10%-90% band",
                x_label: "iteration n",
                y_label: "mu_n",
                log_y: false,
                series: band_series(&bands, "mu"),
            },
        ),
        (
            "variance.svg",
            Chart {
                title: "Scaled error variance after burn-in",
                x_label: "iteration n",
                y_label: "trace Var[sqrt(n-b)(theta_bar - theta*)]",
                log_y: true,
                series: var_series
                    .into_iter()
                    .map(|(label, points)| Series { label, points })
                    .collect(),
            },
        ),
    ];
    for (file, chart) in figures {
        if chart.series.is_empty() {
            report.warnings.push(format!("{file}: no data, skipped"));
            continue;
        }
        let path = dir.join(file);
        fs::write(&path, render(&chart)).with_context(|| format!("writing {}", path.display()))?;
        report.written.push(path);
    }
    Ok(report)
}
