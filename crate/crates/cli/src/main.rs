use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use adaptis::presets::{self, FULL_TRAJECTORIES};
use adaptis::{emit_plots, load_config, parse_config, run_experiment, workers_from_env, write_outputs, Overrides};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

/// Joint dual averaging with adaptive importance sampling: experiment runner.
#[derive(Parser)]
#[command(name = "adaptis", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML file or a preset name.
    Run {
        config: String,
        #[arg(long)]
        trajectories: Option<usize>,
        /// Use the full-scale trajectory count (1000).
        #[arg(long, conflicts_with = "trajectories")]
        full: bool,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip the SVG figures.
        #[arg(long)]
        no_plots: bool,
    },
    /// Redraw the figures of a finished run from its CSVs.
    Plot { summary_dir: PathBuf },
    /// Inspect the shipped presets.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    List,
    /// Print a preset's TOML.
    Show { name: String },
}

fn print_plot_report(dir: &Path) -> Result<()> {
    let report = emit_plots(dir)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for p in &report.written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            trajectories,
            full,
            horizon,
            seed,
            out,
            no_plots,
        } => {
            let path = Path::new(&config);
            let mut cfg = if path.exists() {
                load_config(path)?
            } else if let Some(p) = presets::find(&config) {
                parse_config(p.source)?
            } else {
                bail!("`{config}` is neither a file nor a preset (see `adaptis presets list`)");
            };
            cfg.apply(&Overrides {
                trajectories: if full { Some(FULL_TRAJECTORIES) } else { trajectories },
                horizon,
                seed,
                output: out.map(|p| p.display().to_string()),
            });
            let exp = cfg.validate()?;
            let dir = PathBuf::from(cfg.output.clone().unwrap_or_else(|| format!("out/{}", exp.name)));
            let workers = workers_from_env()?;
            let start = Instant::now();
            let outcome = run_experiment(&exp, workers)?;
            eprintln!(
                "{}: {} engines x {} trajectories x {} steps in {:.1?}",
                exp.name,
                exp.engines.len(),
                exp.trajectories,
                exp.horizon,
                start.elapsed()
            );
            for p in write_outputs(&outcome, &dir)? {
                println!("wrote {}", p.display());
            }
            if !no_plots {
                print_plot_report(&dir)?;
            }
        }
        Command::Plot { summary_dir } => print_plot_report(&summary_dir)?,
        Command::Presets { action } => match action {
            PresetAction::List => {
                for p in presets::PRESETS {
                    let cfg = parse_config(p.source).with_context(|| format!("preset {}", p.name))?;
                    println!("{:<26}{}", p.name, cfg.description.unwrap_or_default());
                }
            }
            PresetAction::Show { name } => match presets::find(&name) {
                Some(p) => print!("{}", p.source),
                None => bail!("no preset named `{name}`"),
            },
        },
    }
    Ok(())
}
