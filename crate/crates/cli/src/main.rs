//! `cme`: twin generation, model-version selection experiments, sweeps and
//! report aggregation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cme_core::experiment::report::{self, SummaryRow};
use cme_core::experiment::{
    build_twin, run_radius_sweep, run_selection_on_twin, run_window_sweep, write_radius_sweep,
    write_selection_outputs, write_window_sweep, ExperimentConfig, FULL_ASSESSMENT_CYCLES,
};
use cme_core::twin::TwinRun;
use cme_core::Error;

#[derive(Debug, Parser)]
#[command(
    name = "cme",
    version,
    about = "Model-version selection with contextual model evidence on Lorenz-95"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the truth trajectory and synthetic observations.
    TruthGen(RunArgs),
    /// Run the correct and incorrect model versions and score every indicator.
    Select {
        #[command(flatten)]
        run: RunArgs,
        /// Reuse an observation archive written by `truth-gen`.
        #[arg(long, value_name = "DIR")]
        twin: Option<PathBuf>,
    },
    /// Repeat the selection experiment over the configured localization radii.
    SweepRadius(RunArgs),
    /// Repeat the selection experiment over the configured window lengths.
    SweepWindow(RunArgs),
    /// Aggregate every summary.csv below a directory into comparison tables.
    Report {
        /// Directory searched recursively for summary.csv files.
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        /// Where the tables are written (defaults to the input directory).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON experiment config; keys left out keep their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Long assessment period (5e4 cycles).
    #[arg(long)]
    full: bool,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Also write per-gridpoint local CME columns (localized runs).
    #[arg(long)]
    emit_local_cme: bool,
}

enum Defaults {
    Global,
    Localized,
    LocalizedWindows,
}

impl RunArgs {
    fn config(&self, defaults: Defaults) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => match defaults {
                Defaults::Global => ExperimentConfig::default(),
                Defaults::Localized => ExperimentConfig::localized_default(),
                Defaults::LocalizedWindows => ExperimentConfig {
                    windows: vec![1, 2, 4],
                    ..ExperimentConfig::localized_default()
                },
            },
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.full {
            cfg.assessment_cycles = FULL_ASSESSMENT_CYCLES;
        }
        if self.emit_local_cme {
            cfg.emit_local_cme = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn prepare(&self) -> Result<(), Error> {
        if let Some(n) = self.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(format!("cannot start {n} worker threads: {e}")))?;
        }
        std::fs::create_dir_all(&self.out)?;
        Ok(())
    }
}

fn save_config(cfg: &ExperimentConfig, dir: &Path) -> Result<(), Error> {
    std::fs::write(dir.join("config.json"), cfg.to_json() + "\n")?;
    Ok(())
}

fn print_summary(path: &Path) -> Result<(), Error> {
    let rows = report::read_summary(path)?;
    for r in rows {
        println!(
            "F0={} {:<5} K={} selection_probability={:.3} gini={:.3}",
            r.incorrect_forcing, r.indicator, r.window, r.selection_probability, r.gini
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::TruthGen(args) => {
            let cfg = args.config(Defaults::Global)?;
            args.prepare()?;
            let twin = build_twin(&cfg)?;
            for path in twin.save(&args.out)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Select { run, twin } => {
            let cfg = run.config(Defaults::Global)?;
            run.prepare()?;
            let twin = match twin {
                Some(dir) => load_matching_twin(&dir, &cfg)?,
                None => build_twin(&cfg)?,
            };
            let exp = run_selection_on_twin(&cfg, twin)?;
            save_config(&cfg, &run.out)?;
            write_selection_outputs(&exp, &run.out)?;
            print_summary(&run.out.join(report::SUMMARY_FILE))?;
        }
        Command::SweepRadius(args) => {
            let cfg = args.config(Defaults::Localized)?;
            args.prepare()?;
            let rows = run_radius_sweep(&cfg)?;
            save_config(&cfg, &args.out)?;
            let path = write_radius_sweep(&rows, &args.out)?;
            for row in &rows {
                for (ind, p, g) in &row.scores {
                    println!(
                        "rho_loc={} {:<5} selection_probability={p:.3} gini={g:.3}",
                        row.loc_radius, ind
                    );
                }
            }
            println!("wrote {}", path.display());
        }
        Command::SweepWindow(args) => {
            let cfg = args.config(Defaults::LocalizedWindows)?;
            args.prepare()?;
            let exp = run_window_sweep(&cfg)?;
            save_config(&exp.config, &args.out)?;
            let path = write_window_sweep(&exp, &args.out)?;
            print_summary(&args.out.join(report::SUMMARY_FILE))?;
            println!("wrote {}", path.display());
        }
        Command::Report { input, out } => {
            let out = out.unwrap_or_else(|| input.clone());
            let mut rows: Vec<SummaryRow> = Vec::new();
            let files = report::find_summaries(&input)?;
            if files.is_empty() {
                return Err(Error::Format(format!(
                    "no {} below {}",
                    report::SUMMARY_FILE,
                    input.display()
                )));
            }
            for f in &files {
                rows.extend(report::read_summary(f)?);
            }
            let (selection, gini) = report::render_tables(&rows);
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("report_selection.csv"), &selection)?;
            std::fs::write(out.join("report_gini.csv"), &gini)?;
            println!("Probability of selection\n{selection}\nGini coefficient\n{gini}");
        }
    }
    Ok(())
}

/// Loads an archive and checks it was generated with this config's twin settings.
fn load_matching_twin(dir: &Path, cfg: &ExperimentConfig) -> Result<TwinRun, Error> {
    let twin = TwinRun::load(dir)?;
    let meta = twin.metadata();
    if meta.forcing != cfg.correct_forcing || meta.grid_size != cfg.grid_size || meta.dt != cfg.dt {
        return Err(Error::Config(format!(
            "archive {} was generated with F={}, M={}, dt={}, which does not match the config",
            dir.display(),
            meta.forcing,
            meta.grid_size,
            meta.dt
        )));
    }
    Ok(twin)
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::FilterDivergence { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
