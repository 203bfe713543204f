use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use edgeroute::harness::{self, report, RunConfig};
use edgeroute::ingest::{self, SynthSpec};
use edgeroute::model::{ClassTaxonomy, TaxonomySpec};
use edgeroute::risk;
use edgeroute::sweep::{self, SweepConfig};

/// Simulates lite/heavy encoder routing and reports energy, accuracy and
/// subgroup fairness.
#[derive(Debug, Parser)]
#[command(name = "edgeroute", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset (metadata, encoder CSVs, profiles, manifest).
    Synth {
        /// Synthetic dataset spec (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a risk model on a training metadata CSV.
    Calibrate {
        #[arg(long)]
        metadata: PathBuf,
        /// Taxonomy JSON: class_names, safe, danger, malignant.
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "subgroup")]
        subgroup_column: String,
    },
    /// Cross-validate the lite, heavy and routed arms.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a grid of routing thresholds and mark the Pareto frontier.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute mean/std rows from the per-fold rows of a run's report.csv.
    Report {
        /// Run output directory containing report.csv.
        #[arg(long)]
        dir: PathBuf,
        /// Where to write the rebuilt table; printed to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Writes a line to stdout. A closed pipe (e.g. `| head`) is not an error.
fn emit(line: impl std::fmt::Display) -> Result<()> {
    match writeln!(io::stdout().lock(), "{line}") {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn output_dir(flag: Option<PathBuf>, config: Option<&PathBuf>) -> Result<PathBuf> {
    match flag.or_else(|| config.cloned()) {
        Some(p) => Ok(p),
        None => bail!("no output directory: pass --out or set output_dir in the config"),
    }
}

fn synth(config: &Path, out: &Path) -> Result<()> {
    let spec: SynthSpec = ingest::read_json(config)?;
    let d = ingest::synth_generate(&spec)?;
    let manifest = ingest::write_dataset(&d, out)?;
    emit(format!("wrote {} samples; manifest {}", d.len(), manifest.display()))?;
    Ok(())
}

fn calibrate(metadata: &Path, taxonomy: &Path, out: &Path, subgroup_column: &str) -> Result<()> {
    let spec: TaxonomySpec = ingest::read_json(taxonomy)?;
    let t = ClassTaxonomy::from_spec(&spec)?;
    let samples = ingest::load_metadata(metadata, &t, subgroup_column)?;
    let m = risk::calibrate(&samples, &t)?;
    ingest::write_json(out, &m)?;
    emit(format!("risk model from {} samples written to {}", samples.len(), out.display()))?;
    Ok(())
}

fn run(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = RunConfig::from_file(config)?;
    let dir = output_dir(out, cfg.output_dir.as_ref())?;
    let (cv, folds, rep) = harness::run_cv(&cfg)?;
    harness::write_run(&dir, &cv, &folds, &rep)?;
    let e = &rep.energy;
    emit(format!(
        "{} folds, {} samples: routed {:.2}%, {:.4} J/sample, savings vs heavy {:.2}% (break-even {:.2}%)",
        folds.len(),
        rep.n_samples,
        100.0 * e.routing_pct.mean,
        e.e_ecofair.mean,
        100.0 * e.savings_vs_heavy.mean,
        100.0 * rep.breakeven_rate
    ))?;
    if let Some(d) = &rep.delta_vs_lite {
        emit(format!("worst-group TPR vs lite: {:+.4}; TPR gap reduction: {:+.4}", d.d_wg_tpr.mean, d.d_gap.mean))?;
    }
    emit(format!("outputs in {}", dir.display()))?;
    Ok(())
}

fn run_sweep(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = SweepConfig::from_file(config)?;
    let dir = output_dir(out, cfg.run.output_dir.as_ref())?;
    let res = sweep::run_sweep(&cfg)?;
    sweep::write_sweep(&dir, &res)?;
    emit(format!(
        "{} operating points, {} on the frontier; outputs in {}",
        res.points.len(),
        res.frontier.len(),
        dir.display()
    ))?;
    Ok(())
}

fn reaggregate(dir: &Path, out: Option<PathBuf>) -> Result<()> {
    let rows = report::reaggregate(&dir.join("report.csv"))?;
    match out {
        Some(path) => report::write_report_table(&path, &rows)?,
        None => {
            emit(report::REPORT_COLUMNS.join(","))?;
            for r in rows {
                emit(r.join(","))?;
            }
        }
    }
    Ok(())
}

/// The error chain joined with `: `, skipping causes whose text the previous
/// message already includes.
fn describe(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if parts.last().is_none_or(|prev| !prev.contains(&msg)) {
            parts.push(msg);
        }
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { config, out } => synth(&config, &out).with_context(|| format!("synth {}", config.display())),
        Command::Calibrate { metadata, taxonomy, out, subgroup_column } => {
            calibrate(&metadata, &taxonomy, &out, &subgroup_column)
        }
        Command::Run { config, out } => run(&config, out).with_context(|| format!("run {}", config.display())),
        Command::Sweep { config, out } => {
            run_sweep(&config, out).with_context(|| format!("sweep {}", config.display()))
        }
        Command::Report { dir, out } => reaggregate(&dir, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}
