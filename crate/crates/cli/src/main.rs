mod ablate;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rcil_core::config::ExperimentConfig;
use rcil_core::trainer::{run_experiment, RunOptions, CURVES_CSV};
use rcil_core::verify::{run_suite, Faults};

use ablate::Axis;

#[derive(Parser)]
#[command(name = "rcil", version, about = "Continual semantic segmentation experiments on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every step of one experiment.
    Run(RunArgs),
    /// Sweep one ablation axis against a base configuration.
    Ablate(AblateArgs),
    /// Run the invariant suite and print a pass/fail table.
    Verify(VerifyArgs),
    /// Re-render tables and plots from the CSV files in a directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration; defaults apply to every key it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; falls back to RCIL_OUTDIR, then to the configured outdir.
    #[arg(long, env = "RCIL_OUTDIR")]
    outdir: Option<PathBuf>,
    /// Dotted key and TOML value, e.g. `optim.epochs=3`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long, short)]
    quiet: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p, &overrides)?,
            None => ExperimentConfig::from_toml_str("", &overrides)?,
        };
        let outdir = self.outdir.clone().unwrap_or_else(|| PathBuf::from(&cfg.outdir));
        Ok((cfg, outdir))
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Continue from a checkpoint written by an earlier run of the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Load a checkpoint even if its config hash differs.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_enum)]
    axis: Axis,
    /// List the rows and their overrides without training.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    /// Add 1e-3 to one merged weight.
    MergedWeight,
    /// Merge branches at (1, 1) instead of (0.5, 0.5).
    MergeFactor,
}

#[derive(Args)]
struct VerifyArgs {
    /// Break one code path to show the suite catches it.
    #[arg(long, value_enum)]
    inject: Option<Fault>,
}

#[derive(Args)]
struct ReportArgs {
    /// A run directory or a sweep directory.
    dir: PathBuf,
}

fn cmd_run(a: &RunArgs) -> Result<ExitCode> {
    let (cfg, outdir) = a.cfg.load()?;
    let opts = RunOptions {
        resume: a.resume.clone(),
        force: a.force,
        stop_after: None,
        progress: !a.cfg.quiet,
    };
    let s = run_experiment(&cfg, &outdir, &opts)?;
    println!("run {} in {}", s.run_id, s.run_dir.display());
    if cfg.output.plots {
        print!("{}", report::render_dir(&s.run_dir)?);
    } else {
        let curves: Vec<report::CurveRecord> = report::read_csv(&s.run_dir.join(CURVES_CSV))?;
        print!("{}", report::curves_table(&curves));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate(a: &AblateArgs) -> Result<ExitCode> {
    let (base, outdir) = a.cfg.load()?;
    if a.dry_run {
        for r in ablate::rows(a.axis, &base) {
            let cfg = ablate::row_config(&base, &r)?;
            println!("{}\t{}\t{}", r.label, cfg.run_id(), r.overrides.join(" "));
        }
        return Ok(ExitCode::SUCCESS);
    }
    let s = ablate::run_sweep(a.axis, &base, &outdir, !a.cfg.quiet)?;
    println!("sweep {} in {}", a.axis.name(), s.dir.display());
    println!("wrote {}", s.csv.display());
    print!("{}", s.table);
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(a: &VerifyArgs) -> Result<ExitCode> {
    let faults = match a.inject {
        None => Faults::default(),
        Some(Fault::MergedWeight) => Faults { merged_weight_delta: 1e-3, ..Faults::default() },
        Some(Fault::MergeFactor) => Faults { unit_merge_factor: true, ..Faults::default() },
    };
    let results = run_suite(faults)?;
    println!("{:<24} {:>6} {:>11} {:>10}  status  detail", "check", "cases", "worst", "tolerance");
    let mut failed = 0;
    for r in &results {
        if !r.passed {
            failed += 1;
        }
        println!(
            "{:<24} {:>6} {:>11.3e} {:>10.0e}  {:<6}  {}",
            r.name,
            r.cases,
            r.worst,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" },
            r.detail
        );
    }
    println!("{}/{} checks passed", results.len() - failed, results.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_report(a: &ReportArgs) -> Result<ExitCode> {
    let dir: &Path = &a.dir;
    print!("{}", report::render_dir(dir).with_context(|| format!("rendering {}", dir.display()))?);
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Report(a) => cmd_report(a),
    };
    match r {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
