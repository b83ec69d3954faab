use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use balance_lab::harness::config::{ExperimentConfig, ExperimentKind};
use balance_lab::harness::experiments::{
    collect_report, fixed_stats_suite, report_plot, report_table, run_training, sweep, theory_suite, FixedCondition, Setup,
};
use balance_lab::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Class-balancing GAN experiments on synthetic long-tailed data.
#[derive(Parser, Debug)]
#[command(name = "balance-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root.
    #[arg(long, env = "BALANCE_LAB_OUT", default_value = "runs")]
    out: PathBuf,
    /// Worker threads (0 uses every core).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train with the class-balancing regularizer, one run per seed.
    Train(Common),
    /// Train with the regularizer switched off (lambda = 0).
    Baseline(Common),
    /// Hold the class statistics fixed and track the class-0 fraction.
    FixedStats(Common),
    /// Randomized check of the closed-form optimum and its bound.
    VerifyTheory {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        k_min: Option<usize>,
        #[arg(long)]
        k_max: Option<usize>,
        /// Tolerance for the bound and the optimal-value checks.
        #[arg(long)]
        tol: Option<f64>,
        /// Tolerance for the distance to the iterative minimizer.
        #[arg(long)]
        oracle_tol: Option<f64>,
    },
    /// One regularized run per sweep value and seed.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Defaults to the config's kind.
        #[arg(long, value_enum)]
        kind: Option<SweepKind>,
    },
    /// Rank every run directory under --out by final KL to uniform.
    Report {
        #[arg(long, env = "BALANCE_LAB_OUT", default_value = "runs")]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SweepKind {
    ClassifierQuality,
    Beta,
    CycleLength,
}

impl From<SweepKind> for ExperimentKind {
    fn from(k: SweepKind) -> Self {
        match k {
            SweepKind::ClassifierQuality => ExperimentKind::ClassifierSweep,
            SweepKind::Beta => ExperimentKind::BetaAblation,
            SweepKind::CycleLength => ExperimentKind::CycleLengthSweep,
        }
    }
}

fn sweep_dir_name(kind: ExperimentKind) -> &'static str {
    match kind {
        ExperimentKind::ClassifierSweep => "classifier-quality",
        ExperimentKind::BetaAblation => "beta",
        _ => kind.name(),
    }
}

enum Failure {
    Invalid(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFiniteLoss { .. } | Error::Diverged { .. } | Error::NoConvergence { .. } => Failure::Check(e.to_string()),
            other => Failure::Invalid(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Invalid(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn load_config(common: &Common, kind: ExperimentKind) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
            ExperimentConfig::from_text(&text)?
        }
        None => ExperimentConfig::new(kind),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(common: &Common, baseline: bool) -> Outcome {
    let kind = if baseline { ExperimentKind::Baseline } else { ExperimentKind::Train };
    let mut cfg = load_config(common, kind)?;
    if baseline {
        cfg.kind = ExperimentKind::Baseline;
        cfg.trainer.lambda = 0.0;
    }
    let setup = Setup::prepare(&cfg)?;
    let prefix = if cfg.trainer.lambda == 0.0 { "baseline" } else { "train" };
    for &seed in &cfg.seeds {
        let dir = common.out.join(format!("{prefix}-seed{seed}"));
        let r = run_training(&cfg, &setup, seed, cfg.trainer.lambda, Some(&dir))?;
        println!(
            "{}: kl_uniform={:.4} frechet={:.4} ({:.1}s) -> {}",
            r.label,
            r.kl_uniform(),
            r.frechet(),
            r.elapsed.as_secs_f64(),
            dir.display()
        );
    }
    Ok(())
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())
}

fn cmd_fixed_stats(common: &Common) -> Outcome {
    let cfg = load_config(common, ExperimentKind::FixedStats)?;
    let setup = Setup::prepare(&cfg)?;
    let report = fixed_stats_suite(&cfg, &setup, common.jobs)?;
    let dir = common.out.join("fixed-stats");
    write_config(&dir, &cfg)?;
    report.table().save(&dir.join("fixed_stats.csv"))?;
    report.trajectory_table().save(&dir.join("fixed_stats_trajectories.csv"))?;
    fs::write(dir.join("fixed_stats.svg"), report.plot().render(&format!("config-hash: {}", cfg.hash())))?;
    let mut failed = Vec::new();
    for c in [FixedCondition::Large, FixedCondition::Small, FixedCondition::Uniform] {
        let ok = report.condition_holds(c);
        println!("{}: {}", c.name(), if ok { "ok" } else { "FAILED" });
        if !ok {
            failed.push(c.name());
        }
    }
    println!("noise band: {:.4} -> {}", report.band, dir.display());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("fixed-statistics direction failed for: {}", failed.join(", "))))
    }
}

fn cmd_verify_theory(
    common: &Common,
    trials: Option<usize>,
    k_min: Option<usize>,
    k_max: Option<usize>,
    tol: Option<f64>,
    oracle_tol: Option<f64>,
) -> Outcome {
    let mut cfg = load_config(common, ExperimentKind::Theory)?;
    let set = |cfg: &mut ExperimentConfig, key: &str, v: String| cfg.set(key, &v);
    if let Some(v) = trials {
        set(&mut cfg, "trials", v.to_string())?;
    }
    if let Some(v) = k_min {
        set(&mut cfg, "k_min", v.to_string())?;
    }
    if let Some(v) = k_max {
        set(&mut cfg, "k_max", v.to_string())?;
    }
    if let Some(v) = tol {
        set(&mut cfg, "tol_bound", v.to_string())?;
        set(&mut cfg, "tol_value", v.to_string())?;
    }
    if let Some(v) = oracle_tol {
        set(&mut cfg, "tol_oracle", v.to_string())?;
    }
    cfg.validate()?;
    let report = theory_suite(&cfg.theory, cfg.seeds[0], common.jobs)?;
    let dir = common.out.join("theory");
    write_config(&dir, &cfg)?;
    report.table().save(&dir.join("theory.csv"))?;
    report.tightness_table().save(&dir.join("theory_tightness.csv"))?;
    println!(
        "{} trials in {:.2}s: max bound violation {:.3e}, max value residual {:.3e}, max oracle distance {:.3e}, max uniform gap {:.3e} -> {}",
        report.trials.len(),
        report.elapsed.as_secs_f64(),
        report.max_bound_violation(),
        report.max_value_residual(),
        report.max_oracle_linf(),
        report.max_tightness_gap(),
        dir.display()
    );
    let failures = report.failures();
    for f in failures.iter().take(10) {
        eprintln!("trial {} (K={}): {}", f.trial, f.report.classes, f.report.failures.join("; "));
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check(format!("{} of {} trials violated a check", failures.len(), report.trials.len())))
    }
}

fn cmd_sweep(common: &Common, kind: Option<SweepKind>) -> Outcome {
    let default_kind = kind.map_or(ExperimentKind::ClassifierSweep, ExperimentKind::from);
    let cfg = load_config(common, default_kind)?;
    let kind = match kind {
        Some(k) => k.into(),
        None if cfg.kind.is_sweep() => cfg.kind,
        None => {
            return Err(Failure::Invalid(Error::config(
                "kind",
                format!("`{}` is not a sweep; pass --kind", cfg.kind.name()),
            )))
        }
    };
    let setup = Setup::prepare(&cfg)?;
    let report = sweep(kind, &cfg, &setup, common.jobs)?;
    let dir = common.out.join(format!("sweep-{}", sweep_dir_name(kind)));
    write_config(&dir, &cfg)?;
    report.table().save(&dir.join("sweep.csv"))?;
    fs::write(dir.join("sweep.svg"), report.plot().render(&format!("config-hash: {}", cfg.hash())))?;
    for r in &report.rows {
        let status = if r.ok() { String::new() } else { format!(" error: {}", r.error) };
        let warn = if r.divergence_warning { " [tail accuracy 0]" } else { "" };
        println!(
            "{} seed {}: tail_accuracy={:.3} kl_uniform={:.4} frechet={:.4}{warn}{status}",
            r.value, r.seed, r.tail_accuracy, r.kl_uniform, r.frechet
        );
    }
    println!("-> {}", dir.display());
    let violations = report.violations();
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("{} sweep runs missed the KL threshold {}", violations.len(), report.kl_threshold)))
    }
}

fn cmd_report(out: &Path) -> Outcome {
    let rows = collect_report(out)?;
    if rows.is_empty() {
        return Err(Failure::Invalid(Error::config("out", format!("no run directories under {}", out.display()))));
    }
    let table = report_table(&rows);
    table.save(&out.join("report.csv"))?;
    fs::write(out.join("report.svg"), report_plot(&rows).render(&format!("runs: {}", rows.len())))?;
    print!("{}", table.to_string()?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(c) => cmd_train(c, false),
        Command::Baseline(c) => cmd_train(c, true),
        Command::FixedStats(c) => cmd_fixed_stats(c),
        Command::VerifyTheory {
            common,
            trials,
            k_min,
            k_max,
            tol,
            oracle_tol,
        } => cmd_verify_theory(common, *trials, *k_min, *k_max, *tol, *oracle_tol),
        Command::Sweep { common, kind } => cmd_sweep(common, *kind),
        Command::Report { out } => cmd_report(out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(2)
        }
    }
}
