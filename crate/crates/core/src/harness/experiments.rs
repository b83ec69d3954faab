//! Experiment drivers shared by the command line and the acceptance suite.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{ExperimentConfig, ExperimentKind, TheoryConfig};
use super::svg::{LinePlot, Series};
use super::table::{fmt_f64, metrics_table, Table};
use crate::data::{make_balanced_test, make_longtail, LabeledDataset, LongTailSpec};
use crate::error::{Error, Result};
use crate::metrics::{classifier_accuracy_score, CasBudget, Evaluator, MetricsRecord};
use crate::theory::{random_simplex, uniform_tightness_gap, verify_propositions, PropositionReport, VerifyOptions};
use crate::trainer::{export_checkpoint, fixed_stats_experiment, pretrain_classifier, train, ClassifierConfig, CycleRecord, PretrainedClassifier};

/// Allowed gap between the uniform stationary point and the bound.
pub const TIGHTNESS_TOL: f64 = 1e-10;

/// Offset between the training-data seed and the balanced annotator's data seed.
const ANNOTATOR_SEED_OFFSET: u64 = 1000;

/// Runs `f` on a pool of `jobs` threads (`0` means all cores).
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::param("jobs", e.to_string()))?;
    Ok(pool.install(f))
}

/// Datasets and classifiers shared by every run of an experiment.
#[derive(Clone, Debug)]
pub struct Setup {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// In-loop classifier, trained on data with imbalance `clf_rho`.
    pub classifier: PretrainedClassifier,
    /// Balanced annotator used for evaluation.
    pub annotator: PretrainedClassifier,
    pub evaluator: Evaluator,
}

impl Setup {
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let train = make_longtail(&cfg.data)?;
        let test = make_balanced_test(&cfg.data, cfg.test_per_class)?;
        let classifier = in_loop_classifier(cfg, &train, &test, cfg.clf_rho)?;
        let balanced = make_longtail(&LongTailSpec {
            rho: 1.0,
            seed: cfg.data.seed + ANNOTATOR_SEED_OFFSET,
            ..cfg.data.clone()
        })?;
        let annotator = pretrain_classifier(
            &balanced,
            &test,
            &ClassifierConfig {
                seed: cfg.classifier.seed + 1,
                ..cfg.classifier.clone()
            },
        )?;
        let evaluator = Evaluator::new(annotator.model.clone(), test.samples.clone(), cfg.eval_samples, cfg.data.seed)?;
        Ok(Setup {
            train,
            test,
            classifier,
            annotator,
            evaluator,
        })
    }

    /// Same data and annotator with a different in-loop classifier.
    pub fn with_classifier(&self, classifier: PretrainedClassifier) -> Self {
        Setup {
            classifier,
            ..self.clone()
        }
    }
}

fn in_loop_classifier(cfg: &ExperimentConfig, train: &LabeledDataset, test: &LabeledDataset, rho: f64) -> Result<PretrainedClassifier> {
    if rho == cfg.data.rho {
        return pretrain_classifier(train, test, &cfg.classifier);
    }
    let data = make_longtail(&LongTailSpec {
        rho,
        ..cfg.data.clone()
    })?;
    pretrain_classifier(&data, test, &cfg.classifier)
}

/// Last-cycle metrics of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    pub lambda: f64,
    pub history: Vec<CycleRecord>,
    pub final_metrics: MetricsRecord,
    pub elapsed: Duration,
}

impl RunResult {
    pub fn kl_uniform(&self) -> f64 {
        self.final_metrics.kl_uniform
    }

    pub fn frechet(&self) -> f64 {
        self.final_metrics.frechet
    }
}

/// Trains one generator. With `dir` set, writes `metrics.csv`, `config.txt`,
/// `summary.csv`, checkpoints and plots there.
pub fn run_training(cfg: &ExperimentConfig, setup: &Setup, seed: u64, lambda: f64, dir: Option<&Path>) -> Result<RunResult> {
    let mut run_cfg = cfg.clone();
    run_cfg.set_seed(seed);
    run_cfg.trainer.lambda = lambda;
    let label = if lambda == 0.0 { "baseline" } else { "train" };
    let start = Instant::now();
    let out = train(&run_cfg.trainer, &setup.train, &setup.classifier.model, &setup.evaluator)?;
    let elapsed = start.elapsed();
    let mut final_metrics = out
        .history
        .last()
        .map(|r| r.metrics.clone())
        .ok_or_else(|| Error::param("iterations", "run produced no cycles"))?;

    if let Some(dir) = dir {
        let cas = classifier_accuracy_score(
            &out.ema_generator,
            &setup.classifier.model,
            &setup.test,
            &CasBudget {
                seed,
                ..CasBudget::default()
            },
        )?;
        final_metrics.clf_accuracy = Some(cas.accuracy);
        fs::create_dir_all(dir)?;
        let hash = run_cfg.hash();
        fs::write(dir.join("config.txt"), run_cfg.to_text())?;
        metrics_table(&out.history, cfg.data.classes).save(&dir.join("metrics.csv"))?;
        let mut summary = Table::new([
            "label",
            "seed",
            "lambda",
            "iterations",
            "kl_uniform",
            "frechet",
            "clf_accuracy",
            "missing_classes",
            "tail_accuracy",
        ]);
        summary.push(vec![
            label.into(),
            seed.to_string(),
            fmt_f64(lambda),
            out.iterations.to_string(),
            fmt_f64(final_metrics.kl_uniform),
            fmt_f64(final_metrics.frechet),
            fmt_f64(cas.accuracy),
            cas.missing_classes.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";"),
            fmt_f64(setup.classifier.report.tail_accuracy()),
        ]);
        summary.save(&dir.join("summary.csv"))?;
        let ckpt = dir.join("checkpoint");
        export_checkpoint(&ckpt.join("generator_ema"), &out.ema_generator, seed, out.iterations)?;
        export_checkpoint(&ckpt.join("generator"), &out.generator, seed, out.iterations)?;
        export_checkpoint(&ckpt.join("discriminator"), &out.discriminator, seed, out.iterations)?;
        write_run_plots(dir, &out.history, cfg.data.classes, &format!("config-hash: {hash}"))?;
    }

    Ok(RunResult {
        label: format!("{label}-seed{seed}"),
        seed,
        lambda,
        history: out.history,
        final_metrics,
        elapsed,
    })
}

fn write_run_plots(dir: &Path, history: &[CycleRecord], classes: usize, provenance: &str) -> Result<()> {
    let iters: Vec<f64> = history.iter().map(|r| r.iter as f64).collect();
    let series = |f: &dyn Fn(&CycleRecord) -> f64| iters.iter().copied().zip(history.iter().map(f)).collect::<Vec<_>>();

    let mut fracs = LinePlot::new("Generated class fractions (annotator)", "iteration", "fraction")
        .hline(1.0 / classes as f64, "uniform");
    for k in 0..classes {
        fracs = fracs.with(Series::new(format!("class {k}"), series(&|r| r.metrics.class_fracs[k])));
    }
    fs::write(dir.join("class_fracs.svg"), fracs.render(provenance))?;

    let mut n_dist = LinePlot::new("Effective class distribution", "iteration", "N_k");
    for k in 0..classes {
        n_dist = n_dist.with(Series::new(format!("N_{k}"), series(&|r| r.n_dist[k])));
    }
    fs::write(dir.join("n_dist.svg"), n_dist.render(provenance))?;

    let kl = LinePlot::new("KL to uniform", "iteration", "nats").with(Series::new("kl_uniform", series(&|r| r.metrics.kl_uniform)));
    fs::write(dir.join("kl_uniform.svg"), kl.render(provenance))?;
    let fr = LinePlot::new("Frechet distance to balanced test set", "iteration", "distance")
        .with(Series::new("frechet", series(&|r| r.metrics.frechet)));
    fs::write(dir.join("frechet.svg"), fr.render(provenance))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Regularized run against the unregularized baseline

#[derive(Clone, Debug)]
pub struct SeedComparison {
    pub seed: u64,
    pub baseline: RunResult,
    pub regularized: RunResult,
}

/// Baseline (`lambda = 0`) and regularized run for every configured seed.
pub fn compare_to_baseline(cfg: &ExperimentConfig, setup: &Setup, jobs: usize, out: Option<&Path>) -> Result<Vec<SeedComparison>> {
    let jobs_list: Vec<(u64, f64)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| [(s, 0.0), (s, cfg.trainer.lambda)])
        .collect();
    let runs = with_jobs(jobs, || {
        jobs_list
            .par_iter()
            .map(|&(seed, lambda)| {
                let dir = out.map(|o| o.join(format!("{}-seed{seed}", if lambda == 0.0 { "baseline" } else { "train" })));
                run_training(cfg, setup, seed, lambda, dir.as_deref())
            })
            .collect::<Vec<_>>()
    })?;
    let mut it = runs.into_iter();
    let mut out_rows = Vec::new();
    for &seed in &cfg.seeds {
        let baseline = it.next().expect("paired run")?;
        let regularized = it.next().expect("paired run")?;
        out_rows.push(SeedComparison {
            seed,
            baseline,
            regularized,
        });
    }
    Ok(out_rows)
}

// ---------------------------------------------------------------------------
// Fixed statistics

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FixedCondition {
    Large,
    Small,
    Uniform,
}

impl FixedCondition {
    pub fn name(self) -> &'static str {
        match self {
            FixedCondition::Large => "large",
            FixedCondition::Small => "small",
            FixedCondition::Uniform => "uniform",
        }
    }
}

#[derive(Clone, Debug)]
pub struct FixedStatsRun {
    pub condition: FixedCondition,
    pub seed: u64,
    pub class0: Vec<f64>,
    pub start: f64,
    pub end: f64,
    /// Whether the seed belongs to `cfg.seeds` (and is judged) or is an
    /// extra control seed that only widens the noise band.
    pub judged: bool,
}

#[derive(Clone, Debug)]
pub struct FixedStatsReport {
    pub runs: Vec<FixedStatsRun>,
    /// Half-width of the noise band for the uniform condition.
    pub band: f64,
    pub cycle_len: usize,
    pub start_index: usize,
}

impl FixedStatsReport {
    /// Expected direction for every judged run of `condition`.
    pub fn condition_holds(&self, condition: FixedCondition) -> bool {
        let mut judged = self.runs.iter().filter(|r| r.judged && r.condition == condition).peekable();
        judged.peek().is_some()
            && judged.all(|r| match condition {
                FixedCondition::Large => r.end < r.start,
                FixedCondition::Small => r.end > r.start,
                FixedCondition::Uniform => (r.end - r.start).abs() <= self.band,
            })
    }

    pub fn passed(&self) -> bool {
        [FixedCondition::Large, FixedCondition::Small, FixedCondition::Uniform]
            .into_iter()
            .all(|c| self.condition_holds(c))
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(["condition", "seed", "judged", "start", "end", "delta", "band"]);
        for r in &self.runs {
            t.push(vec![
                r.condition.name().into(),
                r.seed.to_string(),
                r.judged.to_string(),
                fmt_f64(r.start),
                fmt_f64(r.end),
                fmt_f64(r.end - r.start),
                fmt_f64(self.band),
            ]);
        }
        t
    }

    pub fn trajectory_table(&self) -> Table {
        let mut t = Table::new(["condition", "seed", "cycle", "iter", "class0_frac"]);
        for r in &self.runs {
            for (i, f) in r.class0.iter().enumerate() {
                t.push(vec![
                    r.condition.name().into(),
                    r.seed.to_string(),
                    (i + 1).to_string(),
                    ((i + 1) * self.cycle_len).to_string(),
                    fmt_f64(*f),
                ]);
            }
        }
        t
    }

    pub fn plot(&self) -> LinePlot {
        let mut p = LinePlot::new("Class-0 fraction with fixed statistics", "iteration", "fraction of class 0")
            .hline(self.runs.first().map_or(0.0, |r| r.start), "start");
        for r in self.runs.iter().filter(|r| r.judged) {
            let pts = r
                .class0
                .iter()
                .enumerate()
                .map(|(i, f)| (((i + 1) * self.cycle_len) as f64, *f))
                .collect();
            let s = Series::new(format!("{} seed {}", r.condition.name(), r.seed), pts);
            p = p.with(if r.condition == FixedCondition::Uniform { s.dashed() } else { s });
        }
        p
    }
}

/// Seeds for the uniform control runs: the judged seeds first, then extra
/// seeds until `control_seeds` runs are available.
pub fn control_seed_list(seeds: &[u64], control_seeds: usize) -> Vec<u64> {
    let mut out = seeds.to_vec();
    let mut next = seeds.iter().max().map_or(0, |m| m + 1);
    while out.len() < control_seeds {
        out.push(next);
        next += 1;
    }
    out
}

/// Class statistics held fixed with class 0 set large, small, or equal to
/// the rest. Uniform control runs on `control_seeds` seeds give the noise
/// band: three standard deviations of their start fractions, and never less
/// than three binomial standard deviations of a one-cycle fraction.
pub fn fixed_stats_suite(cfg: &ExperimentConfig, setup: &Setup, jobs: usize) -> Result<FixedStatsReport> {
    let k = cfg.data.classes;
    let with_class0 = |v: f64| {
        let mut n = vec![1.0; k];
        n[0] = v;
        n
    };
    let controls = control_seed_list(&cfg.seeds, cfg.control_seeds);
    let mut plan: Vec<(FixedCondition, u64, bool)> = Vec::new();
    for &s in &cfg.seeds {
        plan.push((FixedCondition::Large, s, true));
        plan.push((FixedCondition::Small, s, true));
    }
    for &s in &controls {
        plan.push((FixedCondition::Uniform, s, cfg.seeds.contains(&s)));
    }
    let results = with_jobs(jobs, || {
        plan.par_iter()
            .map(|&(cond, seed, judged)| {
                let n = match cond {
                    FixedCondition::Large => with_class0(cfg.fixed_big),
                    FixedCondition::Small => with_class0(cfg.fixed_small),
                    FixedCondition::Uniform => vec![1.0; k],
                };
                let mut t = cfg.trainer.clone();
                t.seed = seed;
                let traj = fixed_stats_experiment(&t, &setup.train, &setup.classifier.model, &setup.evaluator, &n)?;
                Ok(FixedStatsRun {
                    condition: cond,
                    seed,
                    start: traj.start(),
                    end: traj.end(),
                    class0: traj.class0,
                    judged,
                })
            })
            .collect::<Vec<Result<FixedStatsRun>>>()
    })?;
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let starts: Vec<f64> = runs
        .iter()
        .filter(|r| r.condition == FixedCondition::Uniform)
        .map(|r| r.start)
        .collect();
    let mean = starts.iter().sum::<f64>() / starts.len() as f64;
    let var = starts.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (starts.len() - 1) as f64;
    let p = 1.0 / k as f64;
    let sampling = (p * (1.0 - p) / (cfg.trainer.cycle_len * cfg.trainer.batch_size) as f64).sqrt();
    Ok(FixedStatsReport {
        runs,
        band: 3.0 * var.sqrt().max(sampling),
        cycle_len: cfg.trainer.cycle_len,
        start_index: cfg.trainer.reg_warmup / cfg.trainer.cycle_len - 1,
    })
}

// ---------------------------------------------------------------------------
// Theory

#[derive(Clone, Debug)]
pub struct TheoryTrial {
    pub trial: usize,
    pub report: PropositionReport,
}

#[derive(Clone, Debug)]
pub struct TheoryReport {
    pub trials: Vec<TheoryTrial>,
    /// `(K, gap)` between the uniform stationary point and the bound.
    pub tightness: Vec<(usize, f64)>,
    pub tightness_tol: f64,
    pub elapsed: Duration,
}

impl TheoryReport {
    pub fn max_bound_violation(&self) -> f64 {
        self.trials.iter().map(|t| t.report.max_bound_violation).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_value_residual(&self) -> f64 {
        self.trials.iter().map(|t| t.report.value_residual).fold(0.0, f64::max)
    }

    pub fn max_oracle_linf(&self) -> f64 {
        self.trials.iter().map(|t| t.report.oracle_linf).fold(0.0, f64::max)
    }

    pub fn max_tightness_gap(&self) -> f64 {
        self.tightness.iter().map(|t| t.1).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&TheoryTrial> {
        self.trials.iter().filter(|t| !t.report.passed()).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty() && self.max_tightness_gap() <= self.tightness_tol
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new([
            "trial",
            "K",
            "max_bound_violation",
            "prop2_residual",
            "oracle_linf",
            "lambda",
            "passed",
            "failures",
            "N",
        ]);
        for tr in &self.trials {
            let r = &tr.report;
            t.push(vec![
                tr.trial.to_string(),
                r.classes.to_string(),
                fmt_f64(r.max_bound_violation),
                fmt_f64(r.value_residual),
                fmt_f64(r.oracle_linf),
                fmt_f64(r.lambda),
                r.passed().to_string(),
                r.failures.join("; "),
                r.n.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(";"),
            ]);
        }
        t
    }

    pub fn tightness_table(&self) -> Table {
        let mut t = Table::new(["K", "uniform_gap", "passed"]);
        for &(k, gap) in &self.tightness {
            t.push(vec![k.to_string(), fmt_f64(gap), (gap <= self.tightness_tol).to_string()]);
        }
        t
    }
}

/// Randomized check of the closed-form optimum, its bound and its value,
/// plus tightness of the bound at the uniform distribution for every K in
/// range. Balancing-direction assertions are skipped for `K = 2`.
pub fn theory_suite(th: &TheoryConfig, seed: u64, jobs: usize) -> Result<TheoryReport> {
    let start = Instant::now();
    let trials = with_jobs(jobs, || {
        (0..th.trials)
            .into_par_iter()
            .map(|trial| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(trial as u64);
                let k = rng.random_range(th.k_min..=th.k_max);
                let n = random_simplex(k, &mut rng);
                let opts = VerifyOptions {
                    tolerances: th.tolerances,
                    probes: th.probes,
                    check_direction: th.check_direction && k >= 3,
                    ..VerifyOptions::default()
                };
                let report = verify_propositions(&n, &opts, &mut rng)?;
                Ok(TheoryTrial { trial, report })
            })
            .collect::<Vec<Result<TheoryTrial>>>()
    })?
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let tightness = (th.k_min..=th.k_max)
        .map(|k| uniform_tightness_gap(k).map(|g| (k, g)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TheoryReport {
        trials,
        tightness,
        tightness_tol: TIGHTNESS_TOL,
        elapsed: start.elapsed(),
    })
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub seed: u64,
    pub tail_accuracy: f64,
    pub kl_uniform: f64,
    pub frechet: f64,
    /// Empty on success, otherwise the error message of a failed run.
    pub error: String,
    /// The in-loop classifier never recognizes the tail class.
    pub divergence_warning: bool,
}

impl SweepRow {
    pub fn ok(&self) -> bool {
        self.error.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub kind: ExperimentKind,
    pub rows: Vec<SweepRow>,
    pub kl_threshold: f64,
    pub tail_accuracy_min: f64,
}

impl SweepReport {
    /// Rows whose expectations fail: for the classifier sweep, runs with a
    /// tail accuracy at or above the minimum must meet the KL threshold; for
    /// the other sweeps every run must.
    pub fn violations(&self) -> Vec<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| {
                let judged = self.kind != ExperimentKind::ClassifierSweep || r.tail_accuracy >= self.tail_accuracy_min;
                judged && (!r.ok() || !(r.kl_uniform <= self.kl_threshold))
            })
            .collect()
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new([
            "sweep_value",
            "seed",
            "tail_accuracy",
            "kl_uniform",
            "frechet",
            "divergence_warning",
            "error",
        ]);
        for r in &self.rows {
            t.push(vec![
                r.value.clone(),
                r.seed.to_string(),
                fmt_f64(r.tail_accuracy),
                fmt_f64(r.kl_uniform),
                fmt_f64(r.frechet),
                r.divergence_warning.to_string(),
                r.error.clone(),
            ]);
        }
        t
    }

    pub fn plot(&self) -> LinePlot {
        let mut values: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !values.contains(&r.value.as_str()) {
                values.push(&r.value);
            }
        }
        let mut seeds: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let mut p = LinePlot::new(
            format!("{} sweep: final KL to uniform", self.kind.name()),
            format!("sweep value index ({})", values.join(", ")),
            "nats",
        )
        .hline(self.kl_threshold, "threshold");
        for s in seeds {
            let pts = self
                .rows
                .iter()
                .filter(|r| r.seed == s)
                .map(|r| (values.iter().position(|v| *v == r.value).unwrap_or(0) as f64, r.kl_uniform))
                .collect();
            p = p.with(Series::new(format!("seed {s}"), pts));
        }
        p
    }
}

/// Name of the classifier-sweep member whose classifier never saw the tail.
pub const DROP_TAIL: &str = "drop-tail";

pub fn default_sweep_values(kind: ExperimentKind, cfg: &ExperimentConfig) -> Vec<String> {
    match kind {
        ExperimentKind::ClassifierSweep => ["1", "10", "100", "500", DROP_TAIL].map(String::from).to_vec(),
        ExperimentKind::BetaAblation => vec!["1".into(), fmt_f64(cfg.trainer.alpha)],
        ExperimentKind::CycleLengthSweep => ["50", "100", "200", "400", "800"].map(String::from).to_vec(),
        _ => Vec::new(),
    }
}

enum Member {
    Classifier(PretrainedClassifier),
    Trainer(Box<ExperimentConfig>),
}

fn sweep_member(kind: ExperimentKind, cfg: &ExperimentConfig, setup: &Setup, value: &str) -> Result<Member> {
    let parse = |key: &str| -> Result<f64> {
        value
            .parse::<f64>()
            .map_err(|e| Error::config("sweep_values", format!("`{value}` is not a valid {key}: {e}")))
    };
    match kind {
        ExperimentKind::ClassifierSweep if value == DROP_TAIL => {
            let tail = cfg.data.classes - 1;
            let mut c = pretrain_classifier(&setup.train.without_class(tail), &setup.test, &cfg.classifier)?;
            c.report.absent_in_training = vec![tail];
            Ok(Member::Classifier(c))
        }
        ExperimentKind::ClassifierSweep => {
            let rho = parse("imbalance ratio")?;
            let mut probe = cfg.clone();
            probe.clf_rho = rho;
            probe.validate()?;
            Ok(Member::Classifier(in_loop_classifier(cfg, &setup.train, &setup.test, rho)?))
        }
        ExperimentKind::BetaAblation => {
            let mut c = cfg.clone();
            c.trainer.beta = parse("beta")?;
            c.validate()?;
            Ok(Member::Trainer(Box::new(c)))
        }
        ExperimentKind::CycleLengthSweep => {
            let v = parse("cycle length")?;
            if v < 1.0 || v.fract() != 0.0 {
                return Err(Error::config("sweep_values", format!("cycle length must be a positive integer, got {value}")));
            }
            let mut c = cfg.clone();
            c.trainer.cycle_len = v as usize;
            c.validate()?;
            Ok(Member::Trainer(Box::new(c)))
        }
        other => Err(Error::config("kind", format!("`{}` is not a sweep", other.name()))),
    }
}

/// One regularized run per (sweep value, seed). A failing member is recorded
/// in its row and the sweep continues.
pub fn sweep(kind: ExperimentKind, cfg: &ExperimentConfig, setup: &Setup, jobs: usize) -> Result<SweepReport> {
    let values = cfg.sweep_values.clone().unwrap_or_else(|| default_sweep_values(kind, cfg));
    if values.is_empty() {
        return Err(Error::config("sweep_values", "nothing to sweep"));
    }
    let members: Vec<(String, Result<Member>)> =
        values.iter().map(|v| (v.clone(), sweep_member(kind, cfg, setup, v))).collect();
    let plan: Vec<(usize, u64)> = (0..members.len())
        .flat_map(|i| cfg.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let rows = with_jobs(jobs, || {
        plan.par_iter()
            .map(|&(i, seed)| {
                let (value, member) = &members[i];
                let mut row = SweepRow {
                    value: value.clone(),
                    seed,
                    tail_accuracy: setup.classifier.report.tail_accuracy(),
                    kl_uniform: f64::NAN,
                    frechet: f64::NAN,
                    error: String::new(),
                    divergence_warning: false,
                };
                let result = match member {
                    Err(e) => Err(Error::Parse(e.to_string())),
                    Ok(Member::Classifier(c)) => {
                        row.tail_accuracy = c.report.tail_accuracy();
                        row.divergence_warning = c.report.divergence_warning();
                        run_training(cfg, &setup.with_classifier(c.clone()), seed, cfg.trainer.lambda, None)
                    }
                    Ok(Member::Trainer(c)) => {
                        row.divergence_warning = setup.classifier.report.divergence_warning();
                        run_training(c, setup, seed, c.trainer.lambda, None)
                    }
                };
                match result {
                    Ok(r) => {
                        row.kl_uniform = r.kl_uniform();
                        row.frechet = r.frechet();
                    }
                    Err(e) => row.error = e.to_string(),
                }
                row
            })
            .collect::<Vec<_>>()
    })?;
    Ok(SweepReport {
        kind,
        rows,
        kl_threshold: cfg.kl_threshold,
        tail_accuracy_min: cfg.tail_accuracy_min,
    })
}

// ---------------------------------------------------------------------------
// Report

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub iter: usize,
    pub kl_uniform: f64,
    pub frechet: f64,
    /// `(iter, kl_uniform)` for every recorded cycle.
    pub kl_trajectory: Vec<(f64, f64)>,
}

/// Final metrics of every run directory under `root` (any subdirectory with
/// a `metrics.csv`), ranked by KL to uniform, lowest first.
pub fn collect_report(root: &Path) -> Result<Vec<ReportRow>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("metrics.csv").is_file())
        .collect();
    dirs.sort();
    let mut rows = Vec::new();
    for dir in dirs {
        let t = Table::load(&dir.join("metrics.csv"))?;
        let col = |name: &str| t.column(name).ok_or_else(|| Error::Parse(format!("{}: no `{name}` column", dir.display())));
        let (ci, ck, cf) = (col("iter")?, col("kl_uniform")?, col("frechet")?);
        let Some(last) = t.rows.last() else { continue };
        let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("{}: {e}", dir.display())));
        let num = |i: usize| parse(&last[i]);
        let kl_trajectory = t
            .rows
            .iter()
            .map(|r| Ok((parse(&r[ci])?, parse(&r[ck])?)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(ReportRow {
            run: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            iter: num(ci)? as usize,
            kl_uniform: num(ck)?,
            frechet: num(cf)?,
            kl_trajectory,
        });
    }
    rows.sort_by(|a, b| a.kl_uniform.total_cmp(&b.kl_uniform).then_with(|| a.run.cmp(&b.run)));
    Ok(rows)
}

pub fn report_table(rows: &[ReportRow]) -> Table {
    let mut t = Table::new(["rank", "run", "iter", "kl_uniform", "frechet"]);
    for (i, r) in rows.iter().enumerate() {
        t.push(vec![
            (i + 1).to_string(),
            r.run.clone(),
            r.iter.to_string(),
            fmt_f64(r.kl_uniform),
            fmt_f64(r.frechet),
        ]);
    }
    t
}

pub fn report_plot(rows: &[ReportRow]) -> LinePlot {
    rows.iter().fold(LinePlot::new("KL to uniform per run", "iteration", "nats"), |p, r| {
        p.with(Series::new(r.run.clone(), r.kl_trajectory.clone()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_seeds_extend_judged_seeds() {
        assert_eq!(control_seed_list(&[0, 1, 2], 5), vec![0, 1, 2, 3, 4]);
        assert_eq!(control_seed_list(&[7], 3), vec![7, 8, 9]);
        assert_eq!(control_seed_list(&[0, 1, 2], 2), vec![0, 1, 2]);
    }

    #[test]
    fn theory_suite_small() {
        let th = TheoryConfig {
            trials: 20,
            k_min: 2,
            k_max: 6,
            ..TheoryConfig::default()
        };
        let r = theory_suite(&th, 3, 1).unwrap();
        assert!(r.passed(), "{:?}", r.failures().iter().map(|f| &f.report.failures).collect::<Vec<_>>());
        assert_eq!(r.trials.len(), 20);
        assert_eq!(r.tightness.len(), 5);
        assert!(r.trials.iter().any(|t| t.report.classes == 2 && t.report.balancing_direction.is_none()));
        let table = r.table().to_string().unwrap();
        assert!(table.starts_with("trial,K,max_bound_violation,prop2_residual,oracle_linf"));
    }

    #[test]
    fn theory_suite_is_deterministic_across_job_counts() {
        let th = TheoryConfig {
            trials: 12,
            ..TheoryConfig::default()
        };
        let a = theory_suite(&th, 1, 1).unwrap().table();
        let b = theory_suite(&th, 1, 2).unwrap().table();
        assert_eq!(a, b);
    }

    #[test]
    fn sweep_report_judges_only_capable_classifiers() {
        let row = |value: &str, tail: f64, kl: f64| SweepRow {
            value: value.into(),
            seed: 0,
            tail_accuracy: tail,
            kl_uniform: kl,
            frechet: 0.1,
            error: String::new(),
            divergence_warning: tail == 0.0,
        };
        let r = SweepReport {
            kind: ExperimentKind::ClassifierSweep,
            rows: vec![row("1", 0.9, 0.02), row(DROP_TAIL, 0.0, 0.8), row("500", 0.4, 0.3)],
            kl_threshold: 0.1,
            tail_accuracy_min: 0.6,
        };
        assert!(r.violations().is_empty());
        let r = SweepReport {
            kind: ExperimentKind::CycleLengthSweep,
            ..r
        };
        assert_eq!(r.violations().len(), 2);
    }

    #[test]
    fn default_values_per_kind() {
        let cfg = ExperimentConfig::new(ExperimentKind::BetaAblation);
        assert_eq!(default_sweep_values(ExperimentKind::BetaAblation, &cfg), vec!["1", "0.5"]);
        assert_eq!(default_sweep_values(ExperimentKind::CycleLengthSweep, &cfg).len(), 5);
        assert!(default_sweep_values(ExperimentKind::ClassifierSweep, &cfg).contains(&DROP_TAIL.to_string()));
    }
}
