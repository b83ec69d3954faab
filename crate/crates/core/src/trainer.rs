//! Relativistic GAN training with a frozen classifier in the loop.
//!
//! Each iteration takes one discriminator step and one generator step. The
//! generator loss is `L_G + (lambda / K) * L_reg`, where `L_reg` is evaluated
//! on the same generated batch through the frozen classifier and weighted by
//! the class distribution from the last completed statistics cycle. The
//! argmax labels of every generator batch feed the statistics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::LabeledDataset;
use crate::diffkernel::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{Evaluator, MetricsRecord};
use crate::nn::{Activation, Adam, Ema, Head, Mlp};
use crate::regularizer::{combined_generator_loss, l_reg, mean_softmax};
use crate::stats::{ClassDistribution, CountMode, EffectiveClassStats};

const INIT_STREAM: u64 = 11;
const TRAIN_STREAM: u64 = 12;

/// How class labels are proposed to the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LabelProposal {
    #[default]
    Uniform,
    /// Labels drawn with weight `1 / N_k`. Only meaningful for a
    /// class-conditional generator, so the unconditional trainer rejects it.
    InverseFrequency,
}

impl LabelProposal {
    pub fn name(self) -> &'static str {
        match self {
            LabelProposal::Uniform => "uniform",
            LabelProposal::InverseFrequency => "inverse-frequency",
        }
    }
}

/// Label weights for the inverse-frequency proposal: proportional to `1 / N_k`.
pub fn inverse_frequency_weights(n: &ClassDistribution) -> Vec<f64> {
    let inv: Vec<f64> = n.probs().iter().map(|v| 1.0 / v).collect();
    let total: f64 = inv.iter().sum();
    inv.into_iter().map(|v| v / total).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub noise_dim: usize,
    pub hidden: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub cycle_len: usize,
    pub ema_decay: f64,
    /// Iteration after which the EMA starts averaging; `None` means 20% of
    /// `iterations`.
    pub ema_start: Option<usize>,
    pub seed: u64,
    pub label_proposal: LabelProposal,
    pub count_mode: CountMode,
    /// Iterations at the start during which the regularizer is off.
    pub reg_warmup: usize,
    /// Statistics held at this value for the whole run when set.
    pub fixed_n_hat: Option<Vec<f64>>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            noise_dim: 8,
            hidden: 32,
            batch_size: 64,
            iterations: 6000,
            lr_g: 2e-4,
            lr_d: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            lambda: 5.0,
            alpha: 0.5,
            beta: 1.0,
            cycle_len: 200,
            ema_decay: 0.999,
            ema_start: None,
            seed: 0,
            label_proposal: LabelProposal::Uniform,
            count_mode: CountMode::Argmax,
            reg_warmup: 0,
            fixed_n_hat: None,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("noise_dim", self.noise_dim),
            ("hidden", self.hidden),
            ("batch_size", self.batch_size),
            ("iterations", self.iterations),
            ("cycle_len", self.cycle_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be > 0, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(name, format!("must be in [0, 1), got {v}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", format!("must be >= 0, got {}", self.lambda)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("alpha", format!("must be in (0, 1], got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", format!("must be > 0, got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay", format!("must be in [0, 1], got {}", self.ema_decay)));
        }
        if self.label_proposal == LabelProposal::InverseFrequency {
            return Err(Error::config(
                "label_proposal",
                "inverse-frequency proposal needs a class-conditional generator; this trainer is unconditional",
            ));
        }
        if let Some(n) = &self.fixed_n_hat {
            if n.is_empty() || n.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::config("fixed_n_hat", "every entry must be finite and > 0"));
            }
        }
        Ok(())
    }

    pub fn ema_start_step(&self) -> usize {
        self.ema_start.unwrap_or(self.iterations / 5)
    }
}

/// Generator: noise -> hidden -> hidden -> data, tanh hidden units.
pub fn build_generator<R: Rng>(noise_dim: usize, hidden: usize, dim: usize, rng: &mut R) -> Result<Mlp> {
    Mlp::new(&[noise_dim, hidden, hidden, dim], Activation::Tanh, Head::Linear, rng)
}

/// Discriminator: data -> hidden -> hidden -> 1, leaky-relu hidden units.
pub fn build_discriminator<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Result<Mlp> {
    Mlp::new(&[dim, hidden, hidden, 1], Activation::LeakyRelu, Head::Linear, rng)
}

/// Classifier: data -> hidden -> K softmax.
pub fn build_classifier<R: Rng>(dim: usize, hidden: usize, classes: usize, rng: &mut R) -> Result<Mlp> {
    Mlp::new(&[dim, hidden, classes], Activation::LeakyRelu, Head::Softmax, rng)
}

pub fn sample_noise<R: Rng>(n: usize, noise_dim: usize, rng: &mut R) -> Tensor {
    let data = (0..n * noise_dim).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(n, noise_dim, data)
}

/// `n` generator samples.
pub fn generate<R: Rng>(generator: &Mlp, n: usize, rng: &mut R) -> Result<Tensor> {
    generator.predict(&sample_noise(n, generator.input_dim(), rng))
}

// ---------------------------------------------------------------------------
// Classifier pretraining

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: 32,
            epochs: 60,
            lr: 5e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Plain cross-entropy training of a fresh softmax classifier. With zero
/// epochs the freshly initialized network is returned.
pub fn fit_classifier(samples: &Tensor, labels: &[usize], classes: usize, cfg: &ClassifierConfig) -> Result<Mlp> {
    if labels.is_empty() || samples.rows() != labels.len() {
        return Err(Error::param("labels", "need a nonempty sample set with one label per row"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = build_classifier(samples.cols(), cfg.hidden, classes, &mut rng)?;
    let mut adam = Adam::new(&model, cfg.lr, 0.9, 0.999);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let d = samples.cols();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut x = Vec::with_capacity(chunk.len() * d);
            let mut onehot = vec![0.0; chunk.len() * classes];
            for (r, &i) in chunk.iter().enumerate() {
                x.extend_from_slice(samples.row_slice(i));
                onehot[r * classes + labels[i]] = 1.0;
            }
            let mut g = Graph::new();
            let xn = g.constant(Tensor::matrix(chunk.len(), d, x));
            let fwd = model.forward(&mut g, xn, true)?;
            let logp = g.log(fwd.output);
            let y = g.constant(Tensor::matrix(chunk.len(), classes, onehot));
            let picked = g.mul(logp, y)?;
            let total = g.sum(picked);
            let loss = g.scale(total, -1.0 / chunk.len() as f64);
            g.backward(loss)?;
            let grads: Vec<&Tensor> = fwd.params.iter().map(|&p| g.grad(p)).collect();
            adam.step(&mut model, &grads);
        }
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierReport {
    pub overall: f64,
    /// Accuracy per true class on the test set; `NaN` where the test set
    /// has no sample of that class.
    pub per_class: Vec<f64>,
    /// Classes with no training samples.
    pub absent_in_training: Vec<usize>,
}

impl ClassifierReport {
    /// Accuracy on the smallest (last) class.
    pub fn tail_accuracy(&self) -> f64 {
        *self.per_class.last().expect("at least one class")
    }

    /// Accuracy on the largest (first) class.
    pub fn head_accuracy(&self) -> f64 {
        self.per_class[0]
    }

    /// A classifier that never recognizes the tail class cannot pull the
    /// generator toward it; the regularized run is expected to diverge.
    pub fn divergence_warning(&self) -> bool {
        self.tail_accuracy() == 0.0
    }
}

pub fn evaluate_classifier(classifier: &Mlp, test: &LabeledDataset) -> Result<ClassifierReport> {
    let k = classifier.output_dim();
    let pred = classifier.classify(&test.samples)?;
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for (&p, &y) in pred.iter().zip(&test.labels) {
        totals[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    Ok(ClassifierReport {
        overall: correct as f64 / test.len().max(1) as f64,
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| if t == 0 { f64::NAN } else { h as f64 / t as f64 })
            .collect(),
        absent_in_training: Vec::new(),
    })
}

#[derive(Clone, Debug)]
pub struct PretrainedClassifier {
    /// Frozen.
    pub model: Mlp,
    pub report: ClassifierReport,
}

/// Trains the in-loop classifier on `train` and measures it on the balanced
/// `test` set. Classes missing from `train` are reported, not rejected.
pub fn pretrain_classifier(train: &LabeledDataset, test: &LabeledDataset, cfg: &ClassifierConfig) -> Result<PretrainedClassifier> {
    if train.is_empty() {
        return Err(Error::param("train", "empty training set"));
    }
    let classes = train.classes();
    let mut model = fit_classifier(&train.samples, &train.labels, classes, cfg)?;
    model.freeze();
    let mut report = evaluate_classifier(&model, test)?;
    report.absent_in_training = (0..classes).filter(|&k| train.counts[k] == 0).collect();
    Ok(PretrainedClassifier { model, report })
}

// ---------------------------------------------------------------------------
// Losses and single-step gradients

/// Relativistic losses over paired `[n, 1]` discriminator outputs:
/// `L_D = -mean log sigmoid(d_real - d_fake)` and
/// `L_G = -mean log sigmoid(d_fake - d_real)`.
pub fn relativistic_losses(g: &mut Graph, d_real: NodeId, d_fake: NodeId) -> Result<(NodeId, NodeId)> {
    let (rs, fs) = (g.value(d_real).shape().to_vec(), g.value(d_fake).shape().to_vec());
    if rs != fs {
        return Err(Error::Shape {
            op: "relativistic_losses",
            detail: format!("real batch {rs:?} and fake batch {fs:?} differ"),
        });
    }
    let real_minus_fake = g.sub(d_real, d_fake)?;
    let fake_minus_real = g.sub(d_fake, d_real)?;
    let ld = g.log_sigmoid(real_minus_fake);
    let lg = g.log_sigmoid(fake_minus_real);
    let ld = g.mean(ld);
    let lg = g.mean(lg);
    Ok((g.scale(ld, -1.0), g.scale(lg, -1.0)))
}

/// Which part of the generator objective is differentiated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorObjective {
    Adversarial,
    Regularizer,
    Combined,
}

#[derive(Clone, Debug)]
pub struct GeneratorStep {
    pub loss_g: f64,
    pub loss_reg: f64,
    /// Classifier softmax for each generated sample, `[n, K]`.
    pub probs: Tensor,
    /// Generator gradients ordered like [`Mlp::params`].
    pub grads: Vec<Tensor>,
}

/// Losses and generator gradients for one batch. The discriminator and the
/// classifier enter as constants.
#[allow(clippy::too_many_arguments)]
pub fn generator_step(
    generator: &Mlp,
    discriminator: &Mlp,
    classifier: &Mlp,
    real: &Tensor,
    noise: &Tensor,
    n: &ClassDistribution,
    lambda: f64,
    objective: GeneratorObjective,
) -> Result<GeneratorStep> {
    let mut g = Graph::new();
    let z = g.constant(noise.clone());
    let gen_leaves = generator.leaves(&mut g, true);
    let fake = generator.apply(&mut g, z, &gen_leaves)?;
    let disc_leaves = discriminator.leaves(&mut g, false);
    let x = g.constant(real.clone());
    let d_real = discriminator.apply(&mut g, x, &disc_leaves)?;
    let d_fake = discriminator.apply(&mut g, fake, &disc_leaves)?;
    let (_, loss_g) = relativistic_losses(&mut g, d_real, d_fake)?;
    let ms = mean_softmax(&mut g, classifier, fake)?;
    let reg = l_reg(&mut g, ms.node, n)?;
    let root = match objective {
        GeneratorObjective::Adversarial => loss_g,
        GeneratorObjective::Regularizer => reg,
        GeneratorObjective::Combined => combined_generator_loss(&mut g, loss_g, reg, lambda, n.classes())?,
    };
    g.backward(root)?;
    Ok(GeneratorStep {
        loss_g: g.value(loss_g).item(),
        loss_reg: g.value(reg).item(),
        probs: g.value(ms.probs).clone(),
        grads: gen_leaves.iter().map(|&p| g.grad(p).clone()).collect(),
    })
}

/// Discriminator loss and gradients for one batch; the generator is constant.
pub fn discriminator_step(generator: &Mlp, discriminator: &Mlp, real: &Tensor, noise: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    let fake = generator.predict(noise)?;
    let mut g = Graph::new();
    let leaves = discriminator.leaves(&mut g, true);
    let x = g.constant(real.clone());
    let f = g.constant(fake);
    let d_real = discriminator.apply(&mut g, x, &leaves)?;
    let d_fake = discriminator.apply(&mut g, f, &leaves)?;
    let (loss_d, _) = relativistic_losses(&mut g, d_real, d_fake)?;
    g.backward(loss_d)?;
    Ok((g.value(loss_d).item(), leaves.iter().map(|&p| g.grad(p).clone()).collect()))
}

// ---------------------------------------------------------------------------
// Training loop

/// One row per completed statistics cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleRecord {
    pub cycle: usize,
    pub iter: usize,
    /// Losses averaged over the cycle's iterations.
    pub loss_d: f64,
    pub loss_g: f64,
    pub loss_reg: f64,
    /// Evaluation of the EMA generator.
    pub metrics: MetricsRecord,
    /// Effective class distribution after the cycle's update.
    pub n_dist: Vec<f64>,
    /// Fraction of each in-loop label among the cycle's generator batches.
    pub train_fracs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub generator: Mlp,
    pub ema_generator: Mlp,
    pub discriminator: Mlp,
    pub history: Vec<CycleRecord>,
    pub stats: EffectiveClassStats,
    pub iterations: usize,
}

fn check_finite(iteration: usize, loss_d: f64, loss_g: f64, loss_reg: f64) -> Result<()> {
    if loss_d.is_finite() && loss_g.is_finite() && loss_reg.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            iteration,
            loss_d,
            loss_g,
            loss_reg,
        })
    }
}

/// Runs the full training loop. The classifier must be frozen; it is only
/// read.
pub fn train(cfg: &TrainerConfig, data: &LabeledDataset, classifier: &Mlp, evaluator: &Evaluator) -> Result<TrainOutcome> {
    cfg.validate()?;
    if classifier.is_trainable() {
        return Err(Error::param("classifier", "must be frozen before training"));
    }
    if data.is_empty() {
        return Err(Error::param("data", "empty training set"));
    }
    let classes = classifier.output_dim();
    if classes != data.classes() {
        return Err(Error::param(
            "classifier",
            format!("{classes} outputs for a {}-class dataset", data.classes()),
        ));
    }
    let fixed = cfg.fixed_n_hat.is_some();
    let mut stats = match &cfg.fixed_n_hat {
        Some(n) if n.len() != classes => {
            return Err(Error::config("fixed_n_hat", format!("needs {classes} entries, got {}", n.len())));
        }
        Some(n) => EffectiveClassStats::fixed(n)?,
        None => EffectiveClassStats::new(classes, cfg.alpha, cfg.beta, cfg.cycle_len, 1.0)?,
    };

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(INIT_STREAM);
    let mut generator = build_generator(cfg.noise_dim, cfg.hidden, data.dim(), &mut init_rng)?;
    let mut discriminator = build_discriminator(data.dim(), cfg.hidden, &mut init_rng)?;
    let mut adam_g = Adam::new(&generator, cfg.lr_g, cfg.beta1, cfg.beta2);
    let mut adam_d = Adam::new(&discriminator, cfg.lr_d, cfg.beta1, cfg.beta2);
    let mut ema = Ema::new(&generator, cfg.ema_decay, cfg.ema_start_step());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM);

    let mut snapshot = stats.distribution()?;
    let mut history = Vec::new();
    let mut sums = [0.0f64; 3];
    let mut cycle_counts = vec![0.0; classes];
    let mut since_cycle = 0usize;

    for it in 1..=cfg.iterations {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let real = data.gather(&idx);

        let z = sample_noise(cfg.batch_size, cfg.noise_dim, &mut rng);
        let (loss_d, grads) = discriminator_step(&generator, &discriminator, &real, &z)?;
        let refs: Vec<&Tensor> = grads.iter().collect();
        adam_d.step(&mut discriminator, &refs);

        let z = sample_noise(cfg.batch_size, cfg.noise_dim, &mut rng);
        let lambda = if it <= cfg.reg_warmup { 0.0 } else { cfg.lambda };
        let step = generator_step(
            &generator,
            &discriminator,
            classifier,
            &real,
            &z,
            &snapshot,
            lambda,
            GeneratorObjective::Combined,
        )?;
        check_finite(it, loss_d, step.loss_g, step.loss_reg)?;
        let refs: Vec<&Tensor> = step.grads.iter().collect();
        adam_g.step(&mut generator, &refs);
        ema.update(&generator, it);

        let labels = step.probs.argmax_rows();
        for &y in &labels {
            cycle_counts[y] += 1.0;
        }
        match cfg.count_mode {
            CountMode::Argmax => stats.record_batch(&labels)?,
            CountMode::Soft => stats.record_soft(step.probs.data())?,
        }
        sums[0] += loss_d;
        sums[1] += step.loss_g;
        sums[2] += step.loss_reg;
        since_cycle += 1;

        if it % cfg.cycle_len == 0 || it == cfg.iterations {
            if fixed {
                stats.set_pending(&vec![0.0; classes])?;
            } else {
                stats.end_cycle();
                snapshot = stats.distribution()?;
            }
            let total: f64 = cycle_counts.iter().sum();
            let m = since_cycle as f64;
            history.push(CycleRecord {
                cycle: history.len() + 1,
                iter: it,
                loss_d: sums[0] / m,
                loss_g: sums[1] / m,
                loss_reg: sums[2] / m,
                metrics: evaluator.evaluate(ema.model(), history.len() as u64 + 1)?,
                n_dist: snapshot.probs().to_vec(),
                train_fracs: cycle_counts.iter().map(|c| c / total).collect(),
            });
            sums = [0.0; 3];
            cycle_counts.iter_mut().for_each(|c| *c = 0.0);
            since_cycle = 0;
        }
    }

    Ok(TrainOutcome {
        generator,
        ema_generator: ema.model().clone(),
        discriminator,
        history,
        stats,
        iterations: cfg.iterations,
    })
}

/// Class-0 trajectory of a run whose statistics are held at `n_hat_fixed`.
#[derive(Clone, Debug)]
pub struct FixedStatsTrajectory {
    /// Per-cycle fraction of generator batches labelled 0 by the in-loop
    /// classifier.
    pub class0: Vec<f64>,
    /// Index into `class0` of the last cycle before the regularizer starts.
    pub start_index: usize,
}

impl FixedStatsTrajectory {
    pub fn start(&self) -> f64 {
        self.class0[self.start_index]
    }

    pub fn end(&self) -> f64 {
        *self.class0.last().expect("nonempty trajectory")
    }
}

/// Trains with statistics fixed at `n_hat_fixed`. The first
/// `cfg.reg_warmup` iterations run without the regularizer; the class-0
/// fraction of the last warm-up cycle is the start value.
pub fn fixed_stats_experiment(
    cfg: &TrainerConfig,
    data: &LabeledDataset,
    classifier: &Mlp,
    evaluator: &Evaluator,
    n_hat_fixed: &[f64],
) -> Result<FixedStatsTrajectory> {
    if cfg.reg_warmup < cfg.cycle_len || !cfg.reg_warmup.is_multiple_of(cfg.cycle_len) {
        return Err(Error::config("reg_warmup", "must be a positive multiple of cycle_len"));
    }
    if cfg.reg_warmup >= cfg.iterations {
        return Err(Error::config("reg_warmup", "must be shorter than the run"));
    }
    let mut run_cfg = cfg.clone();
    run_cfg.fixed_n_hat = Some(n_hat_fixed.to_vec());
    let out = train(&run_cfg, data, classifier, evaluator)?;
    Ok(FixedStatsTrajectory {
        class0: out.history.iter().map(|r| r.train_fracs[0]).collect(),
        start_index: cfg.reg_warmup / cfg.cycle_len - 1,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Writes `manifest.txt` (layer sizes, activations, seed, iteration) and
/// `params.txt` (one parameter per line, shortest round-trip formatting).
pub fn export_checkpoint(dir: &Path, model: &Mlp, seed: u64, iteration: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let sizes: Vec<String> = model.sizes().iter().map(|s| s.to_string()).collect();
    let head = match model.head() {
        Head::Linear => "linear",
        Head::Softmax => "softmax",
    };
    let manifest = format!(
        "sizes={}\nhidden={}\nhead={}\nseed={seed}\niteration={iteration}\nparams={}\n",
        sizes.join(","),
        model.hidden().name(),
        head,
        model.num_params()
    );
    fs::write(dir.join("manifest.txt"), manifest)?;
    let mut body = String::new();
    for v in model.flat_params() {
        writeln!(body, "{v:?}").expect("write to string");
    }
    fs::write(dir.join("params.txt"), body)?;
    Ok(())
}

/// Reads a checkpoint written by [`export_checkpoint`]. Returns the model,
/// seed and iteration.
pub fn import_checkpoint(dir: &Path) -> Result<(Mlp, u64, usize)> {
    let kv = crate::harness::config::parse_key_values(&fs::read_to_string(dir.join("manifest.txt"))?)?;
    let get = |k: &str| kv.get(k).ok_or_else(|| Error::config(k, "missing from manifest"));
    let sizes = get("sizes")?
        .split(',')
        .map(|s| s.parse::<usize>().map_err(|e| Error::config("sizes", e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let hidden = match get("hidden")?.as_str() {
        "tanh" => Activation::Tanh,
        "leaky_relu" => Activation::LeakyRelu,
        "relu" => Activation::Relu,
        other => return Err(Error::config("hidden", format!("unknown activation `{other}`"))),
    };
    let head = match get("head")?.as_str() {
        "linear" => Head::Linear,
        "softmax" => Head::Softmax,
        other => return Err(Error::config("head", format!("unknown head `{other}`"))),
    };
    let seed = get("seed")?.parse().map_err(|e: std::num::ParseIntError| Error::config("seed", e.to_string()))?;
    let iteration = get("iteration")?
        .parse()
        .map_err(|e: std::num::ParseIntError| Error::config("iteration", e.to_string()))?;
    let flat = fs::read_to_string(dir.join("params.txt"))?
        .lines()
        .map(|l| l.trim().parse::<f64>().map_err(|e| Error::Parse(format!("params.txt: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Mlp::new(&sizes, hidden, head, &mut rng)?;
    model.set_flat_params(&flat)?;
    Ok((model, seed, iteration))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_balanced_test, make_longtail, LongTailSpec};
    use approx::assert_relative_eq;

    fn tiny_setup() -> (LabeledDataset, PretrainedClassifier, Evaluator) {
        let spec = LongTailSpec {
            n_max: 60,
            rho: 10.0,
            ..LongTailSpec::default()
        };
        let train = make_longtail(&spec).unwrap();
        let test = make_balanced_test(&spec, 30).unwrap();
        let clf = pretrain_classifier(
            &train,
            &test,
            &ClassifierConfig {
                epochs: 5,
                ..ClassifierConfig::default()
            },
        )
        .unwrap();
        let eval = Evaluator::new(clf.model.clone(), test.samples.clone(), 200, 0).unwrap();
        (train, clf, eval)
    }

    fn tiny_cfg() -> TrainerConfig {
        TrainerConfig {
            iterations: 60,
            cycle_len: 20,
            batch_size: 16,
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn equal_outputs_give_log_two() {
        let mut g = Graph::new();
        let r = g.constant(Tensor::matrix(3, 1, vec![0.3, -1.0, 2.0]));
        let f = g.constant(Tensor::matrix(3, 1, vec![0.3, -1.0, 2.0]));
        let (ld, lg) = relativistic_losses(&mut g, r, f).unwrap();
        assert_relative_eq!(g.value(ld).item(), 2f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(g.value(lg).item(), 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn relativistic_limits_and_swap() {
        let mut g = Graph::new();
        let r = g.constant(Tensor::matrix(2, 1, vec![400.0, 500.0]));
        let f = g.constant(Tensor::matrix(2, 1, vec![-400.0, -500.0]));
        let (ld, lg) = relativistic_losses(&mut g, r, f).unwrap();
        assert!(g.value(ld).item() < 1e-300);
        assert!(g.value(lg).item() > 799.0);
        assert!(g.value(lg).item().is_finite());

        let a = g.constant(Tensor::matrix(2, 1, vec![0.4, -0.2]));
        let b = g.constant(Tensor::matrix(2, 1, vec![1.5, 0.1]));
        let (ld1, lg1) = relativistic_losses(&mut g, a, b).unwrap();
        let (ld2, lg2) = relativistic_losses(&mut g, b, a).unwrap();
        assert_eq!(g.value(ld1).item(), g.value(lg2).item());
        assert_eq!(g.value(lg1).item(), g.value(ld2).item());
    }

    #[test]
    fn relativistic_rejects_unequal_batches() {
        let mut g = Graph::new();
        let r = g.constant(Tensor::matrix(3, 1, vec![0.0; 3]));
        let f = g.constant(Tensor::matrix(2, 1, vec![0.0; 2]));
        assert!(relativistic_losses(&mut g, r, f).is_err());
    }

    #[test]
    fn config_validation_names_the_key() {
        let bad = [
            TrainerConfig { lambda: -1.0, ..TrainerConfig::default() },
            TrainerConfig { batch_size: 0, ..TrainerConfig::default() },
            TrainerConfig { alpha: 0.0, ..TrainerConfig::default() },
            TrainerConfig { label_proposal: LabelProposal::InverseFrequency, ..TrainerConfig::default() },
        ];
        let keys = ["lambda", "batch_size", "alpha", "label_proposal"];
        for (cfg, key) in bad.iter().zip(keys) {
            match cfg.validate() {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key),
                other => panic!("expected config error for {key}, got {other:?}"),
            }
        }
        assert!(TrainerConfig::default().validate().is_ok());
        assert_eq!(TrainerConfig::default().ema_start_step(), 1200);
    }

    #[test]
    fn inverse_frequency_weights_favor_rare_classes() {
        let w = inverse_frequency_weights(&ClassDistribution::from_weights(&[3.0, 1.0]).unwrap());
        assert_relative_eq!(w[0], 0.25, epsilon = 1e-15);
        assert_relative_eq!(w[1], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn untrained_classifier_is_near_chance() {
        let spec = LongTailSpec {
            rho: 1.0,
            n_max: 50,
            ..LongTailSpec::default()
        };
        let train = make_longtail(&spec).unwrap();
        let test = make_balanced_test(&spec, 100).unwrap();
        let cfg = ClassifierConfig {
            epochs: 0,
            ..ClassifierConfig::default()
        };
        let c = pretrain_classifier(&train, &test, &cfg).unwrap();
        assert!(!c.model.is_trainable());
        assert!(c.report.overall < 0.5, "untrained accuracy {}", c.report.overall);
    }

    #[test]
    fn missing_class_is_reported_and_flagged() {
        let spec = LongTailSpec {
            rho: 1.0,
            n_max: 100,
            ..LongTailSpec::default()
        };
        let train = make_longtail(&spec).unwrap().without_class(7);
        let test = make_balanced_test(&spec, 50).unwrap();
        let c = pretrain_classifier(&train, &test, &ClassifierConfig::default()).unwrap();
        assert_eq!(c.report.absent_in_training, vec![7]);
        assert_eq!(c.report.tail_accuracy(), 0.0);
        assert!(c.report.divergence_warning());
    }

    #[test]
    fn combined_gradient_is_linear_in_parts() {
        let (train, clf, _) = tiny_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gen = build_generator(8, 16, 2, &mut rng).unwrap();
        let disc = build_discriminator(2, 16, &mut rng).unwrap();
        let real = train.gather(&(0..32).collect::<Vec<_>>());
        let z = sample_noise(32, 8, &mut rng);
        let n = ClassDistribution::from_weights(&[5.0, 4.0, 3.0, 2.0, 1.0, 1.0, 0.5, 0.1]).unwrap();
        let lambda = 5.0;
        let run = |obj| generator_step(&gen, &disc, &clf.model, &real, &z, &n, lambda, obj).unwrap();
        let adv = run(GeneratorObjective::Adversarial);
        let reg = run(GeneratorObjective::Regularizer);
        let all = run(GeneratorObjective::Combined);
        let scale = lambda / 8.0;
        for ((a, r), c) in adv.grads.iter().zip(&reg.grads).zip(&all.grads) {
            for ((&av, &rv), &cv) in a.data().iter().zip(r.data()).zip(c.data()) {
                let expect = av + scale * rv;
                assert!((cv - expect).abs() <= 1e-12 * expect.abs().max(1.0), "{cv} vs {expect}");
            }
        }
        assert_eq!(adv.loss_g, all.loss_g);
        assert_eq!(reg.loss_reg, all.loss_reg);
    }

    #[test]
    fn train_is_deterministic_and_leaves_classifier_alone() {
        let (train, clf, eval) = tiny_setup();
        let before = clf.model.clone();
        let a = super::train(&tiny_cfg(), &train, &clf.model, &eval).unwrap();
        let b = super::train(&tiny_cfg(), &train, &clf.model, &eval).unwrap();
        assert_eq!(clf.model, before);
        assert_eq!(a.history, b.history);
        assert_eq!(a.generator, b.generator);
        assert_eq!(a.history.len(), 3);
        assert_eq!(a.history.iter().map(|r| r.iter).collect::<Vec<_>>(), vec![20, 40, 60]);
        assert_eq!(a.stats.cycle(), 3);
    }

    #[test]
    fn snapshot_changes_only_at_cycle_boundaries() {
        let (train, clf, eval) = tiny_setup();
        let out = super::train(&tiny_cfg(), &train, &clf.model, &eval).unwrap();
        let n_hat = out.stats.n_hat().to_vec();
        let total: f64 = n_hat.iter().sum();
        let last = &out.history.last().unwrap().n_dist;
        for (a, b) in last.iter().zip(&n_hat) {
            assert_relative_eq!(*a, b / total, epsilon = 1e-15);
        }
        // pending counts were flushed by the final cycle
        assert!(out.stats.pending().iter().all(|c| *c == 0.0));
    }

    #[test]
    fn zero_lambda_matches_unregularized_path() {
        // The regularizer only enters through lambda; with lambda = 0 the
        // trajectory must not depend on the statistics.
        let (train, clf, eval) = tiny_setup();
        let base = TrainerConfig { lambda: 0.0, ..tiny_cfg() };
        let fixed = TrainerConfig {
            fixed_n_hat: Some(vec![1e6, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1e-6]),
            ..base.clone()
        };
        let a = super::train(&base, &train, &clf.model, &eval).unwrap();
        let b = super::train(&fixed, &train, &clf.model, &eval).unwrap();
        assert_eq!(a.generator, b.generator);
        assert_eq!(a.discriminator, b.discriminator);
    }

    #[test]
    fn ema_with_unit_decay_freezes_at_start() {
        let (train, clf, eval) = tiny_setup();
        let cfg = TrainerConfig {
            ema_decay: 1.0,
            ema_start: Some(20),
            iterations: 20,
            ..tiny_cfg()
        };
        let snap = super::train(&cfg, &train, &clf.model, &eval).unwrap();
        let longer = TrainerConfig { iterations: 60, ..cfg };
        let out = super::train(&longer, &train, &clf.model, &eval).unwrap();
        assert_eq!(out.ema_generator, snap.generator);
        assert_ne!(out.generator, snap.generator);
    }

    #[test]
    fn unfrozen_classifier_rejected() {
        let (train, clf, eval) = tiny_setup();
        let m = &clf.model;
        let open = Mlp::new(m.sizes(), m.hidden(), m.head(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(super::train(&tiny_cfg(), &train, &open, &eval).is_err());
    }

    #[test]
    fn fixed_stats_checks_warmup() {
        let (train, clf, eval) = tiny_setup();
        let cfg = TrainerConfig { reg_warmup: 30, ..tiny_cfg() };
        assert!(fixed_stats_experiment(&cfg, &train, &clf.model, &eval, &[1.0; 8]).is_err());
        let cfg = TrainerConfig { reg_warmup: 20, ..tiny_cfg() };
        let t = fixed_stats_experiment(&cfg, &train, &clf.model, &eval, &[1.0; 8]).unwrap();
        assert_eq!(t.class0.len(), 3);
        assert_eq!(t.start_index, 0);
        assert!(t.class0.iter().all(|f| (0.0..=1.0).contains(f)));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gen = build_generator(8, 16, 2, &mut rng).unwrap();
        export_checkpoint(dir.path(), &gen, 42, 1234).unwrap();
        let (back, seed, iteration) = import_checkpoint(dir.path()).unwrap();
        assert_eq!(back, gen);
        assert_eq!((seed, iteration), (42, 1234));
        let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(manifest.contains("sizes=8,16,16,2"));
    }
}
