//! Evaluation metrics: label balance, sample quality, and downstream
//! classifier accuracy.
//!
//! KL divergences are in nats. The Fréchet distance is computed on raw data
//! coordinates, so its values are not comparable with image-feature scores.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::diffkernel::Tensor;
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::trainer::{fit_classifier, generate, ClassifierConfig};

/// Jitter added to both covariances when either is singular.
pub const FRECHET_JITTER: f64 = 1e-10;

pub fn label_counts(labels: &[usize], classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0; classes];
    for &y in labels {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        counts[y] += 1;
    }
    Ok(counts)
}

/// `sum_k q_k log(q_k K)` for the empirical label frequencies `q`, with
/// `0 log 0 = 0`.
pub fn kl_to_uniform(labels: &[usize], classes: usize) -> Result<f64> {
    let counts: Vec<f64> = label_counts(labels, classes)?.into_iter().map(|c| c as f64).collect();
    kl_from_counts(&counts)
}

pub fn kl_from_counts(counts: &[f64]) -> Result<f64> {
    let total: f64 = counts.iter().sum();
    if !(total > 0.0) {
        return Err(Error::UndefinedDistribution("no labels to count".into()));
    }
    let k = counts.len() as f64;
    Ok(counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let q = c / total;
            q * (q * k).ln()
        })
        .sum::<f64>()
        .max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrechetResult {
    pub distance: f64,
    /// Whether jitter was needed because a covariance was singular.
    pub jittered: bool,
}

/// Sample mean and unbiased covariance of the rows of `x`.
pub fn gaussian_moments(x: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, d) = (x.rows(), x.cols());
    if n < d + 1 {
        return Err(Error::param("samples", format!("need at least {} points in {d} dimensions, got {n}", d + 1)));
    }
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = DVector::from_iterator(d, m.column_iter().map(|c| c.sum() / n as f64));
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mean, cov))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn is_singular(m: &DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let max = eig.eigenvalues.amax();
    eig.eigenvalues.min() <= 1e-14 * max.max(f64::MIN_POSITIVE)
}

/// 2-Wasserstein distance between two Gaussians given their moments.
pub fn frechet_from_moments(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> FrechetResult {
    let d = s1.nrows();
    let jittered = is_singular(s1) || is_singular(s2);
    let (s1, s2) = if jittered {
        let j = DMatrix::identity(d, d) * FRECHET_JITTER;
        (s1 + &j, s2 + &j)
    } else {
        (s1.clone(), s2.clone())
    };
    let r1 = sqrt_psd(&s1);
    let cross = sqrt_psd(&(&r1 * &s2 * &r1));
    let mean_term = (mu1 - mu2).norm_squared();
    let trace_term = s1.trace() + s2.trace() - 2.0 * cross.trace();
    FrechetResult {
        distance: (mean_term + trace_term).max(0.0),
        jittered,
    }
}

pub fn frechet_gaussian(real: &Tensor, generated: &Tensor) -> Result<FrechetResult> {
    if real.cols() != generated.cols() {
        return Err(Error::Shape {
            op: "frechet_gaussian",
            detail: format!("dimensions {} and {} differ", real.cols(), generated.cols()),
        });
    }
    let (m1, s1) = gaussian_moments(real)?;
    let (m2, s2) = gaussian_moments(generated)?;
    Ok(frechet_from_moments(&m1, &s1, &m2, &s2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub kl_uniform: f64,
    pub frechet: f64,
    pub frechet_jittered: bool,
    /// Only computed on request; it trains a classifier.
    pub clf_accuracy: Option<f64>,
    /// Annotated fraction of each class among generated samples.
    pub class_fracs: Vec<f64>,
}

/// Scores generator snapshots against a fixed annotator and reference set.
#[derive(Clone, Debug)]
pub struct Evaluator {
    annotator: Mlp,
    reference: Tensor,
    samples: usize,
    seed: u64,
}

impl Evaluator {
    /// `annotator` should be trained on balanced data; `reference` is the
    /// real sample set for the Fréchet distance.
    pub fn new(annotator: Mlp, reference: Tensor, samples: usize, seed: u64) -> Result<Self> {
        if samples <= reference.cols() {
            return Err(Error::param("samples", "too few evaluation samples for the data dimension"));
        }
        Ok(Evaluator {
            annotator,
            reference,
            samples,
            seed,
        })
    }

    pub fn annotator(&self) -> &Mlp {
        &self.annotator
    }

    /// Metrics for `generator`. `tag` selects an independent noise stream, so
    /// evaluation never touches the training random state.
    pub fn evaluate(&self, generator: &Mlp, tag: u64) -> Result<MetricsRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1000 + tag);
        let x = generate(generator, self.samples, &mut rng)?;
        self.evaluate_samples(&x)
    }

    pub fn evaluate_samples(&self, x: &Tensor) -> Result<MetricsRecord> {
        let k = self.annotator.output_dim();
        let labels = self.annotator.classify(x)?;
        let counts = label_counts(&labels, k)?;
        let fr = frechet_gaussian(&self.reference, x)?;
        Ok(MetricsRecord {
            kl_uniform: kl_to_uniform(&labels, k)?,
            frechet: fr.distance,
            frechet_jittered: fr.jittered,
            clf_accuracy: None,
            class_fracs: counts.iter().map(|&c| c as f64 / labels.len() as f64).collect(),
        })
    }
}

/// Anything that can emit samples in data space.
pub trait SampleSource {
    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor>;
}

impl SampleSource for Mlp {
    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        generate(self, n, rng)
    }
}

/// Draws rows of a fixed set with replacement.
#[derive(Clone, Debug)]
pub struct Resampler(pub Tensor);

impl SampleSource for Resampler {
    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let rows = self.0.rows();
        if rows == 0 {
            return Err(Error::param("resampler", "empty sample set"));
        }
        let d = self.0.cols();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(self.0.row_slice(rng.random_range(0..rows)));
        }
        Ok(Tensor::matrix(n, d, data))
    }
}

/// Always the same point: a fully collapsed generator.
#[derive(Clone, Debug)]
pub struct PointMass(pub Vec<f64>);

impl SampleSource for PointMass {
    fn sample(&self, n: usize, _rng: &mut ChaCha8Rng) -> Result<Tensor> {
        Ok(Tensor::matrix(n, self.0.len(), self.0.repeat(n)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CasBudget {
    pub samples: usize,
    pub classifier: ClassifierConfig,
    pub seed: u64,
}

impl Default for CasBudget {
    fn default() -> Self {
        CasBudget {
            samples: 2000,
            classifier: ClassifierConfig {
                epochs: 20,
                ..ClassifierConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CasReport {
    pub accuracy: f64,
    /// Classes the labeler never assigned to a generated sample.
    pub missing_classes: Vec<usize>,
}

/// Trains a fresh classifier on generated samples labelled by `labeler` and
/// returns its accuracy on `real_test`. Classes that never occur among the
/// generated labels are masked out of the fresh classifier's predictions:
/// it has seen no evidence for them, and any hit on them would be luck.
pub fn classifier_accuracy_score(
    source: &dyn SampleSource,
    labeler: &Mlp,
    real_test: &LabeledDataset,
    budget: &CasBudget,
) -> Result<CasReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    let x = source.sample(budget.samples, &mut rng)?;
    let k = labeler.output_dim();
    let labels = labeler.classify(&x)?;
    let counts = label_counts(&labels, k)?;
    let model = fit_classifier(&x, &labels, k, &budget.classifier)?;
    let probs = model.predict(&real_test.samples)?;
    let mut correct = 0usize;
    for (r, &y) in real_test.labels.iter().enumerate() {
        let pred = probs
            .row_slice(r)
            .iter()
            .enumerate()
            .filter(|(c, _)| counts[*c] > 0)
            .fold((0, f64::NEG_INFINITY), |best, (c, &p)| if p > best.1 { (c, p) } else { best })
            .0;
        if pred == y {
            correct += 1;
        }
    }
    Ok(CasReport {
        accuracy: correct as f64 / real_test.len().max(1) as f64,
        missing_classes: (0..k).filter(|&c| counts[c] == 0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_balanced_test, make_longtail, LongTailSpec};
    use crate::trainer::pretrain_classifier;
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn kl_examples() {
        let uniform: Vec<usize> = (0..100).map(|i| i % 4).collect();
        assert_eq!(kl_to_uniform(&uniform, 4).unwrap(), 0.0);
        assert_relative_eq!(kl_to_uniform(&[2; 10], 4).unwrap(), 4f64.ln(), epsilon = 1e-15);
        let v = kl_to_uniform(&[0, 0, 0, 1], 2).unwrap();
        assert_relative_eq!(v, 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(v, 0.1308121, epsilon = 1e-7);
        assert!(kl_to_uniform(&[], 3).is_err());
        assert!(kl_to_uniform(&[3], 3).is_err());
    }

    #[test]
    fn kl_is_permutation_invariant() {
        let labels = [0, 0, 1, 2, 2, 2, 3];
        let perm = [2, 3, 0, 1];
        let mapped: Vec<usize> = labels.iter().map(|&y| perm[y]).collect();
        assert_relative_eq!(kl_to_uniform(&labels, 4).unwrap(), kl_to_uniform(&mapped, 4).unwrap(), max_relative = 1e-14);
    }

    #[test]
    fn frechet_one_dimensional_closed_form() {
        let r = frechet_from_moments(
            &DVector::from_vec(vec![0.0]),
            &DMatrix::from_element(1, 1, 1.0),
            &DVector::from_vec(vec![1.0]),
            &DMatrix::from_element(1, 1, 4.0),
        );
        assert_relative_eq!(r.distance, 2.0, epsilon = 1e-12);
        assert!(!r.jittered);
    }

    #[test]
    fn frechet_identical_and_translated() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = Normal::new(0.0, 1.5).unwrap();
        let data: Vec<f64> = (0..400).map(|_| n.sample(&mut rng)).collect();
        let a = Tensor::matrix(200, 2, data);
        assert!(frechet_gaussian(&a, &a).unwrap().distance < 1e-8);
        let shifted: Vec<f64> = a.data().chunks(2).flat_map(|r| [r[0] + 3.0, r[1] - 4.0]).collect();
        let b = Tensor::matrix(200, 2, shifted);
        assert_relative_eq!(frechet_gaussian(&a, &b).unwrap().distance, 25.0, epsilon = 1e-8);
        let ab = frechet_gaussian(&a, &b).unwrap().distance;
        let ba = frechet_gaussian(&b, &a).unwrap().distance;
        assert_relative_eq!(ab, ba, epsilon = 1e-10);
    }

    #[test]
    fn frechet_sampled_gaussians_near_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..20000).map(|_| Normal::new(0.0, 1.0).unwrap().sample(&mut rng)).collect();
        let b: Vec<f64> = (0..20000).map(|_| Normal::new(1.0, 2.0).unwrap().sample(&mut rng)).collect();
        let d = frechet_gaussian(&Tensor::matrix(20000, 1, a), &Tensor::matrix(20000, 1, b)).unwrap();
        assert!((d.distance - 2.0).abs() < 0.1, "got {}", d.distance);
    }

    #[test]
    fn frechet_singular_covariance_is_jittered() {
        let line: Vec<f64> = (0..50).flat_map(|i| [i as f64, 2.0 * i as f64]).collect();
        let a = Tensor::matrix(50, 2, line);
        let r = frechet_gaussian(&a, &a).unwrap();
        assert!(r.jittered);
        assert!(r.distance.is_finite() && r.distance < 1e-6);
        let point = PointMass(vec![1.0, 1.0]).sample(5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(frechet_gaussian(&a, &point).unwrap().jittered);
    }

    #[test]
    fn frechet_needs_enough_points() {
        let a = Tensor::matrix(2, 2, vec![0.0, 1.0, 2.0, 3.0]);
        assert!(frechet_gaussian(&a, &a).is_err());
    }

    #[test]
    fn accuracy_score_references() {
        let spec = LongTailSpec {
            rho: 1.0,
            n_max: 150,
            ..LongTailSpec::default()
        };
        let train = make_longtail(&spec).unwrap();
        let test = make_balanced_test(&spec, 100).unwrap();
        let labeler = pretrain_classifier(&train, &test, &ClassifierConfig::default()).unwrap();
        let budget = CasBudget::default();
        let real = classifier_accuracy_score(&Resampler(train.samples.clone()), &labeler.model, &test, &budget).unwrap();
        let collapsed = classifier_accuracy_score(&PointMass(spec.mean(0)), &labeler.model, &test, &budget).unwrap();
        assert!(real.accuracy >= 0.9, "resampler score {}", real.accuracy);
        assert!(real.missing_classes.is_empty());
        assert_relative_eq!(collapsed.accuracy, 1.0 / 8.0, epsilon = 1e-12);
        assert_eq!(collapsed.missing_classes.len(), 7);
        assert!(real.accuracy > collapsed.accuracy);
    }
}
