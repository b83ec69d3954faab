//! Synthetic long-tailed Gaussian-mixture datasets.
//!
//! Class `k` of `K` holds `round(n_max * rho^(-k/(K-1)))` samples (at least
//! one), drawn from an isotropic Gaussian whose mean sits on a circle in the
//! first two coordinates. Training and test sets use distinct ChaCha streams
//! of the same seed.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffkernel::Tensor;
use crate::error::{Error, Result};

const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct LongTailSpec {
    pub classes: usize,
    /// Imbalance ratio: largest over smallest class count.
    pub rho: f64,
    pub n_max: usize,
    pub dim: usize,
    pub radius: f64,
    pub std: f64,
    pub seed: u64,
}

impl Default for LongTailSpec {
    fn default() -> Self {
        LongTailSpec {
            classes: 8,
            rho: 100.0,
            n_max: 500,
            dim: 2,
            radius: 4.0,
            std: 0.5,
            seed: 0,
        }
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

impl LongTailSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::param("classes", format!("need at least 2 classes, got {}", self.classes)));
        }
        if !(self.rho >= 1.0) || !self.rho.is_finite() {
            return Err(Error::param("rho", format!("imbalance ratio must be >= 1, got {}", self.rho)));
        }
        if self.dim < 2 {
            return Err(Error::param("dim", format!("mixture geometry needs dim >= 2, got {}", self.dim)));
        }
        if !(self.std > 0.0) || !(self.radius >= 0.0) {
            return Err(Error::param("std", "component std must be > 0 and radius >= 0"));
        }
        if round_half_up(self.n_max as f64 / self.rho) == 0 {
            return Err(Error::param(
                "n_max",
                format!("n_max={} with rho={} rounds the tail class to zero samples", self.n_max, self.rho),
            ));
        }
        Ok(())
    }

    /// Per-class counts of the exponential profile.
    pub fn counts(&self) -> Result<Vec<usize>> {
        self.validate()?;
        let last = (self.classes - 1) as f64;
        Ok((0..self.classes)
            .map(|k| {
                let n = self.n_max as f64 / self.rho.powf(k as f64 / last);
                round_half_up(n).max(1)
            })
            .collect())
    }

    /// Component mean of class `k`.
    pub fn mean(&self, k: usize) -> Vec<f64> {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / self.classes as f64;
        let mut m = vec![0.0; self.dim];
        m[0] = self.radius * angle.cos();
        m[1] = self.radius * angle.sin();
        m
    }

    /// Same geometry with every class at `n_max` samples.
    pub fn balanced(&self) -> Self {
        LongTailSpec { rho: 1.0, ..self.clone() }
    }

    fn sample(&self, counts: &[usize], stream: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let n: usize = counts.iter().sum();
        let mut samples = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for (k, &count) in counts.iter().enumerate() {
            let mean = self.mean(k);
            for _ in 0..count {
                for m in &mean {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    samples.push(m + self.std * z);
                }
                labels.push(k);
            }
        }
        LabeledDataset {
            samples: Tensor::matrix(n, self.dim, samples),
            labels,
            counts: counts.to_vec(),
            meta: DatasetMeta {
                classes: self.classes,
                rho: self.rho,
                n_max: self.n_max,
                dim: self.dim,
                seed: self.seed,
                counts: counts.to_vec(),
            },
        }
    }
}

/// Provenance written next to an exported dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub classes: usize,
    pub rho: f64,
    pub n_max: usize,
    pub dim: usize,
    pub seed: u64,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub counts: Vec<usize>,
    pub meta: DatasetMeta,
}

pub fn make_longtail(spec: &LongTailSpec) -> Result<LabeledDataset> {
    let counts = spec.counts()?;
    Ok(spec.sample(&counts, TRAIN_STREAM))
}

pub fn make_balanced_test(spec: &LongTailSpec, per_class: usize) -> Result<LabeledDataset> {
    spec.validate()?;
    if per_class == 0 {
        return Err(Error::param("per_class", "need at least one sample per class"));
    }
    let mut ds = spec.sample(&vec![per_class; spec.classes], TEST_STREAM);
    ds.meta.rho = 1.0;
    ds.meta.n_max = per_class;
    Ok(ds)
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    /// Rows at `indices`, in order.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.samples.row_slice(i));
        }
        Tensor::matrix(indices.len(), d, data)
    }

    /// Empirical mean of each class; `None` for absent classes.
    pub fn class_means(&self) -> Vec<Option<Vec<f64>>> {
        let d = self.dim();
        let mut sums = vec![vec![0.0; d]; self.classes()];
        for (i, &y) in self.labels.iter().enumerate() {
            for (s, v) in sums[y].iter_mut().zip(self.samples.row_slice(i)) {
                *s += v;
            }
        }
        sums.into_iter()
            .zip(&self.counts)
            .map(|(s, &c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
            .collect()
    }

    /// Drops every sample of class `k` (counts keep the class slot at 0).
    pub fn without_class(&self, k: usize) -> Self {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] != k).collect();
        let mut counts = self.counts.clone();
        counts[k] = 0;
        let mut meta = self.meta.clone();
        meta.counts = counts.clone();
        LabeledDataset {
            samples: self.gather(&keep),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            counts,
            meta,
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.dim();
        let header: Vec<String> = (0..d).map(|j| format!("x{j}")).chain(["label".to_string()]).collect();
        writeln!(w, "{}", header.join(","))?;
        for (i, y) in self.labels.iter().enumerate() {
            let mut line = String::new();
            for v in self.samples.row_slice(i) {
                write!(line, "{v},").expect("string write");
            }
            writeln!(w, "{line}{y}")?;
        }
        Ok(())
    }

    /// Reads a dataset written by [`write_csv`](Self::write_csv).
    pub fn read_csv<R: Read>(r: R, classes: usize) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty dataset csv".into()))??;
        let cols: Vec<&str> = header.trim_end().split(',').collect();
        if cols.last() != Some(&"label") || cols.len() < 2 {
            return Err(Error::Parse(format!("bad dataset header `{header}`")));
        }
        let d = cols.len() - 1;
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        let mut counts = vec![0; classes];
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 1 {
                return Err(Error::Parse(format!("row {}: expected {} fields", lineno + 2, d + 1)));
            }
            for f in &fields[..d] {
                samples.push(f.parse::<f64>().map_err(|e| Error::Parse(format!("row {}: {e}", lineno + 2)))?);
            }
            let y: usize = fields[d]
                .parse()
                .map_err(|e| Error::Parse(format!("row {}: label: {e}", lineno + 2)))?;
            if y >= classes {
                return Err(Error::LabelOutOfRange { label: y, classes });
            }
            counts[y] += 1;
            labels.push(y);
        }
        let n = labels.len();
        Ok(LabeledDataset {
            samples: Tensor::matrix(n, d, samples),
            labels,
            meta: DatasetMeta {
                classes,
                rho: f64::NAN,
                n_max: counts.iter().copied().max().unwrap_or(0),
                dim: d,
                seed: 0,
                counts: counts.clone(),
            },
            counts,
        })
    }

    /// Writes `<stem>.csv` and `<stem>.meta`.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<()> {
        let f = std::fs::File::create(dir.join(format!("{stem}.csv")))?;
        self.write_csv(std::io::BufWriter::new(f))?;
        std::fs::write(dir.join(format!("{stem}.meta")), self.meta.to_text())?;
        Ok(())
    }

    pub fn import(dir: &Path, stem: &str) -> Result<Self> {
        let meta = DatasetMeta::from_text(&std::fs::read_to_string(dir.join(format!("{stem}.meta")))?)?;
        let f = std::fs::File::open(dir.join(format!("{stem}.csv")))?;
        let mut ds = Self::read_csv(f, meta.classes)?;
        if ds.counts != meta.counts {
            return Err(Error::Parse(format!(
                "counts in csv {:?} disagree with metadata {:?}",
                ds.counts, meta.counts
            )));
        }
        ds.meta = meta;
        Ok(ds)
    }
}

impl DatasetMeta {
    pub fn to_text(&self) -> String {
        let counts: Vec<String> = self.counts.iter().map(|c| c.to_string()).collect();
        format!(
            "K={}\nrho={}\nn_max={}\ndim={}\nseed={}\ncounts={}\n",
            self.classes,
            self.rho,
            self.n_max,
            self.dim,
            self.seed,
            counts.join(",")
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = crate::harness::config::parse_key_values(text)?;
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::config(k, "missing"));
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|e| Error::config(k, format!("{e}")))
        };
        let counts = get("counts")?
            .split(',')
            .map(|c| c.trim().parse::<usize>().map_err(|e| Error::config("counts", format!("{e}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(DatasetMeta {
            classes: num("K")?,
            rho: get("rho")?.parse().map_err(|e| Error::config("rho", format!("{e}")))?,
            n_max: num("n_max")?,
            dim: num("dim")?,
            seed: get("seed")?.parse().map_err(|e| Error::config("seed", format!("{e}")))?,
            counts,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(classes: usize, rho: f64, n_max: usize) -> LongTailSpec {
        LongTailSpec {
            classes,
            rho,
            n_max,
            ..LongTailSpec::default()
        }
    }

    #[test]
    fn cifar_style_profile() {
        let counts = spec(10, 100.0, 500).counts().unwrap();
        // n_max * 100^(-k/9), rounded half up
        let expected: Vec<usize> = (0..10)
            .map(|k| (500.0 * 100f64.powf(-(k as f64) / 9.0) + 0.5).floor() as usize)
            .collect();
        assert_eq!(counts, expected);
        assert_eq!(counts[0], 500);
        assert_eq!(counts[9], 5);
        assert_eq!(counts[0] / counts[9], 100);
    }

    #[test]
    fn balanced_profile() {
        assert_eq!(spec(6, 1.0, 40).counts().unwrap(), vec![40; 6]);
    }

    #[test]
    fn tail_of_one_sample_accepted() {
        let counts = spec(5, 100.0, 50).counts().unwrap();
        assert_eq!(counts[4], 1);
        assert_eq!(counts[0], 50);
    }

    #[test]
    fn tail_rounding_to_zero_rejected() {
        assert!(matches!(spec(5, 100.0, 49).counts(), Err(Error::InvalidParam { name: "n_max", .. })));
        assert!(spec(1, 1.0, 10).validate().is_err());
        assert!(spec(3, 0.5, 10).validate().is_err());
    }

    #[test]
    fn balanced_test_set() {
        let ds = make_balanced_test(&spec(8, 100.0, 500), 100).unwrap();
        assert_eq!(ds.len(), 800);
        assert_eq!(ds.counts, vec![100; 8]);
        assert!(make_balanced_test(&spec(8, 100.0, 500), 0).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let s = spec(4, 10.0, 50);
        assert_eq!(make_longtail(&s).unwrap(), make_longtail(&s).unwrap());
        assert_eq!(make_balanced_test(&s, 7).unwrap(), make_balanced_test(&s, 7).unwrap());
        let other = LongTailSpec { seed: 1, ..s.clone() };
        assert_ne!(make_longtail(&s).unwrap().samples, make_longtail(&other).unwrap().samples);
    }

    #[test]
    fn train_and_test_streams_share_no_draws() {
        let s = spec(4, 1.0, 200);
        let train = make_longtail(&s).unwrap();
        let test = make_balanced_test(&s, 200).unwrap();
        let mut a: Vec<u64> = train.samples.data().iter().map(|v| v.to_bits()).collect();
        let b: std::collections::HashSet<u64> = test.samples.data().iter().map(|v| v.to_bits()).collect();
        a.retain(|v| b.contains(v));
        assert!(a.is_empty(), "{} shared values", a.len());
    }

    #[test]
    fn class_means_near_components() {
        let s = spec(8, 100.0, 500);
        let ds = make_longtail(&s).unwrap();
        for (k, m) in ds.class_means().into_iter().enumerate() {
            let m = m.unwrap();
            let bound = 4.0 * s.std / (ds.counts[k] as f64).sqrt();
            for (a, b) in m.iter().zip(s.mean(k)) {
                assert!((a - b).abs() <= bound, "class {k}: {a} vs {b} (bound {bound})");
            }
        }
    }

    #[test]
    fn csv_and_meta_roundtrip() {
        let ds = make_longtail(&spec(3, 4.0, 12)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.export(dir.path(), "train").unwrap();
        let text = std::fs::read_to_string(dir.path().join("train.csv")).unwrap();
        assert!(text.starts_with("x0,x1,label\n"));
        let back = LabeledDataset::import(dir.path(), "train").unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn csv_rejects_bad_label() {
        let csv = "x0,x1,label\n0.0,1.0,5\n";
        assert!(matches!(
            LabeledDataset::read_csv(csv.as_bytes(), 3),
            Err(Error::LabelOutOfRange { label: 5, classes: 3 })
        ));
    }

    #[test]
    fn without_class_drops_samples() {
        let ds = make_longtail(&spec(3, 2.0, 10)).unwrap();
        let cut = ds.without_class(2);
        assert_eq!(cut.counts[2], 0);
        assert!(cut.labels.iter().all(|&y| y != 2));
        assert_eq!(cut.len(), ds.len() - ds.counts[2]);
    }
}
