//! Effective class frequency with exponential forgetting.
//!
//! Counts of generated labels accumulate over a cycle. At the cycle boundary
//! `n_hat_k <- (1 - alpha) * n_hat_k + beta * c_k`, and the normalized
//! `n_hat` is the effective class distribution that weights the regularizer.

use crate::error::{Error, Result};

/// Lower clamp applied to every `n_hat_k` after a cycle update.
pub const N_HAT_FLOOR: f64 = 1e-8;

/// A probability vector over class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution {
    p: Vec<f64>,
}

impl ClassDistribution {
    /// Normalizes nonnegative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::UndefinedDistribution("no classes".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::UndefinedDistribution(format!("weights must be finite and >= 0: {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::UndefinedDistribution("all weights are zero".into()));
        }
        Ok(ClassDistribution {
            p: weights.iter().map(|w| w / total).collect(),
        })
    }

    pub fn uniform(classes: usize) -> Self {
        ClassDistribution {
            p: vec![1.0 / classes as f64; classes],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    pub fn classes(&self) -> usize {
        self.p.len()
    }
}

/// How generated samples contribute to the per-cycle counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CountMode {
    /// One count for the argmax label of each sample.
    #[default]
    Argmax,
    /// Each sample adds its full softmax vector.
    Soft,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveClassStats {
    n_hat: Vec<f64>,
    alpha: f64,
    beta: f64,
    cycle_len: usize,
    pending: Vec<f64>,
    cycle: usize,
}

impl EffectiveClassStats {
    /// Starts every class at `initial` (> 0).
    pub fn new(classes: usize, alpha: f64, beta: f64, cycle_len: usize, initial: f64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::param("classes", "need at least one class"));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::param("alpha", format!("forgetting factor must be in (0, 1], got {alpha}")));
        }
        if !(beta > 0.0) {
            return Err(Error::param("beta", format!("mixing factor must be > 0, got {beta}")));
        }
        if cycle_len == 0 {
            return Err(Error::param("cycle_len", "must be >= 1"));
        }
        if !(initial > 0.0) {
            return Err(Error::param("initial", format!("must be > 0, got {initial}")));
        }
        Ok(EffectiveClassStats {
            n_hat: vec![initial; classes],
            alpha,
            beta,
            cycle_len,
            pending: vec![0.0; classes],
            cycle: 0,
        })
    }

    /// Fixed statistics, never updated by the trainer.
    pub fn fixed(n_hat: &[f64]) -> Result<Self> {
        if n_hat.is_empty() || n_hat.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::param("n_hat", format!("fixed statistics must be > 0: {n_hat:?}")));
        }
        let mut s = Self::new(n_hat.len(), 1.0, 1.0, 1, 1.0)?;
        s.n_hat = n_hat.to_vec();
        Ok(s)
    }

    pub fn classes(&self) -> usize {
        self.n_hat.len()
    }

    pub fn n_hat(&self) -> &[f64] {
        &self.n_hat
    }

    pub fn pending(&self) -> &[f64] {
        &self.pending
    }

    pub fn cycle(&self) -> usize {
        self.cycle
    }

    pub fn cycle_len(&self) -> usize {
        self.cycle_len
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Overwrites `n_hat` directly.
    pub fn set_n_hat(&mut self, n_hat: &[f64]) -> Result<()> {
        if n_hat.len() != self.classes() {
            return Err(Error::param("n_hat", "length differs from class count"));
        }
        self.n_hat = n_hat.to_vec();
        Ok(())
    }

    pub fn set_pending(&mut self, pending: &[f64]) -> Result<()> {
        if pending.len() != self.classes() {
            return Err(Error::param("pending", "length differs from class count"));
        }
        self.pending = pending.to_vec();
        Ok(())
    }

    pub fn record_batch(&mut self, labels: &[usize]) -> Result<()> {
        let k = self.classes();
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        for &y in labels {
            self.pending[y] += 1.0;
        }
        Ok(())
    }

    /// Adds soft counts: one probability row of length `K` per sample.
    pub fn record_soft(&mut self, probs: &[f64]) -> Result<()> {
        let k = self.classes();
        if !probs.len().is_multiple_of(k) {
            return Err(Error::param("probs", format!("length {} is not a multiple of {k}", probs.len())));
        }
        for row in probs.chunks(k) {
            for (p, v) in self.pending.iter_mut().zip(row) {
                *p += v;
            }
        }
        Ok(())
    }

    /// Applies the forgetting update, clears the pending counts and advances
    /// the cycle index. Every `n_hat_k` is clamped at [`N_HAT_FLOOR`].
    pub fn end_cycle(&mut self) {
        for (n, c) in self.n_hat.iter_mut().zip(&mut self.pending) {
            *n = ((1.0 - self.alpha) * *n + self.beta * *c).max(N_HAT_FLOOR);
            *c = 0.0;
        }
        self.cycle += 1;
    }

    pub fn distribution(&self) -> Result<ClassDistribution> {
        ClassDistribution::from_weights(&self.n_hat)
    }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn stays_positive(init in prop::collection::vec(1e-3f64..1e3, 2..8), alpha in 0.01f64..0.99, cycles in 1usize..30) {
            let mut s = EffectiveClassStats::new(init.len(), alpha, 1.0, 1, 1.0).unwrap();
            s.set_n_hat(&init).unwrap();
            for c in 0..cycles {
                // only ever generate class 0
                s.record_batch(&vec![0; c % 3]).unwrap();
                s.end_cycle();
                prop_assert!(s.n_hat().iter().all(|v| *v > 0.0));
            }
        }

        #[test]
        fn order_independent_within_cycle(labels in prop::collection::vec(0usize..4, 0..40)) {
            let mut a = EffectiveClassStats::new(4, 0.5, 1.0, 1, 1.0).unwrap();
            let mut b = a.clone();
            a.record_batch(&labels).unwrap();
            let mut rev = labels.clone();
            rev.reverse();
            for chunk in rev.chunks(3) {
                b.record_batch(chunk).unwrap();
            }
            a.end_cycle();
            b.end_cycle();
            prop_assert_eq!(a, b);
        }
    }
}
