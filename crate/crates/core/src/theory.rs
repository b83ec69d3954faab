//! Optimality theory of the weighted-entropy regularizer.
//!
//! Minimizing `sum_k p_k log(p_k) / N_k` over the probability simplex has the
//! stationary point `p*_k = exp(lambda * N_k - 1)`, with `lambda` the root of
//! `sum_k exp(lambda * N_k - 1) = 1`. This module solves for that point in
//! closed form, evaluates the per-class upper bound
//! `p_k <= exp(-K (log K - 1) N_k / sum N - 1)`, and cross-checks both against
//! an iterative minimizer that knows nothing about the closed form.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result};

const MAX_BISECTION_ITERS: usize = 4000;

#[derive(Clone, Debug, PartialEq)]
pub struct StationarySolution {
    pub lambda: f64,
    pub p_star: Vec<f64>,
    pub objective_value: f64,
    pub iterations: usize,
}

fn check_positive(n: &[f64]) -> Result<()> {
    if n.is_empty() {
        return Err(Error::param("n", "empty distribution"));
    }
    if let Some(bad) = n.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::param("n", format!("every N_k must be finite and > 0, got {bad}")));
    }
    Ok(())
}

fn residual(lambda: f64, n: &[f64]) -> f64 {
    n.iter().map(|&v| (lambda * v - 1.0).exp()).sum::<f64>() - 1.0
}

/// `lambda - sum_k exp(lambda N_k - 1) / N_k`: the optimal value at the
/// stationary point.
pub fn optimal_value_formula(lambda: f64, n: &[f64]) -> f64 {
    lambda - n.iter().map(|&v| (lambda * v - 1.0).exp() / v).sum::<f64>()
}

/// Bisection on the strictly increasing residual
/// `sum_k exp(lambda N_k - 1) - 1`.
pub fn solve_lambda(n: &[f64], tol: f64) -> Result<StationarySolution> {
    check_positive(n)?;
    if !(tol > 0.0) {
        return Err(Error::param("tol", format!("must be > 0, got {tol}")));
    }
    let k = n.len() as f64;
    let (mut lo, mut hi) = (-10.0 * k, 10.0 * k);
    let mut iterations = 0;
    while residual(lo, n) > 0.0 {
        lo *= 2.0;
        iterations += 1;
        if !lo.is_finite() {
            return Err(Error::NoConvergence {
                iterations,
                residual: residual(lo, n),
            });
        }
    }
    while residual(hi, n) < 0.0 {
        hi *= 2.0;
        iterations += 1;
    }
    let mut lambda = 0.5 * (lo + hi);
    let mut r = residual(lambda, n);
    while r.abs() > tol {
        if iterations >= MAX_BISECTION_ITERS {
            return Err(Error::NoConvergence { iterations, residual: r });
        }
        if r > 0.0 {
            hi = lambda;
        } else {
            lo = lambda;
        }
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            // bracket exhausted at machine precision
            if r.abs() > tol {
                return Err(Error::NoConvergence { iterations, residual: r });
            }
            break;
        }
        lambda = mid;
        r = residual(lambda, n);
        iterations += 1;
    }
    let p_star: Vec<f64> = n.iter().map(|&v| (lambda * v - 1.0).exp()).collect();
    Ok(StationarySolution {
        lambda,
        objective_value: optimal_value_formula(lambda, n),
        p_star,
        iterations,
    })
}

/// Per-class upper bound `exp(-K (log K - 1) N_k / sum N - 1)`.
pub fn class_bound(n: &[f64]) -> Result<Vec<f64>> {
    check_positive(n)?;
    let k = n.len() as f64;
    let total: f64 = n.iter().sum();
    let penalty = k * (k.ln() - 1.0);
    Ok(n.iter().map(|&v| (-penalty * v / total - 1.0).exp()).collect())
}

/// Objective of the regularizer as a function of `p` on the simplex, with
/// `0 log 0 = 0`.
pub fn objective(p: &[f64], n: &[f64]) -> f64 {
    p.iter()
        .zip(n)
        .map(|(&q, &w)| if q > 0.0 { q * q.ln() / w } else { 0.0 })
        .sum()
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_simplex(y: &[f64]) -> Vec<f64> {
    let mut u = y.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut tau = 0.0;
    for (j, &v) in u.iter().enumerate() {
        cumulative += v;
        let t = (cumulative - 1.0) / (j + 1) as f64;
        if v - t > 0.0 {
            tau = t;
        }
    }
    y.iter().map(|v| (v - tau).max(0.0)).collect()
}

/// Settings of the iterative minimizer.
#[derive(Clone, Copy, Debug)]
pub struct DescentSettings {
    pub steps: usize,
    /// Initial step length of each line search (1 is the full scaled step).
    pub rate: f64,
}

impl Default for DescentSettings {
    fn default() -> Self {
        DescentSettings { steps: 500, rate: 1.0 }
    }
}

/// Minimizes the objective over the simplex by curvature-scaled projected
/// descent, starting from the uniform point.
///
/// Each step scales the gradient by the inverse diagonal curvature
/// `p_k N_k`, projects the result onto the tangent plane `sum d = 0` in that
/// metric, and backtracks (Armijo) after clipping the step to stay inside the
/// open simplex. Only the objective and its first two derivatives are used.
pub fn minimize_bruteforce(n: &[f64], settings: DescentSettings) -> Result<Vec<f64>> {
    check_positive(n)?;
    if settings.steps == 0 {
        return Err(Error::param("steps", "must be >= 1"));
    }
    if !(settings.rate > 0.0) {
        return Err(Error::param("rate", format!("must be > 0, got {}", settings.rate)));
    }
    let k = n.len();
    let mut p = vec![1.0 / k as f64; k];
    let mut f = objective(&p, n);
    let mut increases = 0;
    for step in 0..settings.steps {
        let grad: Vec<f64> = p.iter().zip(n).map(|(&q, &w)| (1.0 + q.ln()) / w).collect();
        let metric: Vec<f64> = p.iter().zip(n).map(|(&q, &w)| q * w).collect();
        let shift = grad.iter().zip(&metric).map(|(g, m)| g * m).sum::<f64>() / metric.iter().sum::<f64>();
        let dir: Vec<f64> = grad.iter().zip(&metric).map(|(g, m)| -(g - shift) * m).collect();
        if dir.iter().all(|d| d.abs() < 1e-16) {
            break;
        }
        let mut t = settings.rate;
        for (&q, &d) in p.iter().zip(&dir) {
            if d < 0.0 {
                t = t.min(0.95 * q / -d);
            }
        }
        let slope: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let mut candidate;
        let mut f_new;
        loop {
            candidate = p.iter().zip(&dir).map(|(q, d)| q + t * d).collect::<Vec<_>>();
            f_new = objective(&candidate, n);
            if f_new <= f + 1e-4 * t * slope || t < 1e-30 {
                break;
            }
            t *= 0.5;
        }
        let total: f64 = candidate.iter().sum();
        candidate.iter_mut().for_each(|q| *q /= total);
        f_new = objective(&candidate, n);
        if f_new > f + 1e-13 * f.abs().max(1.0) {
            increases += 1;
            if increases >= 10 {
                return Err(Error::Diverged { step, objective: f_new });
            }
        } else {
            increases = 0;
        }
        p = candidate;
        f = f_new;
    }
    Ok(p)
}

/// Uniform draw from the probability simplex.
pub fn random_simplex<R: Rng>(k: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Projection of a Gaussian vector onto the simplex; often lands on a face.
pub fn random_simplex_face<R: Rng>(k: usize, rng: &mut R) -> Vec<f64> {
    let y: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
    project_simplex(&y)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    /// Allowed excess of `p*_k` over the per-class bound.
    pub bound: f64,
    /// Allowed (relative to `max(1, |value|)`) mismatch between the objective
    /// at `p*` and the closed-form optimal value.
    pub value: f64,
    /// Allowed L-infinity distance between closed form and iterative minimizer.
    pub oracle: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            bound: 1e-9,
            value: 1e-8,
            oracle: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropositionReport {
    pub classes: usize,
    pub n: Vec<f64>,
    pub lambda: f64,
    /// `max_k (p*_k - bound_k)`; negative when the bound holds strictly.
    pub max_bound_violation: f64,
    pub value_residual: f64,
    pub oracle_linf: f64,
    /// Smallest `objective(q) - objective(p*)` over the random probes.
    pub min_domination_margin: f64,
    /// `Some(ok)` when the balancing direction (`lambda < 0`, `p*` decreasing
    /// in `N`) was asserted.
    pub balancing_direction: Option<bool>,
    pub failures: Vec<String>,
}

impl PropositionReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub tolerances: Tolerances,
    pub probes: usize,
    pub descent: DescentSettings,
    /// Assert the balancing direction; only meaningful for `K >= 3`.
    pub check_direction: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            tolerances: Tolerances::default(),
            probes: 1000,
            descent: DescentSettings::default(),
            check_direction: true,
        }
    }
}

/// Checks bound, optimal value, agreement with the iterative minimizer and
/// domination over random simplex points for one distribution `n`.
pub fn verify_propositions<R: Rng>(n: &[f64], opts: &VerifyOptions, rng: &mut R) -> Result<PropositionReport> {
    let tol = opts.tolerances;
    let sol = solve_lambda(n, 1e-14)?;
    let bound = class_bound(n)?;
    let mut failures = Vec::new();

    let max_bound_violation = sol
        .p_star
        .iter()
        .zip(&bound)
        .map(|(p, b)| p - b)
        .fold(f64::NEG_INFINITY, f64::max);
    if max_bound_violation > tol.bound {
        failures.push(format!("bound violated by {max_bound_violation:e}"));
    }

    let at_star = objective(&sol.p_star, n);
    let value_residual = (at_star - sol.objective_value).abs() / sol.objective_value.abs().max(1.0);
    if value_residual > tol.value {
        failures.push(format!("optimal value mismatch {value_residual:e}"));
    }

    let brute = minimize_bruteforce(n, opts.descent)?;
    let oracle_linf = brute
        .iter()
        .zip(&sol.p_star)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if oracle_linf > tol.oracle {
        failures.push(format!("iterative minimizer differs by {oracle_linf:e}"));
    }

    let mut min_domination_margin = f64::INFINITY;
    for i in 0..opts.probes {
        let q = if i % 2 == 0 {
            random_simplex(n.len(), rng)
        } else {
            random_simplex_face(n.len(), rng)
        };
        let margin = objective(&q, n) - at_star;
        min_domination_margin = min_domination_margin.min(margin);
    }
    if opts.probes > 0 && min_domination_margin < -1e-12 * at_star.abs().max(1.0) {
        failures.push(format!("random point beats p* by {:e}", -min_domination_margin));
    }

    let balancing_direction = opts.check_direction.then(|| {
        let mut order: Vec<usize> = (0..n.len()).collect();
        order.sort_by(|&a, &b| n[a].total_cmp(&n[b]));
        sol.lambda < 0.0
            && order
                .windows(2)
                .all(|w| n[w[0]] == n[w[1]] || sol.p_star[w[0]] > sol.p_star[w[1]])
    });
    if balancing_direction == Some(false) {
        failures.push(format!("balancing direction fails (lambda = {})", sol.lambda));
    }

    Ok(PropositionReport {
        classes: n.len(),
        n: n.to_vec(),
        lambda: sol.lambda,
        max_bound_violation,
        value_residual,
        oracle_linf,
        min_domination_margin,
        balancing_direction,
        failures,
    })
}

/// `max_k |p*_k - bound_k|` at the uniform distribution over `k` classes,
/// where the bound is attained.
pub fn uniform_tightness_gap(k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::param("k", "need at least one class"));
    }
    let n = vec![1.0 / k as f64; k];
    let sol = solve_lambda(&n, 1e-14)?;
    let bound = class_bound(&n)?;
    Ok(sol.p_star.iter().zip(&bound).map(|(p, b)| (p - b).abs()).fold(0.0, f64::max))
}
