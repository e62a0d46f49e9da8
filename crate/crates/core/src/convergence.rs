//! Strongly convex convergence theory: assumption constants, the
//! optimality-gap bound for growing batches, and empirical checks of the
//! supporting lemmas and of realized training runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamVector;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::trainer::TrainingLog;

/// Inflation applied to fitted variance constants.
pub const VARIANCE_MARGIN: f64 = 1.05;
/// Absolute slack allowed by the gradient-domination check.
pub const LEMMA3_SLACK: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexConstants {
    /// Gradient Lipschitz constant.
    pub lg: f64,
    /// Strong convexity constant.
    pub cs: f64,
    pub m: f64,
    pub mv: f64,
    /// Optimal loss.
    pub lstar: f64,
}

impl ConvexConstants {
    pub fn new(lg: f64, cs: f64, m: f64, mv: f64, lstar: f64) -> Result<Self> {
        let c = Self { lg, cs, m, mv, lstar };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cs > 0.0) || !(self.lg >= self.cs) || !self.lg.is_finite() {
            return Err(Error::Config(format!("need L_g >= c_s > 0, got L_g={} c_s={}", self.lg, self.cs)));
        }
        if !(self.m >= 0.0) || !(self.mv >= 0.0) {
            return Err(Error::Config(format!("variance constants must be >= 0, got M={} M_v={}", self.m, self.mv)));
        }
        if !self.lstar.is_finite() {
            return Err(Error::Config("L_* must be finite".into()));
        }
        Ok(())
    }

    /// `M_g = M_v + 1`, derived, never stored.
    pub fn mg(&self) -> f64 {
        self.mv + 1.0
    }

    pub fn with_variance(self, m: f64, mv: f64) -> Result<Self> {
        Self::new(self.lg, self.cs, m, mv, self.lstar)
    }

    /// Asymptotic level `η0·L_g·M / (2c_s)` of the bound.
    pub fn floor(&self, eta0: f64) -> f64 {
        eta0 * self.lg * self.m / (2.0 * self.cs)
    }
}

/// Per-step batch sizes `b_1..b_t` with base step size `eta0`; step `k`
/// uses learning rate `b_k·η0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSchedule {
    pub b: Vec<usize>,
    pub eta0: f64,
}

impl BatchSchedule {
    pub fn new(b: Vec<usize>, eta0: f64) -> Result<Self> {
        if b.contains(&0) {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if !(eta0 > 0.0) || !eta0.is_finite() {
            return Err(Error::Config(format!("eta0 must be > 0, got {eta0}")));
        }
        Ok(Self { b, eta0 })
    }

    /// Piecewise-constant schedule from `(batch, steps)` phases.
    pub fn phases(phases: &[(usize, usize)], eta0: f64) -> Result<Self> {
        let b = phases.iter().flat_map(|&(b, n)| std::iter::repeat_n(b, n)).collect();
        Self::new(b, eta0)
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    pub fn b_max(&self) -> usize {
        self.b.iter().copied().max().unwrap_or(1)
    }
}

/// Largest admissible base step size `1/(L_g·(M_v + B_max))`.
pub fn eta0_max(c: &ConvexConstants, b_max: usize) -> f64 {
    1.0 / (c.lg * (c.mv + b_max as f64))
}

fn check_step_size(c: &ConvexConstants, sched: &BatchSchedule) -> Result<()> {
    let max = eta0_max(c, sched.b_max());
    // relative slack so that η0 = eta0_max computed elsewhere is accepted
    if sched.eta0 > max * (1.0 + 1e-12) {
        return Err(Error::StepSizeTooLarge { eta0: sched.eta0, max });
    }
    Ok(())
}

/// Bound on `E[L(θ_t)] − L_*` for `t = 0..=len`:
/// `Π_{k≤t}(1 − b_k·η0·c_s)·(gap0 − floor) + floor`.
pub fn theorem_bound(c: &ConvexConstants, sched: &BatchSchedule, gap0: f64) -> Result<Vec<f64>> {
    c.validate()?;
    check_step_size(c, sched)?;
    if !(gap0 >= 0.0) {
        return Err(Error::Config(format!("initial gap must be >= 0, got {gap0}")));
    }
    let floor = c.floor(sched.eta0);
    let mut out = Vec::with_capacity(sched.len() + 1);
    out.push(gap0);
    let mut prod = 1.0;
    for (k, &b) in sched.b.iter().enumerate() {
        let factor = 1.0 - b as f64 * sched.eta0 * c.cs;
        if !(factor > 0.0 && factor <= 1.0) {
            return Err(Error::StepSizeViolation { step: k + 1, factor });
        }
        prod *= factor;
        out.push(prod * (gap0 - floor) + floor);
    }
    Ok(out)
}

/// Per-example gradients at `theta` (rows) and their mean.
fn example_gradients(model: &Model, theta: &ParamVector, dataset: &Dataset) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let ex = dataset.examples();
    let mut rows = Vec::with_capacity(ex.len());
    let mut mean = vec![0.0; theta.len()];
    for i in 0..ex.len() {
        let g = model.loss_grad(theta, &ex.select(&[i]))?.grad;
        for (m, v) in mean.iter_mut().zip(&g) {
            *m += v;
        }
        rows.push(g);
    }
    mean.iter_mut().for_each(|m| *m /= ex.len() as f64);
    Ok((rows, mean))
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per-example gradient variance and full-gradient norm at one point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceSample {
    pub variance: f64,
    pub grad_norm: f64,
}

pub fn variance_sample(model: &Model, theta: &ParamVector, dataset: &Dataset) -> Result<VarianceSample> {
    model.require_convex()?;
    let (rows, mean) = example_gradients(model, theta, dataset)?;
    let variance = rows.iter().map(|g| dist_sq(g, &mean)).sum::<f64>() / rows.len() as f64;
    Ok(VarianceSample { variance, grad_norm: norm_sq(&mean).sqrt() })
}

/// Smallest `(M, M_v) ≥ 0` with `V ≤ M + M_v·‖∇L‖` on every sample, in
/// the sense of minimizing the bound at the mean gradient norm. The feasible
/// set is a polyhedron in the nonnegative quadrant, so the optimum is one of
/// its vertices; all candidates are enumerated.
pub fn fit_variance_bounds(samples: &[VarianceSample]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let vmax = samples.iter().map(|s| s.variance.max(0.0)).fold(0.0, f64::max);
    if vmax == 0.0 {
        return (0.0, 0.0);
    }
    let gbar = samples.iter().map(|s| s.grad_norm).sum::<f64>() / samples.len() as f64;
    let feasible = |m: f64, mv: f64| {
        m >= 0.0
            && mv >= 0.0
            && samples
                .iter()
                .all(|s| s.variance <= (m + mv * s.grad_norm) * (1.0 + 1e-12) + 1e-300)
    };
    let mut candidates = vec![(vmax, 0.0)];
    if samples.iter().all(|s| s.grad_norm > 0.0) {
        let mv = samples.iter().map(|s| s.variance / s.grad_norm).fold(0.0, f64::max);
        candidates.push((0.0, mv));
    }
    for (j, a) in samples.iter().enumerate() {
        for b in &samples[j + 1..] {
            let dg = a.grad_norm - b.grad_norm;
            if dg.abs() > 1e-12 * a.grad_norm.max(b.grad_norm) {
                let mv = (a.variance - b.variance) / dg;
                candidates.push((a.variance - mv * a.grad_norm, mv));
            }
        }
    }
    let mut best = (vmax, 0.0);
    let mut best_obj = vmax;
    for (m, mv) in candidates {
        if !feasible(m, mv) {
            continue;
        }
        let obj = m + mv * gbar;
        if obj < best_obj * (1.0 - 1e-12) {
            best = (m, mv);
            best_obj = obj;
        }
    }
    best
}

/// Fits `(M, M_v)` over `sample_thetas` and inflates both by 5%.
pub fn estimate_variance_bounds(model: &Model, dataset: &Dataset, sample_thetas: &[ParamVector]) -> Result<(f64, f64)> {
    model.require_convex()?;
    let samples = sample_thetas
        .iter()
        .map(|t| variance_sample(model, t, dataset))
        .collect::<Result<Vec<_>>>()?;
    let (m, mv) = fit_variance_bounds(&samples);
    Ok((m * VARIANCE_MARGIN, mv * VARIANCE_MARGIN))
}

/// Draws `count` points around `center` with coordinates offset by
/// `U(-radius, radius)`.
pub fn sample_thetas(center: &ParamVector, count: usize, radius: f64, seed: u64) -> Vec<ParamVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let v = center.values().iter().map(|c| c + rng.random_range(-radius..=radius)).collect();
            center.with_values(v).expect("same length as center")
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma3Report {
    /// `min_θ ‖∇L‖² − 2c_s(L − L_*)`.
    pub worst_slack: f64,
    pub worst_index: usize,
    /// Indices of samples where the inequality fails beyond tolerance.
    pub violations: Vec<usize>,
}

impl Lemma3Report {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks `2c_s(L(θ) − L_*) ≤ ‖∇L(θ)‖²` at every sample.
pub fn check_lemma3(model: &Model, dataset: &Dataset, c: &ConvexConstants, thetas: &[ParamVector]) -> Result<Lemma3Report> {
    model.require_convex()?;
    let mut report = Lemma3Report { worst_slack: f64::INFINITY, worst_index: 0, violations: Vec::new() };
    for (i, theta) in thetas.iter().enumerate() {
        let r = model.loss_grad(theta, dataset.examples())?;
        let slack = norm_sq(&r.grad) - 2.0 * c.cs * (r.loss - c.lstar);
        if slack < report.worst_slack {
            report.worst_slack = slack;
            report.worst_index = i;
        }
        if slack < -LEMMA3_SLACK {
            report.violations.push(i);
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma4Entry {
    pub batch: usize,
    /// Monte Carlo estimate of `E‖∇L_B − ∇L‖²`.
    pub variance: f64,
    pub std_error: f64,
    /// `(M + M_v‖∇L‖)/|B|`.
    pub bound: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma4Report {
    pub grad_norm: f64,
    pub entries: Vec<Lemma4Entry>,
}

impl Lemma4Report {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.holds)
    }
}

/// Mini-batch gradient variance under with-replacement sampling, estimated
/// from `draws` batches per size and compared to the bound with a margin of
/// three standard errors.
pub fn check_lemma4(
    model: &Model,
    dataset: &Dataset,
    c: &ConvexConstants,
    theta: &ParamVector,
    batch_sizes: &[usize],
    draws: usize,
    seed: u64,
) -> Result<Lemma4Report> {
    let n = dataset.len();
    if let Some(&b) = batch_sizes.iter().find(|&&b| b == 0 || b > n) {
        return Err(Error::Config(format!("batch size {b} outside [1, {n}]")));
    }
    if draws < 2 {
        return Err(Error::Config("lemma check needs at least 2 draws".into()));
    }
    let (rows, mean) = example_gradients(model, theta, dataset)?;
    let grad_norm = norm_sq(&mean).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(batch_sizes.len());
    let mut acc = vec![0.0; mean.len()];
    for &b in batch_sizes {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..draws {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for _ in 0..b {
                let row = &rows[rng.random_range(0..n)];
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= b as f64);
            let d = dist_sq(&acc, &mean);
            sum += d;
            sum_sq += d * d;
        }
        let k = draws as f64;
        let variance = sum / k;
        let sample_var = ((sum_sq - k * variance * variance) / (k - 1.0)).max(0.0);
        let std_error = (sample_var / k).sqrt();
        let bound = (c.m + c.mv * grad_norm) / b as f64;
        entries.push(Lemma4Entry { batch: b, variance, std_error, bound, holds: variance <= bound + 3.0 * std_error });
    }
    Ok(Lemma4Report { grad_norm, entries })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub seeds: usize,
    /// Mean optimality gap at steps `0..=t`.
    pub mean_gap: Vec<f64>,
    pub std_error: Vec<f64>,
    pub bound: Vec<f64>,
    /// First step where `mean_gap > bound + 3·SE`.
    pub first_violation: Option<usize>,
    /// `min_t (bound + 3·SE − mean_gap)`.
    pub worst_margin: f64,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.first_violation.is_none()
    }
}

/// Compares the seed-averaged optimality gap of theory-mode runs with the
/// bound at every logged step. With a single run the tolerance is zero.
pub fn validate_run(logs: &[TrainingLog], c: &ConvexConstants, sched: &BatchSchedule) -> Result<ValidationReport> {
    check_step_size(c, sched)?;
    if logs.is_empty() {
        return Err(Error::Config("validation needs at least one run".into()));
    }
    let t = sched.len();
    let mut gaps: Vec<Vec<f64>> = Vec::with_capacity(logs.len());
    for log in logs {
        if !log.theory_mode {
            return Err(Error::Config("validation requires theory-mode runs".into()));
        }
        let mut g = Vec::with_capacity(t + 1);
        g.push(log.initial_objective.ok_or_else(|| Error::Config("run has no initial objective".into()))? - c.lstar);
        for s in &log.steps {
            g.push(s.objective.ok_or_else(|| Error::Config(format!("step {} has no objective", s.step)))? - c.lstar);
        }
        if g.len() != t + 1 {
            return Err(Error::DimensionMismatch { expected: t + 1, found: g.len() });
        }
        gaps.push(g);
    }
    let gap0 = gaps[0][0];
    let bound = theorem_bound(c, sched, gap0.max(0.0))?;
    let k = gaps.len() as f64;
    let mut mean_gap = Vec::with_capacity(t + 1);
    let mut std_error = Vec::with_capacity(t + 1);
    let mut first_violation = None;
    let mut worst_margin = f64::INFINITY;
    for step in 0..=t {
        let mean = gaps.iter().map(|g| g[step]).sum::<f64>() / k;
        let se = if gaps.len() > 1 {
            let var = gaps.iter().map(|g| (g[step] - mean).powi(2)).sum::<f64>() / (k - 1.0);
            (var / k).sqrt()
        } else {
            0.0
        };
        let margin = bound[step] + 3.0 * se - mean;
        if margin < worst_margin {
            worst_margin = margin;
        }
        // summation rounding: a mean of identical gaps can exceed them by an ulp
        let rounding = 1e-12 * bound[step].abs().max(mean.abs());
        if margin < -rounding && first_violation.is_none() {
            first_violation = Some(step);
        }
        mean_gap.push(mean);
        std_error.push(se);
    }
    Ok(ValidationReport { seeds: logs.len(), mean_gap, std_error, bound, first_violation, worst_margin })
}
