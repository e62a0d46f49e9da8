//! Matrix-free dominant eigenvalue estimation by power iteration, on the full
//! Hessian or on a principal block selected by parameter segments.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{HessianOperator, ParamVector};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::models::Model;

/// Default cap on Hessian sample count.
pub const DEFAULT_HESSIAN_BATCH: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowerConfig {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub seed: u64,
    /// Samples used for Hessian-vector products; `None` means
    /// `min(1024, N)`.
    pub hessian_batch: Option<usize>,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            rel_tol: 1e-2,
            seed: 0,
            hessian_batch: None,
        }
    }
}

impl PowerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 1 {
            return Err(Error::Config("power iteration max_iter must be >= 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::Config("power iteration rel_tol must be > 0".into()));
        }
        if self.hessian_batch == Some(0) {
            return Err(Error::Config("hessian_batch must be >= 1".into()));
        }
        Ok(())
    }

    pub fn batch_size(&self, n: usize) -> usize {
        self.hessian_batch.unwrap_or(DEFAULT_HESSIAN_BATCH).min(n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HessianEstimate {
    /// Rayleigh quotient `vᵀHv` of the final iterate (signed).
    pub eigenvalue: f64,
    pub eigenvector: Vec<f64>,
    /// Number of operator applications.
    pub iterations: usize,
    pub rel_change: f64,
    pub converged: bool,
    /// `‖Hv‖` at the final iterate, an upper bound on `|vᵀHv|`.
    pub hv_norm: f64,
    /// Rayleigh quotient after every iteration.
    pub history: Vec<f64>,
}

impl HessianEstimate {
    /// `|λ|`, the curvature magnitude handed to the scheduler.
    pub fn magnitude(&self) -> f64 {
        self.eigenvalue.abs()
    }

    pub fn is_negative(&self) -> bool {
        self.eigenvalue < 0.0
    }
}

fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Option<Vec<f64>> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = norm(&v);
    (n > 0.0 && n.is_finite()).then(|| v.into_iter().map(|x| x / n).collect())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Power iteration on a symmetric operator given as a closure.
///
/// Starts from a normalized Gaussian vector and stops once the relative
/// change of successive Rayleigh quotients drops below `rel_tol`, or after
/// `max_iter` applications.
pub fn top_eigenvalue<F>(mut apply: F, dim: usize, cfg: &PowerConfig) -> Result<HessianEstimate>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    if dim == 0 {
        return Err(Error::Config("power iteration needs dim >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut v = match gaussian_unit(&mut rng, dim) {
        Some(v) => v,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
            gaussian_unit(&mut rng, dim).ok_or(Error::DegenerateStart)?
        }
    };

    let mut history = Vec::new();
    let mut prev: Option<f64> = None;
    let mut rel_change = f64::INFINITY;
    for k in 1..=cfg.max_iter {
        let w = apply(&v)?;
        if w.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: w.len() });
        }
        let lambda = dot(&v, &w);
        history.push(lambda);
        if let Some(p) = prev {
            rel_change = if lambda == 0.0 {
                if p == 0.0 { 0.0 } else { f64::INFINITY }
            } else {
                (lambda - p).abs() / lambda.abs()
            };
        }
        let wn = norm(&w);
        let done = rel_change < cfg.rel_tol || wn == 0.0 || k == cfg.max_iter;
        if done {
            return Ok(HessianEstimate {
                eigenvalue: lambda,
                eigenvector: v,
                iterations: k,
                rel_change,
                converged: rel_change < cfg.rel_tol || wn == 0.0,
                hv_norm: wn,
                history,
            });
        }
        v = w.into_iter().map(|x| x / wn).collect();
        prev = Some(lambda);
    }
    unreachable!("loop returns on its last iteration")
}

/// Fixed Hessian sample: the whole dataset in order when the requested size
/// covers it, otherwise a seeded draw without replacement.
pub fn hessian_sample(dataset: &Dataset, cfg: &PowerConfig) -> Batch {
    let n = dataset.len();
    let b = cfg.batch_size(n);
    if b >= n {
        return dataset.examples().clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5bd1_e995);
    let mut idx = sample(&mut rng, n, b).into_vec();
    idx.sort_unstable();
    dataset.batch(&idx)
}

/// Dominant eigenvalue of the Hessian of the mean loss on a fixed sample.
pub fn model_top_eigenvalue(
    model: &Model,
    params: &ParamVector,
    dataset: &Dataset,
    cfg: &PowerConfig,
) -> Result<HessianEstimate> {
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let batch = hessian_sample(dataset, cfg);
    batch_top_eigenvalue(model, params, &batch, cfg)
}

pub fn batch_top_eigenvalue(
    model: &Model,
    params: &ParamVector,
    batch: &Batch,
    cfg: &PowerConfig,
) -> Result<HessianEstimate> {
    let op = HessianOperator::new(model, params, batch)?;
    top_eigenvalue(|v| op.apply(v), op.dim(), cfg)
}

/// Parameter indices covered by the named segments, in segment order.
pub fn block_indices(params: &ParamVector, block: &[String]) -> Result<Vec<usize>> {
    let mut idx = Vec::new();
    for name in block {
        idx.extend(params.segment(name)?.range());
    }
    idx.sort_unstable();
    idx.dedup();
    Ok(idx)
}

/// Power iteration on the principal submatrix of the Hessian restricted to
/// the named segments: vectors are zero-extended, multiplied, and restricted
/// back to the block.
pub fn block_top_eigenvalue(
    model: &Model,
    params: &ParamVector,
    dataset: &Dataset,
    block: &[String],
    cfg: &PowerConfig,
) -> Result<HessianEstimate> {
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let batch = hessian_sample(dataset, cfg);
    batch_block_top_eigenvalue(model, params, &batch, block, cfg)
}

pub fn batch_block_top_eigenvalue(
    model: &Model,
    params: &ParamVector,
    batch: &Batch,
    block: &[String],
    cfg: &PowerConfig,
) -> Result<HessianEstimate> {
    let idx = block_indices(params, block)?;
    if idx.is_empty() {
        return Err(Error::Config("empty Hessian block".into()));
    }
    let op = HessianOperator::new(model, params, batch)?;
    let full = op.dim();
    top_eigenvalue(
        |vb| {
            let mut v = vec![0.0; full];
            for (&i, &x) in idx.iter().zip(vb) {
                v[i] = x;
            }
            let hv = op.apply(&v)?;
            Ok(idx.iter().map(|&i| hv[i]).collect())
        },
        idx.len(),
        cfg,
    )
}

/// The final segment name, the default block.
pub fn default_block(params: &ParamVector) -> Vec<String> {
    params.segments().last().map(|s| vec![s.name.clone()]).unwrap_or_default()
}
