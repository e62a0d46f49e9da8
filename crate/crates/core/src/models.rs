//! Bundled differentiable models.
//!
//! Every model exposes a per-example data loss recorded on a [`Tape`]; the
//! batch objective is the mean data loss plus an optional regularizer, so the
//! mean of per-example losses over a batch equals the batch objective.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DiffResult, ParamVector, Tape, Var};
use crate::convergence::ConvexConstants;
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Quadratic,
    Logistic,
    Mlp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Squared,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Input width for `logistic`, layer widths for `mlp`; ignored for
    /// `quadratic`.
    #[serde(default)]
    pub dims: Vec<usize>,
    #[serde(default)]
    pub l2: f64,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub loss: LossKind,
    /// Symmetric matrix of a quadratic objective.
    #[serde(default)]
    pub matrix: Option<Vec<Vec<f64>>>,
    /// Optional segment sizes for a quadratic; defaults to one segment.
    #[serde(default)]
    pub blocks: Option<Vec<usize>>,
}

impl ModelSpec {
    pub fn quadratic(matrix: Vec<Vec<f64>>) -> Self {
        Self {
            kind: ModelKind::Quadratic,
            dims: Vec::new(),
            l2: 0.0,
            activation: Activation::Identity,
            loss: LossKind::Squared,
            matrix: Some(matrix),
            blocks: None,
        }
    }

    pub fn logistic(dim: usize, l2: f64) -> Self {
        Self {
            kind: ModelKind::Logistic,
            dims: vec![dim],
            l2,
            activation: Activation::Identity,
            loss: LossKind::CrossEntropy,
            matrix: None,
            blocks: None,
        }
    }

    pub fn mlp(widths: Vec<usize>, activation: Activation, loss: LossKind) -> Self {
        Self {
            kind: ModelKind::Mlp,
            dims: widths,
            l2: 0.0,
            activation,
            loss,
            matrix: None,
            blocks: None,
        }
    }
}

/// `l_i(θ) = ½ (θ − z_i)ᵀ A (θ − z_i)` where `z_i` is the example's feature
/// row. With all `z_i = 0` the objective is exactly `½ θᵀAθ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadratic {
    a: DMatrix<f64>,
    rows: Vec<Vec<f64>>,
    blocks: Vec<usize>,
}

impl Quadratic {
    pub fn new(matrix: Vec<Vec<f64>>, blocks: Option<Vec<usize>>) -> Result<Self> {
        let n = matrix.len();
        if n == 0 || matrix.iter().any(|r| r.len() != n) {
            return Err(Error::Spec("quadratic requires a non-empty square matrix".into()));
        }
        for i in 0..n {
            for j in 0..i {
                let (x, y) = (matrix[i][j], matrix[j][i]);
                if (x - y).abs() > 1e-12 * x.abs().max(y.abs()).max(1.0) {
                    return Err(Error::Spec(format!("matrix not symmetric at ({i},{j})")));
                }
            }
        }
        let blocks = blocks.unwrap_or_else(|| vec![n]);
        if blocks.iter().sum::<usize>() != n || blocks.contains(&0) {
            return Err(Error::Spec(format!("blocks {blocks:?} do not tile dimension {n}")));
        }
        let a = DMatrix::from_fn(n, n, |i, j| matrix[i][j]);
        Ok(Self { a, rows: matrix, blocks })
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    fn half_form(&self, tape: &mut Tape, u: &[Var]) -> Var {
        let au: Vec<Var> = self.rows.iter().map(|row| tape.dot_const(u, row)).collect();
        let q = tape.inner(u, &au);
        tape.scale(q, 0.5)
    }
}

/// Binary logistic regression with L2 penalty `(l2/2)·‖θ‖²` on all
/// parameters, bias included. Labels are 0/1.
#[derive(Clone, Debug, PartialEq)]
pub struct Logistic {
    dim: usize,
    l2: f64,
}

impl Logistic {
    pub fn new(dim: usize, l2: f64) -> Result<Self> {
        if !(l2 >= 0.0) {
            return Err(Error::Spec(format!("l2 must be >= 0, got {l2}")));
        }
        Ok(Self { dim, l2 })
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    /// Closed-form full-batch objective and gradient, used where the tape
    /// would be needlessly slow (long optimizer runs).
    pub fn loss_grad(&self, batch: &Batch, theta: &[f64]) -> (f64, Vec<f64>) {
        let d = self.dim;
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; d + 1];
        for i in 0..batch.len() {
            let x = batch.x(i);
            let z = theta[d] + x.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>();
            let y = batch.y(i);
            loss += crate::autodiff::tape::softplus(z) - y * z;
            let r = crate::autodiff::tape::sigmoid(z) - y;
            for (g, xv) in grad.iter_mut().zip(x) {
                *g += r * xv;
            }
            grad[d] += r;
        }
        loss /= n;
        grad.iter_mut().for_each(|g| *g /= n);
        let sq: f64 = theta.iter().map(|t| t * t).sum();
        loss += 0.5 * self.l2 * sq;
        for (g, t) in grad.iter_mut().zip(theta) {
            *g += self.l2 * t;
        }
        (loss, grad)
    }
}

/// Fully connected network. Hidden layers use `activation`; the output layer
/// is linear and feeds `loss`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    loss: LossKind,
}

impl Mlp {
    pub fn new(widths: Vec<usize>, activation: Activation, loss: LossKind) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Spec(format!("mlp widths must be >= 1 with at least two layers, got {widths:?}")));
        }
        Ok(Self { widths, activation, loss })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    fn layer_sizes(&self) -> Vec<(usize, usize)> {
        self.widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Quadratic(Quadratic),
    Logistic(Logistic),
    Mlp(Mlp),
}

impl Model {
    pub fn from_spec(spec: &ModelSpec) -> Result<Self> {
        match spec.kind {
            ModelKind::Quadratic => {
                let m = spec
                    .matrix
                    .clone()
                    .ok_or_else(|| Error::Spec("quadratic requires `matrix`".into()))?;
                Ok(Model::Quadratic(Quadratic::new(m, spec.blocks.clone())?))
            }
            ModelKind::Logistic => {
                let [d] = spec.dims[..] else {
                    return Err(Error::Spec(format!("logistic takes one input width, got {:?}", spec.dims)));
                };
                Ok(Model::Logistic(Logistic::new(d, spec.l2)?))
            }
            ModelKind::Mlp => Ok(Model::Mlp(Mlp::new(spec.dims.clone(), spec.activation, spec.loss)?)),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Quadratic(_) => ModelKind::Quadratic,
            Model::Logistic(_) => ModelKind::Logistic,
            Model::Mlp(_) => ModelKind::Mlp,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Model::Quadratic(_) => "quadratic",
            Model::Logistic(_) => "logistic",
            Model::Mlp(_) => "mlp",
        }
    }

    pub fn is_convex(&self) -> bool {
        !matches!(self, Model::Mlp(_))
    }

    /// Errors unless the model is convex.
    pub fn require_convex(&self) -> Result<()> {
        if self.is_convex() {
            Ok(())
        } else {
            Err(Error::NonConvex(self.name()))
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Model::Quadratic(q) => q.dim(),
            Model::Logistic(l) => l.dim,
            Model::Mlp(m) => m.widths[0],
        }
    }

    pub fn layout(&self) -> Vec<(String, usize)> {
        match self {
            Model::Quadratic(q) if q.blocks.len() == 1 => vec![("theta".into(), q.dim())],
            Model::Quadratic(q) => q
                .blocks
                .iter()
                .enumerate()
                .map(|(i, &n)| (format!("block{i}"), n))
                .collect(),
            Model::Logistic(l) => vec![("weight".into(), l.dim), ("bias".into(), 1)],
            Model::Mlp(m) => m
                .layer_sizes()
                .iter()
                .enumerate()
                .map(|(i, (fan_in, fan_out))| (format!("layer{i}"), fan_out * fan_in + fan_out))
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(|(_, n)| n).sum()
    }

    /// Deterministic initialization: zeros for quadratic and logistic,
    /// `U(-1/√fan_in, 1/√fan_in)` for every MLP weight and bias.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let values = match self {
            Model::Quadratic(_) | Model::Logistic(_) => vec![0.0; self.num_params()],
            Model::Mlp(m) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut v = Vec::with_capacity(self.num_params());
                for (fan_in, fan_out) in m.layer_sizes() {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    for _ in 0..fan_out * (fan_in + 1) {
                        v.push(rng.random_range(-bound..bound));
                    }
                }
                v
            }
        };
        let layout = self.layout();
        let refs: Vec<(&str, usize)> = layout.iter().map(|(n, l)| (n.as_str(), *l)).collect();
        ParamVector::from_layout(values, &refs).expect("layout tiles parameter vector")
    }

    /// Records the data loss of one example; `x` may be inputs (for input
    /// gradients) or constants.
    pub fn example_loss(&self, tape: &mut Tape, params: &[Var], x: &[Var], y: f64) -> Var {
        match self {
            Model::Quadratic(q) => {
                let u: Vec<Var> = params.iter().zip(x).map(|(&p, &z)| tape.sub(p, z)).collect();
                q.half_form(tape, &u)
            }
            Model::Logistic(l) => {
                let w = &params[..l.dim];
                let wx = tape.inner(w, x);
                let z = tape.add(wx, params[l.dim]);
                let sp = tape.softplus(z);
                if y == 0.0 {
                    sp
                } else {
                    let yz = tape.scale(z, y);
                    tape.sub(sp, yz)
                }
            }
            Model::Mlp(m) => mlp_loss(m, tape, params, x, y),
        }
    }

    pub fn regularizer(&self, tape: &mut Tape, params: &[Var]) -> Option<Var> {
        match self {
            Model::Logistic(l) if l.l2 > 0.0 => {
                let sq: Vec<Var> = params.iter().map(|&p| tape.square(p)).collect();
                let s = tape.sum(&sq);
                Some(tape.scale(s, 0.5 * l.l2))
            }
            _ => None,
        }
    }

    /// Mean data loss over `batch` plus the regularizer.
    pub fn batch_loss(&self, tape: &mut Tape, params: &[Var], batch: &Batch) -> Var {
        let n = batch.len();
        let data = match self {
            // Closed form: mean_i ½(θ−z_i)ᵀA(θ−z_i) = ½(θ−z̄)ᵀA(θ−z̄) + const.
            Model::Quadratic(q) => {
                let d = q.dim();
                let mut mean = vec![0.0; d];
                for i in 0..n {
                    for (m, v) in mean.iter_mut().zip(batch.x(i)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let quad = |z: &[f64]| -> f64 {
                    let zv = nalgebra::DVector::from_column_slice(z);
                    0.5 * zv.dot(&(&q.a * &zv))
                };
                let spread = (0..n).map(|i| quad(batch.x(i))).sum::<f64>() / n as f64 - quad(&mean);
                let u: Vec<Var> = params.iter().zip(&mean).map(|(&p, &m)| tape.shift(p, -m)).collect();
                let h = q.half_form(tape, &u);
                if spread != 0.0 {
                    tape.shift(h, spread)
                } else {
                    h
                }
            }
            _ => {
                let losses: Vec<Var> = (0..n)
                    .map(|i| {
                        let x = tape.constants(batch.x(i));
                        self.example_loss(tape, params, &x, batch.y(i))
                    })
                    .collect();
                let s = tape.sum(&losses);
                tape.scale(s, 1.0 / n as f64)
            }
        };
        match self.regularizer(tape, params) {
            Some(r) => tape.add(data, r),
            None => data,
        }
    }

    /// Predicted class for classification models (logistic, cross-entropy
    /// MLP); `None` for regression objectives.
    pub fn predict_class(&self, params: &[f64], x: &[f64]) -> Option<usize> {
        match self {
            Model::Logistic(l) => {
                let z = params[l.dim] + x.iter().zip(params).map(|(a, b)| a * b).sum::<f64>();
                Some(usize::from(z > 0.0))
            }
            Model::Mlp(m) if m.loss == LossKind::CrossEntropy => {
                let mut tape = Tape::new();
                let p = tape.constants(params);
                let xs = tape.constants(x);
                let out = mlp_forward(m, &mut tape, &p, &xs);
                if out.len() == 1 {
                    Some(usize::from(tape.value(out[0]) > 0.0))
                } else {
                    out.iter()
                        .enumerate()
                        .max_by(|a, b| tape.value(*a.1).total_cmp(&tape.value(*b.1)))
                        .map(|(k, _)| k)
                }
            }
            _ => None,
        }
    }

    /// Mean loss and gradient over `batch`. Convex models use closed forms
    /// (they agree with the tape to rounding); the MLP goes through reverse
    /// mode.
    pub fn loss_grad(&self, params: &ParamVector, batch: &Batch) -> Result<DiffResult> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch { expected: self.num_params(), found: params.len() });
        }
        let (loss, grad) = match self {
            Model::Quadratic(q) => {
                let n = batch.len() as f64;
                let d = q.dim();
                let mut mean = DVector::zeros(d);
                let mut spread = 0.0;
                for i in 0..batch.len() {
                    let z = DVector::from_column_slice(batch.x(i));
                    spread += 0.5 * z.dot(&(&q.a * &z));
                    mean += z;
                }
                mean /= n;
                spread = spread / n - 0.5 * mean.dot(&(&q.a * &mean));
                let u = DVector::from_column_slice(params.values()) - mean;
                let au = &q.a * &u;
                (0.5 * u.dot(&au) + spread, au.iter().copied().collect())
            }
            Model::Logistic(l) => l.loss_grad(batch, params.values()),
            Model::Mlp(_) => return crate::autodiff::evaluate(self, params, batch),
        };
        if !loss.is_finite() || grad.iter().any(|g: &f64| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { step: 0 });
        }
        Ok(DiffResult { loss, grad })
    }
}

fn activate(tape: &mut Tape, act: Activation, v: Var) -> Var {
    match act {
        Activation::Identity => v,
        Activation::Relu => tape.relu(v),
        Activation::Tanh => tape.tanh(v),
    }
}

fn mlp_forward(m: &Mlp, tape: &mut Tape, params: &[Var], x: &[Var]) -> Vec<Var> {
    let mut h: Vec<Var> = x.to_vec();
    let mut at = 0;
    let layers = m.layer_sizes();
    for (li, &(fan_in, fan_out)) in layers.iter().enumerate() {
        let w = &params[at..at + fan_in * fan_out];
        let b = &params[at + fan_in * fan_out..at + fan_in * fan_out + fan_out];
        at += fan_in * fan_out + fan_out;
        let last = li + 1 == layers.len();
        h = (0..fan_out)
            .map(|j| {
                let wx = tape.inner(&w[j * fan_in..(j + 1) * fan_in], &h);
                let pre = tape.add(wx, b[j]);
                if last {
                    pre
                } else {
                    activate(tape, m.activation, pre)
                }
            })
            .collect();
    }
    h
}

fn mlp_loss(m: &Mlp, tape: &mut Tape, params: &[Var], x: &[Var], y: f64) -> Var {
    let out = mlp_forward(m, tape, params, x);
    match m.loss {
        LossKind::Squared => {
            let terms: Vec<Var> = out
                .iter()
                .enumerate()
                .map(|(k, &o)| {
                    let target = if out.len() == 1 {
                        y
                    } else if (y as usize) == k {
                        1.0
                    } else {
                        0.0
                    };
                    let r = tape.shift(o, -target);
                    tape.square(r)
                })
                .collect();
            tape.sum(&terms)
        }
        LossKind::CrossEntropy if out.len() == 1 => {
            let sp = tape.softplus(out[0]);
            let yz = tape.scale(out[0], y);
            tape.sub(sp, yz)
        }
        LossKind::CrossEntropy => {
            // log-sum-exp shifted by the (constant) max logit
            let shift = out.iter().map(|&o| tape.value(o)).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<Var> = out
                .iter()
                .map(|&o| {
                    let s = tape.shift(o, -shift);
                    tape.exp(s)
                })
                .collect();
            let total = tape.sum(&exps);
            let lse = tape.ln(total);
            let lse = tape.shift(lse, shift);
            let k = (y as usize).min(out.len() - 1);
            tape.sub(lse, out[k])
        }
    }
}

/// Builds the model and its deterministic initial parameters.
pub fn build(spec: &ModelSpec, seed: u64) -> Result<(Model, ParamVector)> {
    let model = Model::from_spec(spec)?;
    let params = model.init_params(seed);
    Ok((model, params))
}

fn sym_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(a.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Constants of `L(θ) = ½θᵀAθ`: `L_g = λ_max`, `c_s = λ_min`, `L_* = 0`,
/// no gradient noise.
pub fn quadratic_constants(a: &[Vec<f64>]) -> Result<ConvexConstants> {
    let q = Quadratic::new(a.to_vec(), None)?;
    let ev = sym_eigenvalues(&q.a);
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    if !(lo > 0.0) {
        return Err(Error::NotPositiveDefinite);
    }
    ConvexConstants::new(hi, lo, 0.0, 0.0, 0.0)
}

/// Minimum of a quadratic objective over `data`: attained at the mean row.
pub fn quadratic_optimum(q: &Quadratic, data: &Batch) -> (Vec<f64>, f64) {
    let n = data.len();
    let mut mean = vec![0.0; q.dim()];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(data.x(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut tape = Tape::new();
    let p = tape.constants(&mean);
    let l = Model::Quadratic(q.clone()).batch_loss(&mut tape, &p, data);
    (mean, tape.value(l))
}

/// Tolerance on the gradient norm when solving for `L_*`.
pub const LSTAR_GRAD_TOL: f64 = 1e-10;
/// Iteration cap when solving for `L_*`.
pub const LSTAR_MAX_ITER: usize = 1_000_000;

/// Assumption constants of L2-regularized logistic regression on `dataset`.
///
/// `c_s = l2` and `L_g = l2 + ¼·λ_max(X̃ᵀX̃/N)` where `X̃` is the design
/// matrix with the bias column of ones appended. `L_*` comes from
/// full-batch gradient descent with step `1/L_g` run to `‖∇L‖ < 1e-10`.
pub fn logistic_constants(dataset: &Dataset, l2: f64) -> Result<ConvexConstants> {
    if !(l2 > 0.0) {
        return Err(Error::NonPositiveRegularization);
    }
    let lambda = design_gram_lambda_max(dataset.examples());
    let lg = l2 + 0.25 * lambda;
    let model = Logistic::new(dataset.dim(), l2)?;
    let (_, lstar) = logistic_minimize(&model, dataset.examples(), lg)?;
    ConvexConstants::new(lg, l2, 0.0, 0.0, lstar)
}

/// `λ_max(X̃ᵀX̃/N)` with the bias column appended.
pub fn design_gram_lambda_max(batch: &Batch) -> f64 {
    let d = batch.dim() + 1;
    let n = batch.len() as f64;
    let mut g = DMatrix::<f64>::zeros(d, d);
    for i in 0..batch.len() {
        let mut row = batch.x(i).to_vec();
        row.push(1.0);
        for a in 0..d {
            for b in 0..d {
                g[(a, b)] += row[a] * row[b] / n;
            }
        }
    }
    *sym_eigenvalues(&g).last().unwrap_or(&0.0)
}

/// Gradient descent with step `1/lg` to the `L_*` tolerance.
pub fn logistic_minimize(model: &Logistic, data: &Batch, lg: f64) -> Result<(Vec<f64>, f64)> {
    let mut theta = vec![0.0; model.dim + 1];
    let step = 1.0 / lg;
    for _ in 0..LSTAR_MAX_ITER {
        let (loss, grad) = model.loss_grad(data, &theta);
        let gn = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !gn.is_finite() {
            return Err(Error::NonFiniteGradient { step: 0 });
        }
        if gn < LSTAR_GRAD_TOL {
            return Ok((theta, loss));
        }
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t -= step * g;
        }
    }
    let (loss, _) = model.loss_grad(data, &theta);
    Ok((theta, loss))
}
