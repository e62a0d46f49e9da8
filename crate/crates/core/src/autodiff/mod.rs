//! Reverse-mode differentiation over flat parameter vectors.
//!
//! Hessian-vector products use double backpropagation: the gradient sweep is
//! itself recorded on the tape, and `H·v` is the gradient of `gᵀv` with `v`
//! held constant. No Hessian matrix is formed.

mod param;
pub(crate) mod tape;

pub use param::{ParamVector, Segment};
pub use tape::{Tape, Var};

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::models::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffResult {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn check_params(params: &ParamVector, model: &Model) -> Result<()> {
    if params.len() != model.num_params() {
        return Err(Error::DimensionMismatch {
            expected: model.num_params(),
            found: params.len(),
        });
    }
    Ok(())
}

/// Mean loss over `batch` and its exact gradient.
pub fn evaluate(model: &Model, params: &ParamVector, batch: &Batch) -> Result<DiffResult> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_params(params, model)?;
    let mut tape = Tape::new();
    let p = tape.inputs(params.values());
    let loss = model.batch_loss(&mut tape, &p, batch);
    tape.check_finite()?;
    let grad = tape.gradient(loss, &p);
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite { node: p[i].index(), op: "gradient" });
    }
    Ok(DiffResult { loss: tape.value(loss), grad })
}

/// Mean loss only.
pub fn loss(model: &Model, params: &ParamVector, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_params(params, model)?;
    let mut tape = Tape::new();
    let p = tape.constants(params.values());
    let l = model.batch_loss(&mut tape, &p, batch);
    tape.check_finite()?;
    Ok(tape.value(l))
}

/// Per-example loss `l(z_i, θ)` including any regularizer, and its gradient.
pub fn example_eval(model: &Model, params: &ParamVector, x: &[f64], y: f64) -> Result<DiffResult> {
    let batch = Batch::new(x.to_vec(), vec![y], x.len())?;
    evaluate(model, params, &batch)
}

/// Hessian of the batch loss as a reusable linear operator.
///
/// The forward pass and the recorded gradient are built once; every
/// [`apply`](HessianOperator::apply) is one extra reverse sweep.
pub struct HessianOperator {
    tape: Tape,
    params: Vec<Var>,
    grad: Vec<Var>,
}

impl HessianOperator {
    pub fn new(model: &Model, params: &ParamVector, batch: &Batch) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        check_params(params, model)?;
        let mut tape = Tape::new();
        let p = tape.inputs(params.values());
        let loss = model.batch_loss(&mut tape, &p, batch);
        let grad = tape.grad_vars(loss, &p);
        tape.check_finite()?;
        Ok(Self { tape, params: p, grad })
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    /// The gradient recorded at construction.
    pub fn gradient(&self) -> Vec<f64> {
        self.grad.iter().map(|&g| self.tape.value(g)).collect()
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: v.len() });
        }
        let seeds: Vec<(Var, f64)> = self
            .grad
            .iter()
            .zip(v)
            .filter(|(_, &vi)| vi != 0.0)
            .map(|(&g, &vi)| (g, vi))
            .collect();
        if seeds.is_empty() {
            return Ok(vec![0.0; self.dim()]);
        }
        Ok(self.tape.vjp(&seeds, &self.params))
    }
}

/// `H·v` for the mean loss over `batch`.
pub fn hvp(model: &Model, params: &ParamVector, batch: &Batch, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != params.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), found: v.len() });
    }
    HessianOperator::new(model, params, batch)?.apply(v)
}

/// `∇ₓ l(x, y; θ)` for a single example. The regularizer does not depend
/// on `x` and is left out.
pub fn input_gradient(model: &Model, params: &ParamVector, x: &[f64], y: f64) -> Result<Vec<f64>> {
    check_params(params, model)?;
    if x.len() != model.input_dim() {
        return Err(Error::DimensionMismatch { expected: model.input_dim(), found: x.len() });
    }
    let mut tape = Tape::new();
    let p = tape.constants(params.values());
    let xs = tape.inputs(x);
    let l = model.example_loss(&mut tape, &p, &xs, y);
    tape.check_finite()?;
    Ok(tape.gradient(l, &xs))
}
