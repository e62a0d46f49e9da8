//! FGSM perturbations and adversarial batch mixing.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{input_gradient, ParamVector};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::models::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvConfig {
    /// ∞-norm budget.
    pub epsilon: f64,
    /// Fraction of each batch replaced by adversarial examples.
    pub ratio: f64,
    /// Clip perturbed inputs to `[0, 1]` (image-like data only).
    #[serde(default)]
    pub clip_unit: bool,
}

impl AdvConfig {
    pub fn new(epsilon: f64, ratio: f64) -> Result<Self> {
        let cfg = Self { epsilon, ratio, clip_unit: false };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("adversarial epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("adversarial ratio must be in [0, 1], got {}", self.ratio)));
        }
        Ok(())
    }

    /// `floor(ratio·n)`; never exceeds the declared fraction.
    pub fn count(&self, n: usize) -> usize {
        // the epsilon absorbs representation error such as 0.29·100 = 28.999…
        ((self.ratio * n as f64) + 1e-9).floor().min(n as f64) as usize
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `x + ε·sign(∇ₓ l(x, y; θ))` with `sign(0) = 0`.
pub fn fgsm(model: &Model, params: &ParamVector, x: &[f64], y: f64, epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon >= 0.0) {
        return Err(Error::Config(format!("adversarial epsilon must be >= 0, got {epsilon}")));
    }
    let g = input_gradient(model, params, x, y)?;
    Ok(perturb(x, &g, epsilon))
}

/// Applies the signed step for an already computed input gradient.
pub fn perturb(x: &[f64], grad: &[f64], epsilon: f64) -> Vec<f64> {
    x.iter().zip(grad).map(|(xi, gi)| xi + epsilon * sign(*gi)).collect()
}

/// Replaces `floor(ratio·|B|)` examples, chosen with `rng`, by their FGSM
/// versions at `params`. Labels and batch size are unchanged.
pub fn mix_adversarial<R: Rng + ?Sized>(
    model: &Model,
    params: &ParamVector,
    batch: &Batch,
    cfg: &AdvConfig,
    rng: &mut R,
) -> Result<Batch> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let k = cfg.count(batch.len());
    let mut out = batch.clone();
    if k == 0 {
        return Ok(out);
    }
    let mut chosen = sample(rng, batch.len(), k).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let mut adv = fgsm(model, params, batch.x(i), batch.y(i), cfg.epsilon)?;
        if cfg.clip_unit {
            adv.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
        out.x_mut(i).copy_from_slice(&adv);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::models::ModelSpec;

    #[test]
    fn perturbation_follows_sign() {
        assert_eq!(perturb(&[0.0, 0.0], &[0.3, -0.2], 0.005), vec![0.005, -0.005]);
        assert_eq!(perturb(&[1.0, -2.0], &[0.0, 0.0], 0.5), vec![1.0, -2.0]);
    }

    #[test]
    fn count_floors() {
        let c = AdvConfig::new(0.005, 0.2).unwrap();
        assert_eq!(c.count(10), 2);
        assert_eq!(c.count(9), 1);
        assert_eq!(AdvConfig::new(0.0, 0.29).unwrap().count(100), 29);
        assert_eq!(AdvConfig::new(0.0, 1.0).unwrap().count(7), 7);
    }

    #[test]
    fn invalid_configs() {
        assert!(AdvConfig::new(-1.0, 0.2).is_err());
        assert!(AdvConfig::new(0.1, 1.5).is_err());
        assert!(AdvConfig::new(0.1, -0.1).is_err());
    }

    #[test]
    fn zero_ratio_returns_batch_unchanged() {
        let m = Model::from_spec(&ModelSpec::logistic(2, 0.0)).unwrap();
        let p = ParamVector::from_layout(vec![1.0, -1.0, 0.0], &[("weight", 2), ("bias", 1)]).unwrap();
        let b = Batch::from_rows(&[vec![1.0, 2.0], vec![0.5, 0.1]], vec![1.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = mix_adversarial(&m, &p, &b, &AdvConfig::new(0.1, 0.0).unwrap(), &mut rng).unwrap();
        assert_eq!(out, b);
    }
}
