//! Eigenvalue-triggered batch and learning-rate scaling.
//!
//! At each measurement the scheduler compares the new dominant curvature
//! against the last recorded one. A drop by more than `alpha`, or `kappa`
//! measurements without scaling, grows the batch by `beta` (capped at
//! `b_max`), grows the learning rate by the realized batch ratio, and divides
//! the adversarial ratio by `omega`. The recorded curvature is only replaced
//! when the drop condition holds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub eta0: f64,
    /// Epochs at which the learning rate is divided by `decay_ratio`.
    pub decay_epochs: Vec<usize>,
    pub decay_ratio: f64,
    pub b_init: usize,
    pub b_max: usize,
    /// Eigenvalue decay ratio.
    pub alpha: f64,
    /// Batch and learning-rate growth factor.
    pub beta: usize,
    /// Measurements between forced scale events.
    pub kappa: usize,
    pub gamma0: f64,
    pub eps_adv: f64,
    pub omega: f64,
    /// Epoch from which the adversarial ratio is zero.
    pub tau: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            eta0: 0.1,
            decay_epochs: Vec::new(),
            decay_ratio: 10.0,
            b_init: 128,
            b_max: 16384,
            alpha: 2.0,
            beta: 2,
            kappa: 10,
            gamma0: 0.2,
            eps_adv: 0.005,
            omega: 2.0,
            tau: usize::MAX,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.eta0 > 0.0) || !self.eta0.is_finite() {
            return bad(format!("eta0 must be > 0, got {}", self.eta0));
        }
        if self.b_init < 1 || self.b_init > self.b_max {
            return bad(format!("need 1 <= b_init <= b_max, got {} and {}", self.b_init, self.b_max));
        }
        if !(self.alpha > 1.0) {
            return bad(format!("alpha must be > 1, got {}", self.alpha));
        }
        if self.beta < 2 {
            return bad(format!("beta must be an integer >= 2, got {}", self.beta));
        }
        if self.kappa < 1 {
            return bad("kappa must be >= 1".into());
        }
        if !(self.omega > 1.0) {
            return bad(format!("omega must be > 1, got {}", self.omega));
        }
        if !(self.decay_ratio > 1.0) {
            return bad(format!("decay_ratio must be > 1, got {}", self.decay_ratio));
        }
        if !(0.0..=1.0).contains(&self.gamma0) {
            return bad(format!("gamma0 must be in [0, 1], got {}", self.gamma0));
        }
        if !(self.eps_adv >= 0.0) {
            return bad(format!("eps_adv must be >= 0, got {}", self.eps_adv));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("decay_epochs must be strictly increasing".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagReason {
    Eigen,
    Duration,
    None,
}

/// One scheduler decision, logged at every measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleEvent {
    pub epoch: usize,
    pub lambda_new: f64,
    /// Recorded curvature before this measurement (`None` on the first).
    pub lambda_old: Option<f64>,
    pub flag_reason: FlagReason,
    pub batch: usize,
    pub lr: f64,
    pub gamma: f64,
}

impl ScaleEvent {
    pub fn scaled(&self) -> bool {
        self.flag_reason != FlagReason::None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub batch: usize,
    pub lr: f64,
    pub lambda_old: Option<f64>,
    pub lambda_new: Option<f64>,
    pub kappa_itr: usize,
    pub gamma: f64,
    pub epoch: usize,
}

impl SchedulerState {
    pub fn init(cfg: &SchedulerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            batch: cfg.b_init,
            lr: cfg.eta0,
            lambda_old: None,
            lambda_new: None,
            kappa_itr: 0,
            gamma: if cfg.tau == 0 { 0.0 } else { cfg.gamma0 },
            epoch: 0,
        })
    }

    /// Applies one curvature measurement taken at `self.epoch`.
    pub fn on_epoch_end(&mut self, lambda_new: f64, cfg: &SchedulerConfig) -> ScaleEvent {
        let lambda_new = lambda_new.abs();
        let before = self.lambda_old;
        self.lambda_new = Some(lambda_new);
        let reason = match before {
            None => {
                self.lambda_old = Some(lambda_new);
                FlagReason::None
            }
            Some(old) => {
                self.kappa_itr += 1;
                let decayed = lambda_new < old / cfg.alpha;
                let reason = if decayed {
                    FlagReason::Eigen
                } else if self.kappa_itr >= cfg.kappa {
                    FlagReason::Duration
                } else {
                    FlagReason::None
                };
                if reason != FlagReason::None {
                    let next = (self.batch * cfg.beta).min(cfg.b_max);
                    self.lr *= next as f64 / self.batch as f64;
                    self.batch = next;
                    self.gamma /= cfg.omega;
                    self.kappa_itr = 0;
                }
                if decayed {
                    self.lambda_old = Some(lambda_new);
                }
                reason
            }
        };
        if self.epoch >= cfg.tau {
            self.gamma = 0.0;
        }
        ScaleEvent {
            epoch: self.epoch,
            lambda_new,
            lambda_old: before,
            flag_reason: reason,
            batch: self.batch,
            lr: self.lr,
            gamma: self.gamma,
        }
    }

    /// Step decay: divides the learning rate by `decay_ratio` when `epoch`
    /// is a decay epoch. Returns whether it fired.
    pub fn lr_decay(&mut self, epoch: usize, cfg: &SchedulerConfig) -> bool {
        if cfg.decay_epochs.contains(&epoch) {
            self.lr /= cfg.decay_ratio;
            true
        } else {
            false
        }
    }

    /// Zeroes the adversarial ratio once `epoch >= tau`, independent of any
    /// measurement.
    pub fn enforce_tau(&mut self, cfg: &SchedulerConfig) {
        if self.epoch >= cfg.tau {
            self.gamma = 0.0;
        }
    }
}
