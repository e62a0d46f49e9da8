//! Mini-batch SGD driven by the batch-size scheduler.
//!
//! Every run is a pure function of its config and data: shuffling,
//! adversarial selection and the power-iteration start vector draw from
//! separate seeded streams, so switching adversarial mixing on or off never
//! perturbs the sampling sequence.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversarial::{mix_adversarial, AdvConfig};
use crate::autodiff::ParamVector;
use crate::convergence::BatchSchedule;
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::hessian::{batch_block_top_eigenvalue, batch_top_eigenvalue, hessian_sample, PowerConfig};
use crate::models::Model;
use crate::scheduler::{ScaleEvent, SchedulerConfig, SchedulerState};

/// Loss magnitude treated as divergence.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

const ADV_STREAM: u64 = 0xa5a5_5a5a_0f0f_f0f0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Strategy {
    /// Fixed batch with step learning-rate decay.
    Bl,
    /// Batch grows by the decay ratio where the learning rate would decay.
    Gg,
    Abs,
    Absa,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Bl => "BL",
            Strategy::Gg => "GG",
            Strategy::Abs => "ABS",
            Strategy::Absa => "ABSA",
        }
    }

    pub fn adaptive(self) -> bool {
        matches!(self, Strategy::Abs | Strategy::Absa)
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BL" => Ok(Strategy::Bl),
            "GG" => Ok(Strategy::Gg),
            "ABS" => Ok(Strategy::Abs),
            "ABSA" => Ok(Strategy::Absa),
            _ => Err(Error::Config(format!("unknown strategy `{s}` (expected BL, GG, ABS or ABSA)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Reshuffle every epoch and take contiguous slices.
    #[default]
    Shuffle,
    /// Independent uniform draws with replacement.
    WithReplacement,
}

/// When curvature is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cadence {
    #[default]
    Epoch,
    /// Every this many training samples.
    Samples(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub scheduler: SchedulerConfig,
    pub hessian: PowerConfig,
    /// Epochs between test evaluations; 0 disables them.
    pub eval_every: usize,
    pub sampling: Sampling,
    pub cadence: Cadence,
    /// Measure curvature on the adversarially mixed sample instead of the
    /// clean one.
    pub hessian_on_mixed: bool,
    /// Parameter segments for a block Hessian; `None` uses the full Hessian.
    pub block: Option<Vec<String>>,
    /// Record the full training objective after every step.
    pub track_objective: bool,
    pub clip_unit: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            seed: 0,
            strategy: Strategy::Abs,
            scheduler: SchedulerConfig::default(),
            hessian: PowerConfig::default(),
            eval_every: 1,
            sampling: Sampling::Shuffle,
            cadence: Cadence::Epoch,
            hessian_on_mixed: false,
            block: None,
            track_objective: false,
            clip_unit: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.cadence == Cadence::Samples(0) {
            return Err(Error::Config("cadence samples must be >= 1".into()));
        }
        self.scheduler.validate()?;
        self.hessian.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub batch: usize,
    pub lr: f64,
    /// Mini-batch loss before the update.
    pub loss: f64,
    /// Full training objective after the update, when tracked.
    pub objective: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch size and learning rate in effect at the start of the epoch.
    pub batch: usize,
    pub lr: f64,
    pub gamma: f64,
    pub train_loss: f64,
    /// Last curvature magnitude measured during the epoch.
    pub lambda: Option<f64>,
    pub lambda_negative: Option<bool>,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Parameter updates performed so far.
    pub updates: usize,
    pub events: Vec<ScaleEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { step: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub strategy: Strategy,
    pub seed: u64,
    pub theory_mode: bool,
    pub initial_objective: Option<f64>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub status: RunStatus,
    pub final_params: ParamVector,
    pub warnings: Vec<String>,
}

impl TrainingLog {
    /// Number of parameter updates.
    pub fn updates(&self) -> usize {
        self.steps.len()
    }

    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }

    /// First update count after which the tracked objective is at most
    /// `target`.
    pub fn updates_to_reach(&self, target: f64) -> Option<usize> {
        if self.initial_objective.is_some_and(|l| l <= target) {
            return Some(0);
        }
        self.steps
            .iter()
            .find(|s| s.objective.is_some_and(|l| l <= target))
            .map(|s| s.step)
    }
}

/// `θ − lr·g`.
pub fn sgd_step(params: &ParamVector, grad: &[f64], lr: f64) -> Result<ParamVector> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
    }
    if grad.len() != params.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), found: grad.len() });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { step: 0 });
    }
    let v = params.values().iter().zip(grad).map(|(t, g)| t - lr * g).collect();
    params.with_values(v)
}

/// Batch sizes produced by growing the batch at would-be decay epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GgSchedule {
    pub b_init: usize,
    /// `(epoch, batch)`: the batch in effect after `epoch` ends.
    pub changes: Vec<(usize, usize)>,
    pub warnings: Vec<String>,
}

impl GgSchedule {
    /// Batch used during (1-based) `epoch`.
    pub fn batch_for_epoch(&self, epoch: usize) -> usize {
        self.changes
            .iter()
            .take_while(|(e, _)| *e < epoch)
            .last()
            .map_or(self.b_init, |&(_, b)| b)
    }

    pub fn batches(&self) -> Vec<usize> {
        std::iter::once(self.b_init).chain(self.changes.iter().map(|&(_, b)| b)).collect()
    }
}

/// Multiplies the batch by each milestone factor at its epoch, clamping at
/// `b_max` with a warning.
pub fn replay_gg_schedule(b_init: usize, b_max: usize, milestones: &[(usize, f64)]) -> Result<GgSchedule> {
    if b_init < 1 || b_init > b_max {
        return Err(Error::Config(format!("need 1 <= b_init <= b_max, got {b_init} and {b_max}")));
    }
    let mut sorted = milestones.to_vec();
    sorted.sort_by_key(|m| m.0);
    let mut batch = b_init;
    let mut changes = Vec::new();
    let mut warnings = Vec::new();
    for (epoch, factor) in sorted {
        if !(factor >= 1.0) {
            return Err(Error::Config(format!("batch multiplier must be >= 1, got {factor}")));
        }
        let wanted = (batch as f64 * factor).round();
        batch = if wanted > b_max as f64 {
            warnings.push(format!("epoch {epoch}: batch {wanted} clamped to {b_max}"));
            b_max
        } else {
            wanted as usize
        };
        changes.push((epoch, batch));
    }
    Ok(GgSchedule { b_init, changes, warnings })
}

/// Full-dataset objective with the data-dependent part of a quadratic
/// precomputed.
enum FullObjective<'a> {
    Quadratic { a: nalgebra::DMatrix<f64>, mean: nalgebra::DVector<f64>, spread: f64 },
    Generic { model: &'a Model, data: &'a Batch },
}

impl<'a> FullObjective<'a> {
    fn new(model: &'a Model, data: &'a Batch) -> Self {
        if let Model::Quadratic(q) = model {
            let a = q.matrix().clone();
            let n = data.len() as f64;
            let mut mean = nalgebra::DVector::zeros(q.dim());
            let mut spread = 0.0;
            for i in 0..data.len() {
                let z = nalgebra::DVector::from_column_slice(data.x(i));
                spread += 0.5 * z.dot(&(&a * &z));
                mean += z;
            }
            mean /= n;
            spread = spread / n - 0.5 * mean.dot(&(&a * &mean));
            return FullObjective::Quadratic { a, mean, spread };
        }
        FullObjective::Generic { model, data }
    }

    fn eval(&self, params: &ParamVector) -> Result<f64> {
        match self {
            FullObjective::Quadratic { a, mean, spread } => {
                let u = nalgebra::DVector::from_column_slice(params.values()) - mean;
                Ok(0.5 * u.dot(&(a * &u)) + spread)
            }
            FullObjective::Generic { model: m @ Model::Mlp(_), data } => crate::autodiff::loss(m, params, data),
            FullObjective::Generic { model, data } => Ok(model.loss_grad(params, data)?.loss),
        }
    }
}

fn accuracy(model: &Model, params: &ParamVector, data: &Batch) -> Option<f64> {
    let mut hit = 0usize;
    for i in 0..data.len() {
        let k = model.predict_class(params.values(), data.x(i))?;
        hit += usize::from(k as f64 == data.y(i));
    }
    Some(hit as f64 / data.len() as f64)
}

struct Run<'a> {
    model: &'a Model,
    train: &'a Dataset,
    cfg: &'a TrainConfig,
    objective: FullObjective<'a>,
    params: ParamVector,
    state: SchedulerState,
    adv_rng: ChaCha8Rng,
    steps: Vec<StepRecord>,
    events: Vec<ScaleEvent>,
    last_lambda: Option<(f64, bool)>,
}

enum Outcome {
    Continue,
    Diverged(String),
}

impl Run<'_> {
    fn adv_config(&self) -> AdvConfig {
        AdvConfig {
            epsilon: self.cfg.scheduler.eps_adv,
            ratio: self.state.gamma,
            clip_unit: self.cfg.clip_unit,
        }
    }

    fn mixing(&self) -> bool {
        self.cfg.strategy == Strategy::Absa && self.state.gamma > 0.0
    }

    fn step(&mut self, epoch: usize, idx: &[usize]) -> Result<Outcome> {
        let mut batch = self.train.batch(idx);
        if self.mixing() {
            let adv = self.adv_config();
            batch = mix_adversarial(self.model, &self.params, &batch, &adv, &mut self.adv_rng)?;
        }
        let r = match self.model.loss_grad(&self.params, &batch) {
            Ok(r) => r,
            Err(Error::NonFinite { .. } | Error::NonFiniteGradient { .. }) => {
                return Ok(Outcome::Diverged("non-finite loss or gradient".into()))
            }
            Err(e) => return Err(e),
        };
        if r.loss.abs() > DIVERGENCE_THRESHOLD {
            return Ok(Outcome::Diverged(format!("loss {} exceeds threshold", r.loss)));
        }
        let lr = self.state.lr;
        self.params = sgd_step(&self.params, &r.grad, lr)?;
        let objective = if self.cfg.track_objective {
            let l = self.objective.eval(&self.params);
            match l {
                Ok(l) if l.is_finite() && l.abs() <= DIVERGENCE_THRESHOLD => Some(l),
                Ok(_) | Err(Error::NonFinite { .. } | Error::NonFiniteGradient { .. }) => {
                    return Ok(Outcome::Diverged("objective diverged".into()))
                }
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        self.steps.push(StepRecord {
            step: self.steps.len() + 1,
            epoch,
            batch: idx.len(),
            lr,
            loss: r.loss,
            objective,
        });
        Ok(Outcome::Continue)
    }

    /// One curvature measurement followed by the scheduler transition.
    fn measure(&mut self, epoch: usize) -> Result<Outcome> {
        let mut sample = hessian_sample(self.train, &self.cfg.hessian);
        if self.cfg.hessian_on_mixed && self.mixing() {
            let adv = self.adv_config();
            sample = mix_adversarial(self.model, &self.params, &sample, &adv, &mut self.adv_rng)?;
        }
        let est = match &self.cfg.block {
            Some(block) => batch_block_top_eigenvalue(self.model, &self.params, &sample, block, &self.cfg.hessian),
            None => batch_top_eigenvalue(self.model, &self.params, &sample, &self.cfg.hessian),
        };
        let est = match est {
            Ok(e) => e,
            Err(Error::NonFinite { .. }) => return Ok(Outcome::Diverged("non-finite curvature".into())),
            Err(e) => return Err(e),
        };
        self.last_lambda = Some((est.magnitude(), est.is_negative()));
        self.state.epoch = epoch;
        let ev = self.state.on_epoch_end(est.magnitude(), &self.cfg.scheduler);
        self.events.push(ev);
        Ok(Outcome::Continue)
    }
}

/// Runs `cfg.epochs` epochs of mini-batch SGD from `params0`.
///
/// Epochs are numbered from 1. A measurement at the end of epoch `e` is
/// followed by the step decay for `e`, so a decay epoch of 30 means epochs
/// 31 and later use the reduced rate.
pub fn train(
    model: &Model,
    params0: &ParamVector,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainingLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if params0.len() != model.num_params() {
        return Err(Error::DimensionMismatch { expected: model.num_params(), found: params0.len() });
    }
    let sc = &cfg.scheduler;
    let gg = if cfg.strategy == Strategy::Gg {
        let milestones: Vec<(usize, f64)> = sc.decay_epochs.iter().map(|&e| (e, sc.decay_ratio)).collect();
        Some(replay_gg_schedule(sc.b_init, sc.b_max, &milestones)?)
    } else {
        None
    };
    let mut run = Run {
        model,
        train,
        cfg,
        objective: FullObjective::new(model, train.examples()),
        params: params0.clone(),
        state: SchedulerState::init(sc)?,
        adv_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ ADV_STREAM),
        steps: Vec::new(),
        events: Vec::new(),
        last_lambda: None,
    };
    if cfg.strategy != Strategy::Absa {
        run.state.gamma = 0.0;
    }
    let mut warnings = gg.as_ref().map(|g| g.warnings.clone()).unwrap_or_default();
    let initial_objective = if cfg.track_objective { Some(run.objective.eval(&run.params)?) } else { None };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut seen = 0usize;
    let mut next_mark = match cfg.cadence {
        Cadence::Samples(s) => s,
        Cadence::Epoch => usize::MAX,
    };
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut status = RunStatus::Completed;

    'outer: for epoch in 1..=cfg.epochs {
        run.state.epoch = epoch;
        run.state.enforce_tau(sc);
        if let Some(g) = &gg {
            run.state.batch = g.batch_for_epoch(epoch);
        }
        run.last_lambda = None;
        let (batch0, lr0, gamma0) = (run.state.batch, run.state.lr, run.state.gamma);
        if cfg.sampling == Sampling::Shuffle {
            order.shuffle(&mut rng);
        }
        let mut pos = 0;
        while pos < n {
            let b = run.state.batch.min(n - pos);
            let idx: Vec<usize> = match cfg.sampling {
                Sampling::Shuffle => order[pos..pos + b].to_vec(),
                Sampling::WithReplacement => (0..b).map(|_| rng.random_range(0..n)).collect(),
            };
            pos += b;
            if let Outcome::Diverged(reason) = run.step(epoch, &idx)? {
                status = RunStatus::Diverged { step: run.steps.len() + 1, reason };
                break 'outer;
            }
            seen += b;
            while seen >= next_mark {
                next_mark = next_mark.saturating_add(match cfg.cadence {
                    Cadence::Samples(s) => s,
                    Cadence::Epoch => usize::MAX,
                });
                if cfg.strategy.adaptive() {
                    if let Outcome::Diverged(reason) = run.measure(epoch)? {
                        status = RunStatus::Diverged { step: run.steps.len(), reason };
                        break 'outer;
                    }
                }
            }
        }
        if cfg.strategy.adaptive() && cfg.cadence == Cadence::Epoch {
            if let Outcome::Diverged(reason) = run.measure(epoch)? {
                status = RunStatus::Diverged { step: run.steps.len(), reason };
                break 'outer;
            }
        }
        if cfg.strategy != Strategy::Gg {
            run.state.lr_decay(epoch, sc);
        }
        let train_loss = run.objective.eval(&run.params).unwrap_or(f64::NAN);
        if !train_loss.is_finite() || train_loss.abs() > DIVERGENCE_THRESHOLD {
            status = RunStatus::Diverged { step: run.steps.len(), reason: "training loss diverged".into() };
        }
        let (test_loss, test_accuracy) = match test {
            Some(t) if cfg.eval_every > 0 && epoch % cfg.eval_every == 0 => {
                let l = match model {
                    Model::Mlp(_) => crate::autodiff::loss(model, &run.params, t.examples()).ok(),
                    _ => model.loss_grad(&run.params, t.examples()).ok().map(|r| r.loss),
                };
                (l, accuracy(model, &run.params, t.examples()))
            }
            _ => (None, None),
        };
        epochs.push(EpochRecord {
            epoch,
            batch: batch0,
            lr: lr0,
            gamma: gamma0,
            train_loss,
            lambda: run.last_lambda.map(|l| l.0),
            lambda_negative: run.last_lambda.map(|l| l.1),
            test_loss,
            test_accuracy,
            updates: run.steps.len(),
            events: std::mem::take(&mut run.events),
        });
        if matches!(status, RunStatus::Diverged { .. }) {
            break;
        }
    }
    if let RunStatus::Diverged { step, reason } = &status {
        warnings.push(format!("run diverged at step {step}: {reason}"));
    }
    Ok(TrainingLog {
        strategy: cfg.strategy,
        seed: cfg.seed,
        theory_mode: false,
        initial_objective,
        steps: run.steps,
        epochs,
        status,
        final_params: run.params,
        warnings,
    })
}

/// Theory-mode run: step `k` draws `b_k` examples with replacement and
/// uses learning rate `b_k·η0`; the full objective is logged after every
/// step.
pub fn run_theory(
    model: &Model,
    params0: &ParamVector,
    dataset: &Dataset,
    sched: &BatchSchedule,
    seed: u64,
) -> Result<TrainingLog> {
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let objective = FullObjective::new(model, dataset.examples());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dataset.len();
    let mut params = params0.clone();
    let initial = objective.eval(&params)?;
    let mut steps = Vec::with_capacity(sched.len());
    let mut status = RunStatus::Completed;
    for (k, &b) in sched.b.iter().enumerate() {
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
        let r = model.loss_grad(&params, &dataset.batch(&idx))?;
        let lr = b as f64 * sched.eta0;
        params = sgd_step(&params, &r.grad, lr)?;
        let obj = objective.eval(&params)?;
        steps.push(StepRecord { step: k + 1, epoch: 0, batch: b, lr, loss: r.loss, objective: Some(obj) });
        if !obj.is_finite() || obj.abs() > DIVERGENCE_THRESHOLD {
            status = RunStatus::Diverged { step: k + 1, reason: "objective diverged".into() };
            break;
        }
    }
    Ok(TrainingLog {
        strategy: Strategy::Abs,
        seed,
        theory_mode: true,
        initial_objective: Some(initial),
        steps,
        epochs: Vec::new(),
        status,
        final_params: params,
        warnings: Vec::new(),
    })
}

/// Independent theory-mode runs for `seeds`, executed in parallel and
/// returned in seed order.
pub fn theory_sweep(
    model: &Model,
    params0: &ParamVector,
    dataset: &Dataset,
    sched: &BatchSchedule,
    seeds: &[u64],
) -> Result<Vec<TrainingLog>> {
    seeds
        .par_iter()
        .map(|&s| run_theory(model, params0, dataset, sched, s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_basic() {
        let p = ParamVector::flat(vec![1.0, 1.0]);
        assert_eq!(sgd_step(&p, &[1.0, 0.0], 0.5).unwrap().values(), &[0.5, 1.0]);
        assert!(sgd_step(&p, &[1.0, 0.0], 0.0).is_err());
        assert!(matches!(sgd_step(&p, &[f64::NAN, 0.0], 0.1), Err(Error::NonFiniteGradient { .. })));
    }

    #[test]
    fn gg_replay() {
        let g = replay_gg_schedule(128, 100_000, &[(30, 5.0), (60, 5.0), (80, 5.0)]).unwrap();
        assert_eq!(g.batches(), vec![128, 640, 3200, 16000]);
        assert_eq!(g.batch_for_epoch(30), 128);
        assert_eq!(g.batch_for_epoch(31), 640);
        assert_eq!(g.batch_for_epoch(81), 16000);
        let c = replay_gg_schedule(128, 1000, &[(30, 5.0), (60, 5.0), (80, 5.0)]).unwrap();
        assert_eq!(c.batches(), vec![128, 640, 1000, 1000]);
        assert_eq!(c.warnings.len(), 2);
        let e = replay_gg_schedule(128, 1000, &[]).unwrap();
        assert_eq!(e.batch_for_epoch(500), 128);
    }

    #[test]
    fn strategy_names_parse() {
        for s in [Strategy::Bl, Strategy::Gg, Strategy::Abs, Strategy::Absa] {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("SGD".parse::<Strategy>().is_err());
    }
}
