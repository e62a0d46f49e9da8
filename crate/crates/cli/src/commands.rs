//! The four verbs. Each writes into `<out>/<run id>/<verb>/`, staging the
//! files in a hidden sibling directory that is renamed into place only when
//! the verb finishes; a fatal error removes the staging directory.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use adabatch::convergence::{
    check_lemma3, check_lemma4, estimate_variance_bounds, eta0_max, sample_thetas, theorem_bound, validate_run,
    BatchSchedule, ConvexConstants,
};
use adabatch::models::{logistic_constants, quadratic_constants, quadratic_optimum};
use adabatch::sim::{breakdown_total, imagenet, simulate as sim_run, speedup, SimSchedule};
use adabatch::trainer::{theory_sweep, train, RunStatus};
use adabatch::{Dataset, Model, ModelKind, TimeBreakdown, TrainingLog};
use anyhow::Context;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{hash_bytes, Checkpoint};
use crate::config::{load_data, Arm, Loaded, Scenario, PRESET_IMAGENET};
use crate::logfile::{read_training_log, write_events, write_training_log, Header, ParsedLog};
use crate::plot::{self, PlotKind, Row};
use crate::CliError;

/// Flags shared by every verb.
#[derive(Clone, Debug, Default)]
pub struct Options {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed_override: Option<u64>,
    /// Worker threads; `None` uses one per core.
    pub jobs: Option<usize>,
}

struct Staging {
    partial: PathBuf,
    target: PathBuf,
    committed: bool,
}

impl Staging {
    fn new(target: PathBuf) -> Result<Self, CliError> {
        let name = target.file_name().and_then(|n| n.to_str()).unwrap_or("out");
        let partial = target.with_file_name(format!(".{name}.partial"));
        if partial.exists() {
            std::fs::remove_dir_all(&partial)?;
        }
        std::fs::create_dir_all(&partial)
            .with_context(|| format!("creating {}", partial.display()))
            .map_err(CliError::Runtime)?;
        Ok(Self { partial, target, committed: false })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.partial.join(rel)
    }

    fn subdir(&self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.partial.join(rel);
        std::fs::create_dir_all(&p)?;
        Ok(p)
    }

    fn commit(mut self) -> Result<PathBuf, CliError> {
        if self.target.exists() {
            std::fs::remove_dir_all(&self.target)?;
        }
        std::fs::rename(&self.partial, &self.target)?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = std::fs::remove_dir_all(&self.partial);
        }
    }
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    if jobs == Some(0) {
        return Err(CliError::Validation("--jobs: must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::runtime(format!("thread pool: {e}")))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(anyhow::Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn copy_config(opts: &Options, stage: &Staging) -> Result<(), CliError> {
    std::fs::copy(&opts.config, stage.path("config.toml"))?;
    Ok(())
}

fn check_dims(model: &Model, data: &Dataset) -> Result<(), CliError> {
    if model.input_dim() != data.dim() {
        let field = if model.kind() == ModelKind::Quadratic { "model.matrix" } else { "model.dims" };
        return Err(CliError::Validation(format!(
            "{field}: model expects {} input features, dataset has {}",
            model.input_dim(),
            data.dim()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------- run

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub label: String,
    pub strategy: String,
    pub seed: u64,
    pub status: RunStatus,
    pub updates: usize,
    pub final_train_loss: Option<f64>,
    pub final_objective: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    pub final_batch: Option<usize>,
    /// Updates this run needed to reach the final objective of the `BL` run
    /// with the same seed, when both tracked the objective.
    pub updates_to_reach_bl: Option<usize>,
    pub log: String,
    pub events: String,
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub train_size: usize,
    pub validation_size: Option<usize>,
    pub runs: Vec<RunEntry>,
    pub plots: Vec<String>,
    pub skipped_plots: Vec<String>,
}

fn stem(label: &str, seed: u64) -> String {
    format!("{label}-s{seed}")
}

fn run_one(
    loaded: &Loaded,
    model: &Model,
    train_set: &Dataset,
    val: Option<&Dataset>,
    arm: &Arm,
    seed: u64,
    stage: &Staging,
) -> Result<TrainingLog, CliError> {
    let mut tc = loaded.config.train.clone();
    tc.seed = seed;
    tc.strategy = arm.strategy;
    if arm.full_batch {
        tc.scheduler.b_init = train_set.len();
        tc.scheduler.b_max = train_set.len();
    }
    let p0 = model.init_params(seed);
    let log = train(model, &p0, train_set, val, &tc)?;
    let header = Header {
        run_id: loaded.run_id.clone(),
        config_hash: loaded.hash.clone(),
        label: arm.label.clone(),
        strategy: arm.strategy,
        seed,
        theory_mode: false,
        initial_objective: log.initial_objective,
    };
    let name = stem(&arm.label, seed);
    let mut w = BufWriter::new(std::fs::File::create(stage.path(&format!("logs/{name}.jsonl")))?);
    write_training_log(&mut w, &header, &log)?;
    w.flush()?;
    let mut w = BufWriter::new(std::fs::File::create(stage.path(&format!("events/{name}.jsonl")))?);
    write_events(&mut w, &header, &log)?;
    w.flush()?;
    let ckpt = Checkpoint {
        run_id: loaded.run_id.clone(),
        config_hash: hash_bytes(&loaded.hash).expect("sha256 hex"),
        params: log.final_params.clone(),
    };
    ckpt.write(&stage.path(&format!("checkpoints/{name}.ckpt"))).map_err(anyhow::Error::from)?;
    Ok(log)
}

/// Writes every training plot the logs support; returns written and
/// skipped file names.
fn emit_training_plots(
    dir: &Path,
    run_id: &str,
    hash: &str,
    logs: &[ParsedLog],
    multi_seed: bool,
    only: Option<PlotKind>,
) -> Result<(Vec<String>, Vec<String>), CliError> {
    let mut written = Vec::new();
    let mut skipped = Vec::new();
    let kinds: Vec<PlotKind> = match only {
        Some(k) => vec![k],
        None => PlotKind::TRAINING.to_vec(),
    };
    for kind in kinds {
        match plot::training_rows(kind, logs, multi_seed) {
            Ok(rows) => {
                plot::write_csv(&dir.join(kind.file_name()), run_id, hash, &rows)?;
                written.push(kind.file_name().to_string());
            }
            Err(e) if only.is_none() => skipped.push(format!("{}: {e}", kind.file_name())),
            Err(e) => return Err(CliError::Runtime(e)),
        }
    }
    Ok((written, skipped))
}

pub fn run(opts: &Options, out: &mut dyn Write) -> Result<u8, CliError> {
    let loaded = Loaded::read(&opts.config, opts.seed_override)?;
    let cfg = &loaded.config;
    let spec = cfg.model_spec()?;
    let arms = cfg.arms()?;
    let model = Model::from_spec(spec)?;
    let (train_set, val) = load_data(cfg.dataset_config()?, spec, &loaded.base_dir)?;
    check_dims(&model, &train_set)?;
    let pool = pool(opts.jobs)?;

    let stage = Staging::new(loaded.run_dir(opts.out.as_deref()).join("run"))?;
    for d in ["logs", "events", "checkpoints", "plots"] {
        stage.subdir(d)?;
    }
    copy_config(opts, &stage)?;

    let tasks: Vec<(&Arm, u64)> = cfg.seeds.iter().flat_map(|&s| arms.iter().map(move |a| (a, s))).collect();
    let logs: Vec<TrainingLog> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(arm, seed)| run_one(&loaded, &model, &train_set, val.as_ref(), arm, seed, &stage))
            .collect::<Result<Vec<_>, _>>()
    })?;

    let mut entries = Vec::with_capacity(tasks.len());
    let mut parsed = Vec::with_capacity(tasks.len());
    for (&(arm, seed), log) in tasks.iter().zip(&logs) {
        let name = stem(&arm.label, seed);
        let reference = tasks
            .iter()
            .zip(&logs)
            .find(|((a, s), _)| a.label == "BL" && *s == seed)
            .and_then(|(_, l)| l.steps.last()?.objective);
        let last = log.epochs.last();
        entries.push(RunEntry {
            label: arm.label.clone(),
            strategy: arm.strategy.name().to_string(),
            seed,
            status: log.status.clone(),
            updates: log.updates(),
            final_train_loss: log.final_train_loss().filter(|l| l.is_finite()),
            final_objective: log.steps.last().and_then(|s| s.objective),
            final_test_accuracy: last.and_then(|e| e.test_accuracy),
            final_batch: log.steps.last().map(|s| s.batch),
            updates_to_reach_bl: reference.and_then(|t| log.updates_to_reach(t)),
            log: format!("logs/{name}.jsonl"),
            events: format!("events/{name}.jsonl"),
            checkpoint: format!("checkpoints/{name}.ckpt"),
        });
        parsed.push(read_training_log(&stage.path(&format!("logs/{name}.jsonl")))?);
    }
    let (plots, skipped_plots) =
        emit_training_plots(&stage.path("plots"), &loaded.run_id, &loaded.hash, &parsed, cfg.seeds.len() > 1, None)?;
    let manifest = RunManifest {
        run_id: loaded.run_id.clone(),
        config_hash: loaded.hash.clone(),
        train_size: train_set.len(),
        validation_size: val.as_ref().map(Dataset::len),
        runs: entries,
        plots,
        skipped_plots,
    };
    write_json(&stage.path("manifest.json"), &manifest)?;
    let dir = stage.commit()?;

    writeln!(out, "run {} -> {}", loaded.run_id, dir.display())?;
    let mut diverged = 0;
    for e in &manifest.runs {
        let status = match &e.status {
            RunStatus::Completed => "completed".to_string(),
            RunStatus::Diverged { step, reason } => {
                diverged += 1;
                format!("DIVERGED at step {step} ({reason})")
            }
        };
        let mut line = format!("  {:<5} seed {:<4} {:>7} updates  {status}", e.label, e.seed, e.updates);
        if let Some(l) = e.final_objective.or(e.final_train_loss) {
            line.push_str(&format!("  loss {}", plot::sig6(l)));
        }
        if let Some(a) = e.final_test_accuracy {
            line.push_str(&format!("  acc {}", plot::sig6(a)));
        }
        if let (Some(r), false) = (e.updates_to_reach_bl, e.label == "BL") {
            line.push_str(&format!("  reaches BL loss after {r}"));
        }
        writeln!(out, "{line}")?;
    }
    for s in &manifest.skipped_plots {
        writeln!(out, "  skipped {s}")?;
    }
    Ok(if diverged > 0 { 2 } else { 0 })
}

// ---------------------------------------------------------------- verify

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub run_id: String,
    pub config_hash: String,
    pub constants: ConvexConstants,
    pub eta0: f64,
    pub eta0_max: f64,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub checks: Vec<Check>,
}

fn theory_constants(model: &Model, data: &Dataset) -> Result<ConvexConstants, CliError> {
    model.require_convex()?;
    match model {
        Model::Quadratic(q) => {
            let rows: Vec<Vec<f64>> = (0..q.dim()).map(|i| q.matrix().row(i).iter().copied().collect()).collect();
            let c = quadratic_constants(&rows)?;
            let (_, lstar) = quadratic_optimum(q, data.examples());
            Ok(ConvexConstants::new(c.lg, c.cs, 0.0, 0.0, lstar)?)
        }
        Model::Logistic(l) => Ok(logistic_constants(data, l.l2())?),
        Model::Mlp(_) => unreachable!("convexity checked above"),
    }
}

pub fn verify(opts: &Options, out: &mut dyn Write) -> Result<u8, CliError> {
    let loaded = Loaded::read(&opts.config, opts.seed_override)?;
    let cfg = &loaded.config;
    let theory = cfg
        .theory
        .as_ref()
        .ok_or_else(|| CliError::Validation("theory: verify needs a [theory] table".into()))?;
    let spec = cfg.model_spec()?;
    let model = Model::from_spec(spec)?;
    model.require_convex()?;
    let (data, _) = load_data(cfg.dataset_config()?, spec, &loaded.base_dir)?;
    check_dims(&model, &data)?;
    let pool = pool(opts.jobs)?;

    let c = theory_constants(&model, &data)?;
    let base = cfg.seeds[0];
    let init = model.init_params(base);
    let p0 = init
        .with_values(vec![theory.init; init.len()])
        .map_err(|e| CliError::Validation(format!("theory.init: {e}")))?;
    let thetas = sample_thetas(&p0, theory.sample_points, theory.sample_radius, base ^ 0x5eed);
    let (m, mv) = pool.install(|| estimate_variance_bounds(&model, &data, &thetas))?;
    let c = c.with_variance(m, mv)?;
    let b_max = theory.phases.iter().map(|p| p.0).max().unwrap_or(1);
    let max = eta0_max(&c, b_max);
    let eta0 = theory.eta0.unwrap_or(theory.eta0_fraction * max);
    let sched = BatchSchedule::phases(&theory.phases, eta0)?;
    // refuses an inadmissible step size before any work is done
    theorem_bound(&c, &sched, 0.0).map_err(|e| match e {
        adabatch::Error::StepSizeTooLarge { eta0, max } => CliError::Validation(format!(
            "theory.eta0: step size {eta0} exceeds the admissible maximum {max} = 1/(L_g (M_v + B_max))"
        )),
        other => other.into(),
    })?;

    let stage = Staging::new(loaded.run_dir(opts.out.as_deref()).join("verify"))?;
    copy_config(opts, &stage)?;
    writeln!(
        out,
        "constants: L_g {} c_s {} M {} M_v {} L_* {}; eta0 {} (max {})",
        plot::sig6(c.lg),
        plot::sig6(c.cs),
        plot::sig6(c.m),
        plot::sig6(c.mv),
        plot::sig6(c.lstar),
        plot::sig6(eta0),
        plot::sig6(max)
    )?;

    let seeds: Vec<u64> = (0..theory.seeds as u64).map(|k| base + k).collect();
    let logs = pool.install(|| theory_sweep(&model, &p0, &data, &sched, &seeds))?;
    let mut checks = Vec::new();
    if let Some(l) = logs.iter().find(|l| l.diverged()) {
        return Err(CliError::runtime(format!("theory run with seed {} diverged", l.seed)));
    }
    let v = validate_run(&logs, &c, &sched)?;
    checks.push(Check {
        name: "optimality-gap bound".into(),
        passed: v.passed(),
        detail: match v.first_violation {
            None => format!(
                "{} seeds x {} steps; gap {} -> {}, bound at end {}, min margin {}",
                v.seeds,
                sched.len(),
                plot::sig6(v.mean_gap[0]),
                plot::sig6(v.mean_gap[sched.len()]),
                plot::sig6(v.bound[sched.len()]),
                plot::sig6(v.worst_margin)
            ),
            Some(k) => format!(
                "mean gap {} exceeds bound {} + 3SE at step {k}",
                plot::sig6(v.mean_gap[k]),
                plot::sig6(v.bound[k])
            ),
        },
    });

    let l3 = check_lemma3(&model, &data, &c, &thetas)?;
    checks.push(Check {
        name: "gradient domination".into(),
        passed: l3.passed(),
        detail: format!(
            "{} points, {} violations, min slack {}",
            thetas.len(),
            l3.violations.len(),
            plot::sig6(l3.worst_slack)
        ),
    });

    let mut l4_ok = true;
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    let points: Vec<_> = std::iter::once(&p0).chain(thetas.iter().take(2)).collect();
    for (i, theta) in points.iter().enumerate() {
        let r = check_lemma4(&model, &data, &c, theta, &theory.lemma4_batches, theory.lemma4_draws, base + i as u64)?;
        for e in &r.entries {
            if e.bound > 0.0 {
                worst = worst.max(e.variance / e.bound);
            }
            if !e.holds {
                failures.push(format!("point {i} |B|={}: {} > {}", e.batch, plot::sig6(e.variance), plot::sig6(e.bound)));
            }
        }
        l4_ok &= r.passed();
    }
    checks.push(Check {
        name: "mini-batch variance bound".into(),
        passed: l4_ok,
        detail: if failures.is_empty() {
            format!(
                "|B| in {:?} at {} points, {} draws; max variance/bound {}",
                theory.lemma4_batches,
                points.len(),
                theory.lemma4_draws,
                plot::sig6(worst)
            )
        } else {
            failures.join("; ")
        },
    });

    let mut rows = Vec::with_capacity(2 * (sched.len() + 1));
    for (k, g) in v.mean_gap.iter().enumerate() {
        rows.push(Row { series: "mean_gap".into(), x: k.to_string(), y: *g });
    }
    for (k, b) in v.bound.iter().enumerate() {
        rows.push(Row { series: "bound".into(), x: k.to_string(), y: *b });
    }
    plot::write_csv(&stage.path("gap_vs_iter.csv"), &loaded.run_id, &loaded.hash, &rows)?;
    let report = VerifyReport {
        run_id: loaded.run_id.clone(),
        config_hash: loaded.hash.clone(),
        constants: c,
        eta0,
        eta0_max: max,
        seeds,
        steps: sched.len(),
        checks,
    };
    write_json(&stage.path("convergence.json"), &report)?;
    let dir = stage.commit()?;

    for ch in &report.checks {
        writeln!(out, "{} {}: {}", if ch.passed { "PASS" } else { "FAIL" }, ch.name, ch.detail)?;
    }
    writeln!(out, "report -> {}", dir.display())?;
    Ok(if report.checks.iter().all(|c| c.passed) { 0 } else { 2 })
}

// ---------------------------------------------------------------- simulate

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimMethod {
    pub name: String,
    pub breakdown: TimeBreakdown,
    pub speedup: Option<f64>,
    pub updates: Option<usize>,
    pub resizes: Option<usize>,
    pub measurements: Option<usize>,
    /// Relative error of each component against a reported row, for
    /// calibrated replays.
    pub relative_error: Option<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub run_id: String,
    pub config_hash: String,
    pub methods: Vec<SimMethod>,
}

fn reported(name: String, row: [f64; 4]) -> Result<SimMethod, CliError> {
    let b = breakdown_total(row[0], row[1], row[2], row[3])?;
    Ok(SimMethod {
        name,
        speedup: Some(speedup(&b, imagenet::BASELINE_TOTAL)?),
        breakdown: b,
        updates: None,
        resizes: None,
        measurements: None,
        relative_error: None,
    })
}

fn preset_imagenet(prefix: &str) -> Result<Vec<SimMethod>, CliError> {
    let mut methods = vec![
        reported(format!("{prefix}reported:GG"), imagenet::GG)?,
        reported(format!("{prefix}reported:ABSA"), imagenet::ABSA)?,
        reported(format!("{prefix}reported:ABSA-tuned"), imagenet::ABSA_TUNED)?,
    ];
    let cal = imagenet::calibrated()?;
    let replays: [(&str, SimSchedule, Option<[f64; 4]>); 4] = [
        ("baseline", imagenet::baseline(), None),
        ("GG", imagenet::gg(), Some(imagenet::GG)),
        ("ABSA", imagenet::absa(), Some(imagenet::ABSA)),
        ("ABSA-tuned", imagenet::absa_tuned(), Some(imagenet::ABSA_TUNED)),
    ];
    for (name, sched, observed) in replays {
        let r = sim_run(&sched, &cal.cost, imagenet::TRAIN_SIZE, sched.epochs())?;
        let b = r.breakdown;
        let sim = [b.comp, b.comm, b.resize, b.hessian];
        methods.push(SimMethod {
            name: format!("{prefix}replay:{name}"),
            breakdown: b,
            speedup: Some(speedup(&b, imagenet::BASELINE_TOTAL)?),
            updates: Some(r.updates),
            resizes: Some(r.resizes),
            measurements: Some(r.measurements),
            relative_error: observed.map(|o| std::array::from_fn(|i| if o[i] > 0.0 { (sim[i] - o[i]) / o[i] } else { 0.0 })),
        });
    }
    Ok(methods)
}

fn custom(prefix: &str, s: &Scenario) -> Result<SimMethod, CliError> {
    let sched = SimSchedule::from_phases(&s.phases, s.hessian.clone());
    let cost = s.cost.as_ref().expect("validated");
    let r = sim_run(&sched, cost, s.dataset_size.expect("validated"), sched.epochs())?;
    Ok(SimMethod {
        name: prefix.trim_end_matches('/').to_string(),
        breakdown: r.breakdown,
        speedup: s.baseline_total.map(|t| speedup(&r.breakdown, t)).transpose()?,
        updates: Some(r.updates),
        resizes: Some(r.resizes),
        measurements: Some(r.measurements),
        relative_error: None,
    })
}

pub fn simulate(opts: &Options, out: &mut dyn Write) -> Result<u8, CliError> {
    let loaded = Loaded::read(&opts.config, opts.seed_override)?;
    let cfg = &loaded.config;
    if cfg.simulate.is_empty() {
        return Err(CliError::Validation("simulate: at least one [[simulate]] scenario is required".into()));
    }
    let mut methods = Vec::new();
    for s in &cfg.simulate {
        let prefix = format!("{}/", s.name);
        match s.preset.as_deref() {
            Some(PRESET_IMAGENET) => methods.extend(preset_imagenet(&prefix)?),
            Some(other) => return Err(CliError::Validation(format!("simulate.preset: unknown preset `{other}`"))),
            None => methods.push(custom(&prefix, s)?),
        }
    }
    let stage = Staging::new(loaded.run_dir(opts.out.as_deref()).join("simulate"))?;
    copy_config(opts, &stage)?;
    stage.subdir("plots")?;
    let report = SimulateReport { run_id: loaded.run_id.clone(), config_hash: loaded.hash.clone(), methods };
    write_breakdown_csv(&stage.path("plots"), &report)?;
    write_json(&stage.path("simulate.json"), &report)?;
    let dir = stage.commit()?;

    writeln!(out, "{:<32} {:>10} {:>8} {:>8} {:>8} {:>10} {:>8}", "method", "comp", "comm", "resize", "hessian", "total", "speedup")?;
    for m in &report.methods {
        let b = &m.breakdown;
        writeln!(
            out,
            "{:<32} {:>10.0} {:>8.0} {:>8.0} {:>8.0} {:>10.0} {:>8}",
            m.name,
            b.comp,
            b.comm,
            b.resize,
            b.hessian,
            b.total,
            m.speedup.map_or("-".into(), |s| format!("{s:.2}x"))
        )?;
        if let Some(err) = m.relative_error {
            let parts: Vec<String> = ["comp", "comm", "resize", "hessian"]
                .iter()
                .zip(err)
                .map(|(n, e)| format!("{n} {:+.1}%", 100.0 * e))
                .collect();
            writeln!(out, "{:<32} vs reported: {}", "", parts.join(", "))?;
        }
    }
    writeln!(out, "breakdown -> {}", dir.display())?;
    Ok(0)
}

fn write_breakdown_csv(dir: &Path, report: &SimulateReport) -> Result<(), CliError> {
    let methods: Vec<(String, TimeBreakdown)> = report.methods.iter().map(|m| (m.name.clone(), m.breakdown)).collect();
    let rows = plot::time_breakdown(&methods)?;
    plot::write_csv(&dir.join(PlotKind::TimeBreakdown.file_name()), &report.run_id, &report.config_hash, &rows)?;
    Ok(())
}

// ---------------------------------------------------------------- plot

fn mismatch(what: &Path, found: &str, expected: &str) -> CliError {
    CliError::Validation(format!(
        "{}: produced by config hash {found}, but the config hashes to {expected}",
        what.display()
    ))
}

/// Regenerates plot CSVs from the artifacts of earlier `run` and
/// `simulate` invocations, after checking that they came from this config.
pub fn plot(opts: &Options, kind: Option<PlotKind>, out: &mut dyn Write) -> Result<u8, CliError> {
    let loaded = Loaded::read(&opts.config, opts.seed_override)?;
    let root = loaded.run_dir(opts.out.as_deref());
    let run_dir = root.join("run");
    let sim_dir = root.join("simulate");
    let want_training = kind.is_none_or(|k| k != PlotKind::TimeBreakdown);
    let want_sim = kind.is_none_or(|k| k == PlotKind::TimeBreakdown);
    let mut written = Vec::new();

    if want_training && (run_dir.is_dir() || kind.is_some()) {
        let path = run_dir.join("manifest.json");
        if !path.is_file() {
            return Err(CliError::runtime(format!("no run artifacts at {}; run `adabatch run` first", run_dir.display())));
        }
        let manifest: RunManifest = read_json(&path)?;
        if manifest.config_hash != loaded.hash {
            return Err(mismatch(&path, &manifest.config_hash, &loaded.hash));
        }
        let mut logs = Vec::with_capacity(manifest.runs.len());
        for e in &manifest.runs {
            let p = run_dir.join(&e.log);
            let log = read_training_log(&p)?;
            if log.header.config_hash != loaded.hash {
                return Err(mismatch(&p, &log.header.config_hash, &loaded.hash));
            }
            logs.push(log);
        }
        let multi_seed = {
            let mut seeds: Vec<u64> = logs.iter().map(|l| l.header.seed).collect();
            seeds.dedup();
            seeds.len() > 1
        };
        let plots = run_dir.join("plots");
        std::fs::create_dir_all(&plots)?;
        let (w, skipped) = emit_training_plots(&plots, &loaded.run_id, &loaded.hash, &logs, multi_seed, kind)?;
        written.extend(w.into_iter().map(|f| plots.join(f)));
        for s in skipped {
            writeln!(out, "skipped {s}")?;
        }
    }
    if want_sim && (sim_dir.is_dir() || kind.is_some()) {
        let path = sim_dir.join("simulate.json");
        if !path.is_file() {
            return Err(CliError::runtime(format!(
                "no simulation results at {}; run `adabatch simulate` first",
                sim_dir.display()
            )));
        }
        let report: SimulateReport = read_json(&path)?;
        if report.config_hash != loaded.hash {
            return Err(mismatch(&path, &report.config_hash, &loaded.hash));
        }
        let plots = sim_dir.join("plots");
        std::fs::create_dir_all(&plots)?;
        write_breakdown_csv(&plots, &report)?;
        written.push(plots.join(PlotKind::TimeBreakdown.file_name()));
    }
    if written.is_empty() {
        return Err(CliError::runtime(format!("no artifacts under {}", root.display())));
    }
    for p in &written {
        writeln!(out, "wrote {}", p.display())?;
    }
    Ok(0)
}
