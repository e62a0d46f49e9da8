//! Line-delimited JSON run logs.
//!
//! A training log starts with a `header` line, then one `step` line per
//! update and one `epoch` line per completed epoch, and ends with a
//! `status` line. Event files hold the header followed by one `event` line
//! per scheduler measurement. Non-finite losses are written as `null`.

use std::io::{BufRead, Write};
use std::path::Path;

use adabatch::trainer::{EpochRecord, RunStatus, StepRecord};
use adabatch::{ScaleEvent, Strategy, TrainingLog};
use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub run_id: String,
    pub config_hash: String,
    /// Arm label from the config (`GD` appears here, `BL` in `strategy`).
    pub label: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub theory_mode: bool,
    pub initial_objective: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLine {
    pub epoch: usize,
    pub batch: usize,
    pub lr: f64,
    pub gamma: f64,
    pub train_loss: Option<f64>,
    pub lambda: Option<f64>,
    pub lambda_negative: Option<bool>,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub updates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Header(Header),
    Step(StepRecord),
    Epoch(EpochLine),
    Event(ScaleEvent),
    Status { status: RunStatus, updates: usize, warnings: Vec<String> },
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl From<&EpochRecord> for EpochLine {
    fn from(e: &EpochRecord) -> Self {
        Self {
            epoch: e.epoch,
            batch: e.batch,
            lr: e.lr,
            gamma: e.gamma,
            train_loss: finite(e.train_loss),
            lambda: e.lambda,
            lambda_negative: e.lambda_negative,
            test_loss: e.test_loss.and_then(finite),
            test_accuracy: e.test_accuracy,
            updates: e.updates,
        }
    }
}

fn write_line(w: &mut impl Write, r: &Record) -> anyhow::Result<()> {
    serde_json::to_writer(&mut *w, r)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn write_training_log(w: &mut impl Write, header: &Header, log: &TrainingLog) -> anyhow::Result<()> {
    write_line(w, &Record::Header(header.clone()))?;
    let mut steps = log.steps.iter().peekable();
    for e in &log.epochs {
        while let Some(s) = steps.next_if(|s| s.step <= e.updates) {
            write_line(w, &Record::Step(s.clone()))?;
        }
        write_line(w, &Record::Epoch(e.into()))?;
    }
    for s in steps {
        write_line(w, &Record::Step(s.clone()))?;
    }
    write_line(
        w,
        &Record::Status { status: log.status.clone(), updates: log.updates(), warnings: log.warnings.clone() },
    )
}

pub fn write_events(w: &mut impl Write, header: &Header, log: &TrainingLog) -> anyhow::Result<()> {
    write_line(w, &Record::Header(header.clone()))?;
    for ev in log.epochs.iter().flat_map(|e| &e.events) {
        write_line(w, &Record::Event(ev.clone()))?;
    }
    Ok(())
}

/// A training log read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedLog {
    pub header: Header,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochLine>,
    pub status: RunStatus,
}

impl ParsedLog {
    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }
}

pub fn read_training_log(path: &Path) -> anyhow::Result<ParsedLog> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut header = None;
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut status = None;
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).with_context(|| format!("{}:{}: malformed record", path.display(), i + 1))?;
        match rec {
            Record::Header(h) if header.is_none() && i == 0 => header = Some(h),
            Record::Header(_) => bail!("{}:{}: unexpected header", path.display(), i + 1),
            Record::Step(s) => steps.push(s),
            Record::Epoch(e) => epochs.push(e),
            Record::Status { status: s, .. } => status = Some(s),
            Record::Event(_) => bail!("{}:{}: event record in a training log", path.display(), i + 1),
        }
    }
    Ok(ParsedLog {
        header: header.with_context(|| format!("{}: missing header", path.display()))?,
        steps,
        epochs,
        status: status.with_context(|| format!("{}: missing status record (incomplete log)", path.display()))?,
    })
}
