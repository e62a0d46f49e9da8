//! Long-format plot data: one `series,x,y` row per point.
//!
//! Files start with a `#` comment naming the run id and config hash so a
//! CSV can be matched to the run that produced it. `y` carries six
//! significant digits.

use std::io::Write;
use std::path::Path;

use adabatch::TimeBreakdown;
use anyhow::bail;
use serde::{Deserialize, Serialize};

use crate::logfile::ParsedLog;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum PlotKind {
    LossVsIter,
    AccVsEpoch,
    BatchLrSchedule,
    TimeBreakdown,
}

impl PlotKind {
    pub const TRAINING: [PlotKind; 3] = [PlotKind::LossVsIter, PlotKind::AccVsEpoch, PlotKind::BatchLrSchedule];

    pub fn file_name(self) -> &'static str {
        match self {
            PlotKind::LossVsIter => "loss_vs_iter.csv",
            PlotKind::AccVsEpoch => "acc_vs_epoch.csv",
            PlotKind::BatchLrSchedule => "batch_lr_schedule.csv",
            PlotKind::TimeBreakdown => "time_breakdown.csv",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub series: String,
    pub x: String,
    pub y: f64,
}

impl Row {
    fn new(series: impl Into<String>, x: impl ToString, y: f64) -> Self {
        Self { series: series.into(), x: x.to_string(), y }
    }
}

/// `%g` with six significant digits.
pub fn sig6(y: f64) -> String {
    if y == 0.0 {
        return "0".into();
    }
    if !y.is_finite() {
        return if y.is_nan() { "nan".into() } else if y > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{y:.5e}");
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..6).contains(&exp) {
        let s = format!("{:.*}", (5 - exp) as usize, y);
        trim_zeros(&s).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mant), exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Series name for a run: the arm label, suffixed with the seed when
/// several seeds were run.
pub fn series_name(log: &ParsedLog, multi_seed: bool) -> String {
    if multi_seed {
        format!("{}/s{}", log.header.label, log.header.seed)
    } else {
        log.header.label.clone()
    }
}

fn tagged(name: String, log: &ParsedLog) -> String {
    if log.diverged() {
        format!("{name}:diverged")
    } else {
        name
    }
}

/// Training objective after each update (the mini-batch loss when the full
/// objective was not tracked). Diverged runs end at the divergence step.
pub fn loss_vs_iter(logs: &[ParsedLog], multi_seed: bool) -> anyhow::Result<Vec<Row>> {
    let mut rows = Vec::new();
    for log in logs {
        let name = tagged(series_name(log, multi_seed), log);
        if let Some(l0) = log.header.initial_objective {
            rows.push(Row::new(&name, 0, l0));
        }
        for s in &log.steps {
            rows.push(Row::new(&name, s.step, s.objective.unwrap_or(s.loss)));
        }
    }
    if rows.is_empty() {
        bail!("no step records: loss_vs_iter needs at least one update");
    }
    Ok(rows)
}

pub fn acc_vs_epoch(logs: &[ParsedLog], multi_seed: bool) -> anyhow::Result<Vec<Row>> {
    let mut rows = Vec::new();
    for log in logs {
        let name = tagged(series_name(log, multi_seed), log);
        for e in &log.epochs {
            if let Some(a) = e.test_accuracy {
                rows.push(Row::new(&name, e.epoch, a));
            }
        }
    }
    if rows.is_empty() {
        bail!("no test accuracy recorded: acc_vs_epoch needs a validation split and eval_every > 0");
    }
    Ok(rows)
}

/// Batch size and learning rate in effect at the start of each epoch, as
/// `<series>:batch` and `<series>:lr`.
pub fn batch_lr_schedule(logs: &[ParsedLog], multi_seed: bool) -> anyhow::Result<Vec<Row>> {
    let mut rows = Vec::new();
    for log in logs {
        let name = tagged(series_name(log, multi_seed), log);
        for e in &log.epochs {
            rows.push(Row::new(format!("{name}:batch"), e.epoch, e.batch as f64));
        }
        for e in &log.epochs {
            rows.push(Row::new(format!("{name}:lr"), e.epoch, e.lr));
        }
    }
    if rows.is_empty() {
        bail!("no epoch records: batch_lr_schedule needs at least one completed epoch");
    }
    Ok(rows)
}

/// Four component rows and a total per method.
pub fn time_breakdown(methods: &[(String, TimeBreakdown)]) -> anyhow::Result<Vec<Row>> {
    if methods.is_empty() {
        bail!("no scenarios: time_breakdown needs at least one method");
    }
    let mut rows = Vec::with_capacity(5 * methods.len());
    for (name, b) in methods {
        for (x, y) in b.components() {
            rows.push(Row::new(name, x, y));
        }
        rows.push(Row::new(name, "total", b.total));
    }
    Ok(rows)
}

pub fn training_rows(kind: PlotKind, logs: &[ParsedLog], multi_seed: bool) -> anyhow::Result<Vec<Row>> {
    match kind {
        PlotKind::LossVsIter => loss_vs_iter(logs, multi_seed),
        PlotKind::AccVsEpoch => acc_vs_epoch(logs, multi_seed),
        PlotKind::BatchLrSchedule => batch_lr_schedule(logs, multi_seed),
        PlotKind::TimeBreakdown => bail!("time_breakdown is produced from simulation results, not training logs"),
    }
}

pub fn write_csv(path: &Path, run_id: &str, config_hash: &str, rows: &[Row]) -> anyhow::Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "# run_id={run_id} config_hash={config_hash}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["series", "x", "y"])?;
    for r in rows {
        w.write_record([r.series.as_str(), r.x.as_str(), sig6(r.y).as_str()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a plot CSV back, returning the comment header and rows.
pub fn read_csv(path: &Path) -> anyhow::Result<(String, Vec<Row>)> {
    let text = std::fs::read_to_string(path)?;
    let header = text.lines().next().filter(|l| l.starts_with('#')).unwrap_or_default().to_string();
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(Row { series: rec[0].to_string(), x: rec[1].to_string(), y: rec[2].parse()? });
    }
    Ok((header, rows))
}
