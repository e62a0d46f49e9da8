//! Datasets: CSV ingestion with one-hot encoding, synthetic two-class blobs,
//! deterministic splits, and train-split standardization.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major examples with scalar labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    x: Vec<f64>,
    y: Vec<f64>,
    dim: usize,
}

impl Batch {
    pub fn new(x: Vec<f64>, y: Vec<f64>, dim: usize) -> Result<Self> {
        if x.len() != y.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: y.len() * dim,
                found: x.len(),
            });
        }
        Ok(Self { x, y, dim })
    }

    pub fn from_rows(rows: &[Vec<f64>], y: Vec<f64>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::Parse {
                row: r,
                msg: format!("expected {dim} features"),
            });
        }
        Self::new(rows.concat(), y, dim)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn x_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn y(&self, i: usize) -> f64 {
        self.y[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.y
    }

    pub fn features(&self) -> &[f64] {
        &self.x
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(self.x(i));
            y.push(self.y[i]);
        }
        Batch { x, y, dim: self.dim }
    }
}

/// Per-feature affine map `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    examples: Batch,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, examples: Batch) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if let Some(i) = examples.x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                row: i / examples.dim.max(1),
                msg: "non-finite feature".into(),
            });
        }
        Ok(Self {
            name: name.into(),
            examples,
            normalization: None,
        })
    }

    /// `n` all-zero examples of width `dim`, used as the data term of
    /// noise-free quadratic objectives.
    pub fn zeros(n: usize, dim: usize) -> Self {
        Self {
            name: "zeros".into(),
            examples: Batch {
                x: vec![0.0; n * dim],
                y: vec![0.0; n],
                dim,
            },
            normalization: None,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.examples.dim
    }

    pub fn examples(&self) -> &Batch {
        &self.examples
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        self.examples.select(idx)
    }

    /// Fits a standardizer on this dataset. Zero-variance columns keep std 1.
    pub fn fit_normalization(&self) -> Normalization {
        let (n, d) = (self.len() as f64, self.dim());
        let mut mean = vec![0.0; d];
        for i in 0..self.len() {
            for (m, v) in mean.iter_mut().zip(self.examples.x(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for i in 0..self.len() {
            for ((s, v), m) in var.iter_mut().zip(self.examples.x(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Normalization { mean, std }
    }

    pub fn apply_normalization(&mut self, norm: &Normalization) -> Result<()> {
        if norm.mean.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: norm.mean.len(),
            });
        }
        for i in 0..self.len() {
            for ((v, m), s) in self.examples.x_mut(i).iter_mut().zip(&norm.mean).zip(&norm.std) {
                *v = (*v - m) / s;
            }
        }
        self.normalization = Some(norm.clone());
        Ok(())
    }
}

/// Standardizes both splits with statistics from `train` only.
pub fn standardize(train: &mut Dataset, validation: &mut Dataset) -> Result<Normalization> {
    let norm = train.fit_normalization();
    train.apply_normalization(&norm)?;
    validation.apply_normalization(&norm)?;
    Ok(norm)
}

/// Which columns are one-hot encoded.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Categorical {
    /// Every non-label column.
    #[default]
    All,
    None,
    Columns(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label: String,
    /// Label value mapped to 1. When absent the label column must hold
    /// exactly two distinct values; the lexicographically larger maps to 1.
    #[serde(default)]
    pub positive: Option<String>,
    #[serde(default)]
    pub categorical: Categorical,
    /// Declared vocabularies. A value outside its column's list is an error.
    #[serde(default)]
    pub categories: BTreeMap<String, Vec<String>>,
}

impl CsvSchema {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            positive: None,
            categorical: Categorical::All,
            categories: BTreeMap::new(),
        }
    }

    fn is_categorical(&self, column: &str) -> bool {
        match &self.categorical {
            Categorical::All => true,
            Categorical::None => false,
            Categorical::Columns(cols) => cols.iter().any(|c| c == column),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum ColumnCodec {
    Numeric,
    OneHot(Vec<String>),
}

impl ColumnCodec {
    fn width(&self) -> usize {
        match self {
            ColumnCodec::Numeric => 1,
            ColumnCodec::OneHot(v) => v.len(),
        }
    }
}

/// Column-wise encoder built from a CSV header and schema.
#[derive(Clone, Debug, PartialEq)]
pub struct RowEncoder {
    columns: Vec<(String, ColumnCodec)>,
}

impl RowEncoder {
    pub fn width(&self) -> usize {
        self.columns.iter().map(|(_, c)| c.width()).sum()
    }

    pub fn encode(&self, row: &[&str], row_no: usize) -> Result<Vec<f64>> {
        if row.len() != self.columns.len() {
            return Err(Error::Parse {
                row: row_no,
                msg: format!("expected {} feature fields, got {}", self.columns.len(), row.len()),
            });
        }
        let mut out = Vec::with_capacity(self.width());
        for ((name, codec), raw) in self.columns.iter().zip(row) {
            match codec {
                ColumnCodec::Numeric => {
                    let v: f64 = raw.trim().parse().map_err(|_| Error::Parse {
                        row: row_no,
                        msg: format!("column `{name}`: `{raw}` is not a number"),
                    })?;
                    out.push(v);
                }
                ColumnCodec::OneHot(vocab) => {
                    let k = vocab.iter().position(|c| c == raw).ok_or_else(|| Error::Parse {
                        row: row_no,
                        msg: format!("column `{name}`: unknown category `{raw}`"),
                    })?;
                    out.extend((0..vocab.len()).map(|j| if j == k { 1.0 } else { 0.0 }));
                }
            }
        }
        Ok(out)
    }

    pub fn decode(&self, encoded: &[f64]) -> Option<Vec<String>> {
        if encoded.len() != self.width() {
            return None;
        }
        let mut at = 0;
        let mut out = Vec::with_capacity(self.columns.len());
        for (_, codec) in &self.columns {
            match codec {
                ColumnCodec::Numeric => out.push(encoded[at].to_string()),
                ColumnCodec::OneHot(vocab) => {
                    let hot = &encoded[at..at + vocab.len()];
                    let k = hot.iter().position(|&v| v == 1.0)?;
                    out.push(vocab[k].clone());
                }
            }
            at += codec.width();
        }
        Some(out)
    }
}

/// Parses a headed CSV into features and {0,1} labels; row order is kept.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    let (ds, _) = parse_csv(&text, schema, &name)?;
    Ok(ds)
}

/// Row numbers in errors are 1-based file lines (the header is line 1).
pub fn parse_csv(text: &str, schema: &CsvSchema, name: &str) -> Result<(Dataset, RowEncoder)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse { row: 1, msg: e.to_string() })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Parse { row: 1, msg: "empty file".into() });
    }
    let label_col = header.iter().position(|h| *h == schema.label).ok_or_else(|| Error::Parse {
        row: 1,
        msg: format!("missing label column `{}`", schema.label),
    })?;

    let mut rows: Vec<Vec<String>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row_no = i + 2;
        let rec = rec.map_err(|e| Error::Parse { row: row_no, msg: e.to_string() })?;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                row: row_no,
                msg: format!("ragged row: expected {} fields, got {}", header.len(), rec.len()),
            });
        }
        rows.push(rec.iter().map(|f| f.trim().to_string()).collect());
    }
    if rows.is_empty() {
        return Err(Error::Parse { row: 2, msg: "no data rows".into() });
    }

    let mut columns = Vec::new();
    for (j, name) in header.iter().enumerate() {
        if j == label_col {
            continue;
        }
        let codec = if schema.is_categorical(name) {
            match schema.categories.get(name) {
                Some(vocab) => ColumnCodec::OneHot(vocab.clone()),
                None => {
                    let vocab: BTreeSet<&str> = rows.iter().map(|r| r[j].as_str()).collect();
                    ColumnCodec::OneHot(vocab.into_iter().map(String::from).collect())
                }
            }
        } else {
            ColumnCodec::Numeric
        };
        columns.push((name.clone(), codec));
    }
    let encoder = RowEncoder { columns };

    let positive = match &schema.positive {
        Some(p) => p.clone(),
        None => {
            let distinct: BTreeSet<&str> = rows.iter().map(|r| r[label_col].as_str()).collect();
            if distinct.len() != 2 {
                return Err(Error::Parse {
                    row: 1,
                    msg: format!(
                        "label column `{}` has {} distinct values; declare `positive`",
                        schema.label,
                        distinct.len()
                    ),
                });
            }
            distinct.into_iter().next_back().unwrap_or_default().to_string()
        }
    };

    let mut x = Vec::with_capacity(rows.len() * encoder.width());
    let mut y = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let feats: Vec<&str> = r
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != label_col)
            .map(|(_, v)| v.as_str())
            .collect();
        x.extend(encoder.encode(&feats, i + 2)?);
        y.push(if r[label_col] == positive { 1.0 } else { 0.0 });
    }
    let width = encoder.width();
    let ds = Dataset::new(name, Batch::new(x, y, width)?)?;
    Ok((ds, encoder))
}

/// Two isotropic unit-variance Gaussian classes centred at `±separation/2`
/// along a random unit direction. Labels alternate 0,1,0,1,...
pub fn synth_blobs(n: usize, d: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || d < 1 {
        return Err(Error::Config(format!("synth_blobs needs n >= 2 and d >= 1, got n={n}, d={d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        dir.iter_mut().for_each(|v| *v /= norm);
    } else {
        dir[0] = 1.0;
    }
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as f64;
        let sign = if label > 0.5 { 0.5 } else { -0.5 };
        for u in &dir {
            let noise: f64 = rng.sample(StandardNormal);
            x.push(sign * separation * u + noise);
        }
        y.push(label);
    }
    Dataset::new(format!("blobs-n{n}-d{d}-sep{separation}"), Batch::new(x, y, d)?)
}

/// Deterministic shuffled partition into `n_train` and `N - n_train` rows.
pub fn split(dataset: &Dataset, n_train: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = dataset.len();
    if n_train < 1 || n_train >= n {
        return Err(Error::Config(format!("split needs 1 <= n_train < {n}, got {n_train}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (tr, va) = idx.split_at(n_train);
    let train = Dataset {
        name: format!("{}-train", dataset.name),
        examples: dataset.batch(tr),
        normalization: dataset.normalization.clone(),
    };
    let val = Dataset {
        name: format!("{}-val", dataset.name),
        examples: dataset.batch(va),
        normalization: dataset.normalization.clone(),
    };
    Ok((train, val))
}
