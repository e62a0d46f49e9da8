use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named contiguous slice of the flat parameter vector, typically one layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Flat model parameters with a layer table.
///
/// Segments tile `[0, len)` in order without gaps or overlap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, segments: Vec<Segment>) -> Result<Self> {
        let mut cursor = 0;
        for s in &segments {
            if s.offset != cursor {
                return Err(Error::Spec(format!(
                    "segment `{}` starts at {} but previous segment ends at {cursor}",
                    s.name, s.offset
                )));
            }
            cursor += s.len;
        }
        if cursor != values.len() {
            return Err(Error::DimensionMismatch {
                expected: cursor,
                found: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Spec(format!("parameter {i} is not finite")));
        }
        Ok(Self { values, segments })
    }

    /// One segment named `theta` covering all values.
    pub fn flat(values: Vec<f64>) -> Self {
        let len = values.len();
        Self {
            values,
            segments: vec![Segment {
                name: "theta".into(),
                offset: 0,
                len,
            }],
        }
    }

    /// Builds the segment table from `(name, len)` pairs.
    pub fn from_layout(values: Vec<f64>, layout: &[(&str, usize)]) -> Result<Self> {
        let mut offset = 0;
        let segments = layout
            .iter()
            .map(|(name, len)| {
                let s = Segment {
                    name: (*name).to_string(),
                    offset,
                    len: *len,
                };
                offset += len;
                s
            })
            .collect();
        Self::new(values, segments)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Result<&Segment> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::UnknownSegment(name.to_string()))
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::DimensionMismatch {
                expected: self.values.len(),
                found: values.len(),
            });
        }
        Self::new(values, self.segments.clone())
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_tiles_the_vector() {
        let p = ParamVector::from_layout(vec![0.0; 5], &[("w", 3), ("b", 2)]).unwrap();
        assert_eq!(p.segment("b").unwrap().range(), 3..5);
        assert!(matches!(p.segment("c"), Err(Error::UnknownSegment(_))));
    }

    #[test]
    fn gaps_and_overruns_rejected() {
        let gap = vec![
            Segment { name: "a".into(), offset: 0, len: 2 },
            Segment { name: "b".into(), offset: 3, len: 1 },
        ];
        assert!(ParamVector::new(vec![0.0; 4], gap).is_err());
        assert!(ParamVector::from_layout(vec![0.0; 4], &[("a", 5)]).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(ParamVector::from_layout(vec![f64::NAN], &[("a", 1)]).is_err());
    }
}
