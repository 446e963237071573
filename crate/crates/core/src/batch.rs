//! Point batches and their CSV form.
//!
//! The CSV format is a `x1,x2` header followed by one point per line, each
//! coordinate rendered with 17 significant digits so 64-bit values round-trip
//! exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// A state in the plane.
pub type Point2 = [f64; 2];

pub const CSV_HEADER: &str = "x1,x2";

/// An ordered set of points plus the seed and settings that produced them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleBatch {
    pub points: Vec<Point2>,
    pub seed: u64,
    pub settings: BTreeMap<String, String>,
}

impl SampleBatch {
    pub fn new(points: Vec<Point2>, seed: u64) -> Self {
        SampleBatch {
            points,
            seed,
            settings: BTreeMap::new(),
        }
    }

    pub fn with_setting(mut self, key: &str, value: impl ToString) -> Self {
        self.settings.insert(key.to_string(), value.to_string());
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(48 * (self.points.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for p in &self.points {
            let _ = writeln!(out, "{},{}", format_f64(p[0]), format_f64(p[1]));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Parses CSV text; `origin` names the source in error messages.
    pub fn from_csv(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, reason: String| Error::Csv {
            path: origin.to_string(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CSV_HEADER => {}
            Some((_, h)) => return Err(err(1, format!("expected header `{CSV_HEADER}`, found `{h}`"))),
            None => return Err(err(1, "empty file".into())),
        }
        let mut points = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let mut next = || -> Result<f64> {
                let field = fields
                    .next()
                    .ok_or_else(|| err(line_no, "expected two fields".into()))?;
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| err(line_no, format!("cannot parse `{field}` as a number")))?;
                if !v.is_finite() {
                    return Err(err(line_no, "non-finite coordinate".into()));
                }
                Ok(v)
            };
            let p = [next()?, next()?];
            if fields.next().is_some() {
                return Err(err(line_no, "expected two fields".into()));
            }
            points.push(p);
        }
        Ok(SampleBatch::new(points, 0))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, &path.display().to_string())
    }
}

/// 17 significant digits in scientific notation.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}
