use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

/// Norm tolerance for rows flagged as unit-normalized.
pub const UNIT_TOL: f64 = 1e-6;

/// Norms below this are treated as having no direction.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// An `N x d` array of feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    rows: Array2<f64>,
    normalized: bool,
}

impl FeatureMap {
    /// Wraps rows without any normalization claim.
    pub fn new(rows: Array2<f64>) -> Self {
        FeatureMap {
            rows,
            normalized: false,
        }
    }

    /// Normalizes every row to unit length.
    pub fn normalize(mut rows: Array2<f64>) -> Result<Self> {
        for mut row in rows.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if !(norm >= DEGENERATE_NORM) {
                return Err(Error::Degenerate {
                    norm,
                    floor: DEGENERATE_NORM,
                });
            }
            row /= norm;
        }
        Ok(FeatureMap {
            rows,
            normalized: true,
        })
    }

    /// Accepts rows that are already unit length within [`UNIT_TOL`].
    pub fn from_unit_rows(rows: Array2<f64>) -> Result<Self> {
        for (i, row) in rows.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if !((norm - 1.0).abs() <= UNIT_TOL) {
                return Err(Error::Invalid(format!("feature row {i} has norm {norm}, expected 1")));
            }
        }
        Ok(FeatureMap {
            rows,
            normalized: true,
        })
    }

    /// A single unit row.
    pub fn unit_vector(v: [f64; 2]) -> Result<Self> {
        Self::from_unit_rows(Array2::from_shape_vec((1, 2), v.to_vec()).expect("1x2"))
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn into_rows(self) -> Array2<f64> {
        self.rows
    }

    pub fn row(&self, n: usize) -> ArrayView1<'_, f64> {
        self.rows.row(n)
    }

    /// Number of rows (patches).
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    /// Row dimension.
    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}
