//! The pipeline currency: an N×D row-major f32 matrix tagged with a model
//! identity, an optional season, and optional per-row sample ids.

use std::collections::HashSet;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f32>,
    model_id: String,
    season: Option<String>,
    row_ids: Option<Vec<String>>,
}

impl EmbeddingMatrix {
    /// Builds a matrix, validating that `data.len() == n_rows * n_cols` and
    /// that every value is finite.
    pub fn new(
        model_id: impl Into<String>,
        n_rows: usize,
        n_cols: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let expected = n_rows
            .checked_mul(n_cols)
            .ok_or_else(|| Error::InvalidHeader("n_rows * n_cols overflows".into()))?;
        if data.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                found: data.len(),
            });
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(idx));
        }
        Ok(Self {
            n_rows,
            n_cols,
            data,
            model_id: model_id.into(),
            season: None,
            row_ids: None,
        })
    }

    pub fn zeros(model_id: impl Into<String>, n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            data: vec![0.0; n_rows * n_cols],
            model_id: model_id.into(),
            season: None,
            row_ids: None,
        }
    }

    /// Attaches row ids; they must be unique and one per row.
    pub fn with_row_ids(mut self, row_ids: Vec<String>) -> Result<Self> {
        if row_ids.len() != self.n_rows {
            return Err(Error::RowMismatch(format!(
                "{} row_ids for {} rows",
                row_ids.len(),
                self.n_rows
            )));
        }
        let mut seen = HashSet::with_capacity(row_ids.len());
        for id in &row_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateRowId(id.clone()));
            }
        }
        self.row_ids = Some(row_ids);
        Ok(self)
    }

    pub fn with_season(mut self, season: impl Into<String>) -> Self {
        self.season = Some(season.into());
        self
    }

    pub fn with_model_id(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = model_id.into();
        self
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn season(&self) -> Option<&str> {
        self.season.as_deref()
    }

    pub fn row_ids(&self) -> Option<&[String]> {
        self.row_ids.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.n_cols + j]
    }

    /// Extracts the column block `[start, end)` as a new matrix.
    pub fn slice_columns(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.n_cols {
            return Err(Error::ShapeMismatch(format!(
                "column slice [{start}, {end}) out of 0..{}",
                self.n_cols
            )));
        }
        let width = end - start;
        let mut data = Vec::with_capacity(self.n_rows * width);
        for i in 0..self.n_rows {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        Ok(Self {
            n_rows: self.n_rows,
            n_cols: width,
            data,
            model_id: self.model_id.clone(),
            season: self.season.clone(),
            row_ids: self.row_ids.clone(),
        })
    }

    /// Returns a copy with every row scaled to unit L2 norm. Zero rows are
    /// left untouched.
    pub fn normalize_rows_l2(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.n_rows {
            let row = &self.data[i * self.n_cols..(i + 1) * self.n_cols];
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (dst, &src) in out.data[i * self.n_cols..(i + 1) * self.n_cols]
                    .iter_mut()
                    .zip(row)
                {
                    *dst = ((src as f64) / norm) as f32;
                }
            }
        }
        out
    }

    /// True when both matrices have the same row count and, where both carry
    /// row ids, the ids agree position by position.
    pub fn rows_aligned_with(&self, other: &Self) -> bool {
        if self.n_rows != other.n_rows {
            return false;
        }
        match (&self.row_ids, &other.row_ids) {
            (Some(a), Some(b)) => a == b,
            _ => true,
        }
    }
}

/// Horizontally concatenates matrices that share rows.
///
/// Column blocks appear in input order. All inputs must have the same row
/// count, and any two inputs that both carry row ids must carry identical
/// ones; the output keeps row ids only when every input has them.
pub fn concat_columns(parts: &[&EmbeddingMatrix]) -> Result<EmbeddingMatrix> {
    let first = parts
        .first()
        .ok_or_else(|| Error::EmptyInput("concat_columns of zero matrices".into()))?;
    let n_rows = first.n_rows;
    for p in parts.iter().skip(1) {
        if p.n_rows != n_rows {
            return Err(Error::RowMismatch(format!(
                "{:?} has {} rows, expected {}",
                p.model_id, p.n_rows, n_rows
            )));
        }
        if !first.rows_aligned_with(p) {
            return Err(Error::RowMismatch(format!(
                "row_ids of {:?} do not match {:?}",
                p.model_id, first.model_id
            )));
        }
    }
    // Pairwise alignment against the first is not enough when the first has no
    // ids; check every id-bearing pair against the first id-bearing input.
    let reference_ids = parts.iter().find_map(|p| p.row_ids.as_ref());
    if let Some(ids) = reference_ids {
        for p in parts {
            if let Some(other) = p.row_ids.as_ref() {
                if other != ids {
                    return Err(Error::RowMismatch(format!(
                        "row_ids of {:?} disagree with other inputs",
                        p.model_id
                    )));
                }
            }
        }
    }

    let n_cols: usize = parts.iter().map(|p| p.n_cols).sum();
    let mut data = Vec::with_capacity(n_rows * n_cols);
    for i in 0..n_rows {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    let model_id = parts
        .iter()
        .map(|p| p.model_id.as_str())
        .collect::<Vec<_>>()
        .join("+");
    let all_have_ids = parts.iter().all(|p| p.row_ids.is_some());
    let row_ids = if all_have_ids {
        parts[0].row_ids.clone()
    } else {
        None
    };

    Ok(EmbeddingMatrix {
        n_rows,
        n_cols,
        data,
        model_id,
        season: None,
        row_ids,
    })
}
