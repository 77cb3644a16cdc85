//! Dense `batch x rows x cols x dim` token grids.
//!
//! Values are stored row-major over (row, col) per batch with the embedding
//! dimension fastest. Transposition materializes a new buffer so every scan
//! downstream reads contiguous tokens.

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Canonical,
    Transposed,
}

impl Orientation {
    pub fn toggled(self) -> Self {
        match self {
            Orientation::Canonical => Orientation::Transposed,
            Orientation::Transposed => Orientation::Canonical,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    batch: usize,
    rows: usize,
    cols: usize,
    dim: usize,
    values: Vec<f64>,
    orientation: Orientation,
}

impl TokenGrid {
    pub fn new(batch: usize, rows: usize, cols: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if batch == 0 || rows == 0 || cols == 0 || dim == 0 {
            return shape_err(format!(
                "grid dims must be positive, got {batch}x{rows}x{cols}x{dim}"
            ));
        }
        let expected = batch * rows * cols * dim;
        if values.len() != expected {
            return shape_err(format!(
                "grid {batch}x{rows}x{cols}x{dim} needs {expected} values, got {}",
                values.len()
            ));
        }
        Ok(Self {
            batch,
            rows,
            cols,
            dim,
            values,
            orientation: Orientation::Canonical,
        })
    }

    pub fn zeros(batch: usize, rows: usize, cols: usize, dim: usize) -> Result<Self> {
        Self::new(batch, rows, cols, dim, vec![0.0; batch * rows * cols * dim])
    }

    pub fn from_fn(
        batch: usize,
        rows: usize,
        cols: usize,
        dim: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(batch * rows * cols * dim);
        for b in 0..batch {
            for i in 0..rows {
                for j in 0..cols {
                    for d in 0..dim {
                        values.push(f(b, i, j, d));
                    }
                }
            }
        }
        Self::new(batch, rows, cols, dim, values)
    }

    pub fn with_orientation(mut self, orientation: Orientation) -> Self {
        self.orientation = orientation;
        self
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Tokens per batch element, `rows * cols`.
    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn index(&self, b: usize, i: usize, j: usize, d: usize) -> usize {
        ((b * self.rows + i) * self.cols + j) * self.dim + d
    }

    #[inline]
    pub fn get(&self, b: usize, i: usize, j: usize, d: usize) -> f64 {
        self.values[self.index(b, i, j, d)]
    }

    pub fn token(&self, b: usize, i: usize, j: usize) -> &[f64] {
        let start = self.index(b, i, j, 0);
        &self.values[start..start + self.dim]
    }

    /// All tokens of batch element `b` in raster order.
    pub fn batch_slice(&self, b: usize) -> &[f64] {
        let n = self.tokens() * self.dim;
        &self.values[b * n..(b + 1) * n]
    }

    pub fn batch_slice_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.tokens() * self.dim;
        &mut self.values[b * n..(b + 1) * n]
    }
}

/// Swaps rows and columns, toggling the orientation flag.
pub fn transpose_grid(g: &TokenGrid) -> TokenGrid {
    let (h, w, dim) = (g.rows, g.cols, g.dim);
    let mut out = vec![0.0; g.values.len()];
    for b in 0..g.batch {
        let base = b * h * w * dim;
        for i in 0..h {
            for j in 0..w {
                let src = base + (i * w + j) * dim;
                let dst = base + (j * h + i) * dim;
                out[dst..dst + dim].copy_from_slice(&g.values[src..src + dim]);
            }
        }
    }
    TokenGrid {
        batch: g.batch,
        rows: w,
        cols: h,
        dim,
        values: out,
        orientation: g.orientation.toggled(),
    }
}

/// Per-batch raster sequences of `rows * cols * dim` values.
pub fn raster_flatten(g: &TokenGrid) -> Vec<Vec<f64>> {
    (0..g.batch).map(|b| g.batch_slice(b).to_vec()).collect()
}

pub fn raster_unflatten(seqs: &[Vec<f64>], rows: usize, cols: usize, dim: usize) -> Result<TokenGrid> {
    let per = rows * cols * dim;
    if seqs.is_empty() {
        return shape_err("no sequences to unflatten");
    }
    let mut values = Vec::with_capacity(per * seqs.len());
    for (b, s) in seqs.iter().enumerate() {
        if s.len() != per {
            return shape_err(format!(
                "sequence {b} has {} values, expected {rows}x{cols}x{dim} = {per}",
                s.len()
            ));
        }
        values.extend_from_slice(s);
    }
    TokenGrid::new(seqs.len(), rows, cols, dim, values)
}

/// Unflattens a single concatenated buffer holding whole batches.
pub fn raster_unflatten_flat(seq: &[f64], rows: usize, cols: usize, dim: usize) -> Result<TokenGrid> {
    let per = rows * cols * dim;
    if per == 0 || seq.is_empty() || seq.len() % per != 0 {
        return shape_err(format!(
            "buffer of {} values is not a multiple of {rows}x{cols}x{dim}",
            seq.len()
        ));
    }
    TokenGrid::new(seq.len() / per, rows, cols, dim, seq.to_vec())
}
