//! Pooling, transpose and repeat over irregular (masked) token grids.
//!
//! A [`MaskedTokenSet`] keeps only the unmasked tokens of an `h x w` grid as
//! a coordinate list in the current frame, always sorted row-major in that
//! frame. The traversal flag records whether the frame is the canonical grid
//! (row-major traversal) or its transpose (column-major traversal of the
//! canonical grid). The same mask is shared by every batch element.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block::{block_forward_seq, BlockOptions, BlockParams, BlockTrace, PooledAxis};
use crate::error::{domain_err, shape_err, Result};
use crate::pooling::{GroupLayout, PoolMode};
use crate::tensor_grid::TokenGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Traversal {
    RowMajor,
    ColMajor,
}

/// Divisor used when pooling a masked row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskedDivisor {
    /// Sum of unmasked tokens divided by the full column count.
    #[default]
    ColumnCount,
    /// Plain mean over the unmasked tokens.
    UnmaskedCount,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedTokenSet {
    pub h: usize,
    pub w: usize,
    pub dim: usize,
    pub batch: usize,
    /// `(row, col)` in the current frame, sorted row-major.
    pub coords: Vec<(usize, usize)>,
    /// `batch x coords x dim`.
    pub values: Vec<f64>,
    pub traversal: Traversal,
    pub mask_ratio: f64,
    pub seed: u64,
}

/// Serialized mask: which canonical positions are kept.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MaskSpec {
    pub h: usize,
    pub w: usize,
    pub ratio: f64,
    pub seed: u64,
    pub coords: Vec<[usize; 2]>,
}

/// Number of positions kept at `ratio`.
pub fn kept_count(h: usize, w: usize, ratio: f64) -> usize {
    ((1.0 - ratio) * (h * w) as f64).round() as usize
}

/// Keeps `round((1 - ratio)·h·w)` positions drawn uniformly without
/// replacement from a ChaCha8 stream seeded with `seed`.
pub fn random_mask(g: &TokenGrid, ratio: f64, seed: u64) -> Result<MaskedTokenSet> {
    if !(0.0..1.0).contains(&ratio) {
        return domain_err(format!("mask ratio {ratio} outside [0, 1)"));
    }
    let (h, w) = (g.rows(), g.cols());
    let keep = kept_count(h, w, ratio).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, h * w, keep).into_vec();
    picked.sort_unstable();
    let coords: Vec<(usize, usize)> = picked.iter().map(|&p| (p / w, p % w)).collect();
    let mut values = Vec::with_capacity(g.batch() * coords.len() * g.dim());
    for b in 0..g.batch() {
        for &(i, j) in &coords {
            values.extend_from_slice(g.token(b, i, j));
        }
    }
    Ok(MaskedTokenSet {
        h,
        w,
        dim: g.dim(),
        batch: g.batch(),
        coords,
        values,
        traversal: Traversal::RowMajor,
        mask_ratio: ratio,
        seed,
    })
}

impl MaskedTokenSet {
    /// Rebuilds a set from a serialized mask and a dense grid.
    pub fn from_spec(spec: &MaskSpec, g: &TokenGrid) -> Result<Self> {
        if (spec.h, spec.w) != (g.rows(), g.cols()) {
            return shape_err(format!(
                "mask is {}x{}, grid is {}x{}",
                spec.h,
                spec.w,
                g.rows(),
                g.cols()
            ));
        }
        let mut coords: Vec<(usize, usize)> = spec.coords.iter().map(|c| (c[0], c[1])).collect();
        coords.sort_unstable();
        coords.dedup();
        if coords.len() != spec.coords.len() || coords.iter().any(|&(i, j)| i >= spec.h || j >= spec.w) {
            return shape_err("mask coordinates must be unique and inside the grid");
        }
        let mut values = Vec::with_capacity(g.batch() * coords.len() * g.dim());
        for b in 0..g.batch() {
            for &(i, j) in &coords {
                values.extend_from_slice(g.token(b, i, j));
            }
        }
        Ok(Self {
            h: spec.h,
            w: spec.w,
            dim: g.dim(),
            batch: g.batch(),
            coords,
            values,
            traversal: Traversal::RowMajor,
            mask_ratio: spec.ratio,
            seed: spec.seed,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Canonical-frame coordinate of entry `k`.
    pub fn canonical_coord(&self, k: usize) -> (usize, usize) {
        let (i, j) = self.coords[k];
        match self.traversal {
            Traversal::RowMajor => (i, j),
            Traversal::ColMajor => (j, i),
        }
    }

    pub fn spec(&self) -> MaskSpec {
        let mut coords: Vec<[usize; 2]> = (0..self.len())
            .map(|k| {
                let (i, j) = self.canonical_coord(k);
                [i, j]
            })
            .collect();
        coords.sort_unstable();
        let (h, w) = match self.traversal {
            Traversal::RowMajor => (self.h, self.w),
            Traversal::ColMajor => (self.w, self.h),
        };
        MaskSpec {
            h,
            w,
            ratio: self.mask_ratio,
            seed: self.seed,
            coords,
        }
    }

    pub fn token(&self, b: usize, k: usize) -> &[f64] {
        let start = (b * self.len() + k) * self.dim;
        &self.values[start..start + self.dim]
    }

    /// Rows of the current frame that hold at least one token, ascending.
    pub fn nonempty_rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self.coords.iter().map(|c| c.0).collect();
        rows.dedup();
        rows
    }

    /// Pooling groups over the packed tokens: one group per nonempty row.
    pub fn layout(&self, divisor: MaskedDivisor) -> GroupLayout {
        let keys: Vec<usize> = self.coords.iter().map(|c| c.0).collect();
        let w = self.w as f64;
        let layout = GroupLayout::from_keys(&keys, |_, count| match divisor {
            MaskedDivisor::ColumnCount => w,
            MaskedDivisor::UnmaskedCount => count as f64,
        });
        match divisor {
            MaskedDivisor::ColumnCount => layout.sum_divide(),
            MaskedDivisor::UnmaskedCount => layout,
        }
    }

    /// Scatters back into a dense canonical grid, masked positions zero.
    pub fn to_dense(&self) -> Result<TokenGrid> {
        let (h, w) = match self.traversal {
            Traversal::RowMajor => (self.h, self.w),
            Traversal::ColMajor => (self.w, self.h),
        };
        let mut g = TokenGrid::zeros(self.batch, h, w, self.dim)?;
        for b in 0..self.batch {
            for k in 0..self.len() {
                let (i, j) = self.canonical_coord(k);
                let dst = g.index(b, i, j, 0);
                g.values_mut()[dst..dst + self.dim].copy_from_slice(self.token(b, k));
            }
        }
        Ok(g)
    }

    fn with_values(&self, values: Vec<f64>) -> Self {
        Self {
            values,
            ..self.clone()
        }
    }
}

/// Swaps every coordinate, swaps `h` and `w`, toggles the traversal and
/// re-sorts into row-major order of the new frame.
pub fn masked_transpose(m: &MaskedTokenSet) -> MaskedTokenSet {
    let mut order: Vec<usize> = (0..m.len()).collect();
    order.sort_unstable_by_key(|&k| (m.coords[k].1, m.coords[k].0));
    let coords = order.iter().map(|&k| (m.coords[k].1, m.coords[k].0)).collect();
    let mut values = Vec::with_capacity(m.values.len());
    for b in 0..m.batch {
        for &k in &order {
            values.extend_from_slice(m.token(b, k));
        }
    }
    MaskedTokenSet {
        h: m.w,
        w: m.h,
        coords,
        values,
        traversal: match m.traversal {
            Traversal::RowMajor => Traversal::ColMajor,
            Traversal::ColMajor => Traversal::RowMajor,
        },
        ..m.clone()
    }
}

/// One pooled vector per nonempty row of the current frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedPooled {
    pub rows: Vec<usize>,
    pub dim: usize,
    /// `batch x rows x dim`.
    pub values: Vec<f64>,
}

/// Pools each nonempty row: the left-to-right sum divided by `w`
/// ([`MaskedDivisor::ColumnCount`]), or the mean of the unmasked tokens.
pub fn masked_pool_width(m: &MaskedTokenSet, divisor: MaskedDivisor) -> MaskedPooled {
    let rows = m.nonempty_rows();
    let layout = m.layout(divisor);
    let per_batch = m.len() * m.dim;
    let mut values = Vec::with_capacity(m.batch * rows.len() * m.dim);
    for b in 0..m.batch {
        let src = &m.values[b * per_batch..(b + 1) * per_batch];
        values.extend(
            layout
                .pool(src, m.dim, &PoolMode::Mean)
                .expect("layout built from the same token set"),
        );
    }
    MaskedPooled {
        rows,
        dim: m.dim,
        values,
    }
}

/// Writes `scale · pooled(row)` to every unmasked position of each row.
pub fn masked_repeat_width(pooled: &MaskedPooled, m: &MaskedTokenSet, scale: f64) -> Result<MaskedTokenSet> {
    if pooled.rows != m.nonempty_rows() || pooled.values.len() != m.batch * pooled.rows.len() * pooled.dim {
        return shape_err("pooled rows do not match the mask's nonempty rows");
    }
    let dim = pooled.dim;
    let nrows = pooled.rows.len();
    let mut values = Vec::with_capacity(m.batch * m.len() * dim);
    for b in 0..m.batch {
        let mut r = 0;
        for &(row, _) in &m.coords {
            while pooled.rows[r] != row {
                r += 1;
            }
            let src = &pooled.values[(b * nrows + r) * dim..(b * nrows + r + 1) * dim];
            values.extend(src.iter().map(|v| v * scale));
        }
    }
    Ok(MaskedTokenSet {
        dim,
        ..m.with_values(values)
    })
}

/// Repeat scale that matches masked pretraining statistics on dense inputs.
pub fn transfer_scale(mask_ratio: f64) -> f64 {
    1.0 - mask_ratio
}

/// Block over a masked set in the canonical frame. Odd blocks (with
/// alternation) run on the transposed set; the conv treats tokens adjacent
/// in traversal order as neighbours.
pub fn block_forward_masked(
    m: &MaskedTokenSet,
    params: &BlockParams,
    opts: &BlockOptions,
    divisor: MaskedDivisor,
) -> Result<(MaskedTokenSet, BlockTrace)> {
    if m.traversal != Traversal::RowMajor {
        return shape_err("masked block input must be in the canonical frame");
    }
    let transposed = params.transposes(opts);
    let work = if transposed { masked_transpose(m) } else { m.clone() };
    let layout = if opts.pooled {
        work.layout(divisor)
    } else {
        GroupLayout::singletons(work.len())
    };
    let (out, branch) = block_forward_seq(&work.values, work.batch, &layout, params, opts)?;
    let mut result = work.with_values(out);
    if transposed {
        result = masked_transpose(&result);
    }
    let trace = BlockTrace {
        block_index: params.block_index,
        pooled_axis: match (opts.pooled, transposed) {
            (false, _) => PooledAxis::None,
            (true, false) => PooledAxis::Width,
            (true, true) => PooledAxis::Height,
        },
        pooled_len: branch.pooled_len,
        depth: branch.depth,
    };
    Ok((result, trace))
}
