//! Width compression before the scan and decompression after it.
//!
//! [`pool_width`] and [`repeat_width`] act on dense grids. [`GroupLayout`]
//! generalizes both to packed token sequences where each token belongs to
//! a pooling group (a grid row, a masked row, a `(row, channel)` pair, or
//! a lone class token); the pooled sequence lists groups in order of first
//! appearance.

use crate::error::{domain_err, shape_err, Result};
use crate::tensor_grid::TokenGrid;

#[derive(Debug, Clone, PartialEq, Default)]
pub enum PoolMode {
    #[default]
    Mean,
    Max,
    /// Softmax-weighted sum with scores `⟨token, score⟩`.
    Attention { score: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    #[default]
    Mean,
    Max,
    Attention,
}

impl PoolMode {
    pub fn kind(&self) -> PoolKind {
        match self {
            PoolMode::Mean => PoolKind::Mean,
            PoolMode::Max => PoolKind::Max,
            PoolMode::Attention { .. } => PoolKind::Attention,
        }
    }
}

/// How mean pooling turns a group's values into one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MeanRule {
    /// `x_0 + Σ_{i≥1}(x_i − x_0) / n`: the true mean, and exact on constant
    /// groups, so pool∘repeat is a bit-exact projection.
    Shifted,
    /// Left-to-right sum divided by a fixed divisor.
    SumDivide,
}

/// Pools `members` (token indices into `x`, each `dim` wide) into `out`.
fn pool_members(
    x: &[f64],
    dim: usize,
    members: impl Iterator<Item = usize> + Clone,
    divisor: f64,
    rule: MeanRule,
    mode: &PoolMode,
    out: &mut [f64],
) {
    match mode {
        PoolMode::Mean if rule == MeanRule::Shifted => {
            let mut it = members;
            let Some(first) = it.next() else {
                out.fill(0.0);
                return;
            };
            let x0 = &x[first * dim..(first + 1) * dim];
            out.fill(0.0);
            for m in it {
                let tok = &x[m * dim..(m + 1) * dim];
                out.iter_mut().zip(tok.iter().zip(x0)).for_each(|(o, (v, b))| *o += v - b);
            }
            out.iter_mut().zip(x0).for_each(|(o, b)| *o = b + *o / divisor);
        }
        PoolMode::Mean => {
            out.fill(0.0);
            for m in members {
                let tok = &x[m * dim..(m + 1) * dim];
                out.iter_mut().zip(tok).for_each(|(o, v)| *o += v);
            }
            out.iter_mut().for_each(|o| *o /= divisor);
        }
        PoolMode::Max => {
            out.fill(f64::NEG_INFINITY);
            for m in members {
                let tok = &x[m * dim..(m + 1) * dim];
                out.iter_mut().zip(tok).for_each(|(o, v)| *o = o.max(*v));
            }
        }
        PoolMode::Attention { score } => {
            let scores: Vec<f64> = members
                .clone()
                .map(|m| {
                    x[m * dim..(m + 1) * dim]
                        .iter()
                        .zip(score)
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect();
            let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let total: f64 = weights.iter().sum();
            out.fill(0.0);
            for (m, wgt) in members.zip(&weights) {
                let alpha = wgt / total;
                let tok = &x[m * dim..(m + 1) * dim];
                out.iter_mut().zip(tok).for_each(|(o, v)| *o += alpha * v);
            }
        }
    }
}

fn check_mode(mode: &PoolMode, dim: usize) -> Result<()> {
    if let PoolMode::Attention { score } = mode {
        if score.len() != dim {
            return shape_err(format!(
                "attention score weights have {} entries, tokens have {dim}",
                score.len()
            ));
        }
    }
    Ok(())
}

/// Pools every row of `g` down to one token (`cols == 1` on output).
pub fn pool_width(g: &TokenGrid, mode: &PoolMode) -> Result<TokenGrid> {
    let (w, dim) = (g.cols(), g.dim());
    check_mode(mode, dim)?;
    let rows = g.batch() * g.rows();
    let mut out = vec![0.0; rows * dim];
    for (r, chunk) in out.chunks_exact_mut(dim).enumerate() {
        pool_members(g.values(), dim, r * w..(r + 1) * w, w as f64, MeanRule::Shifted, mode, chunk);
    }
    Ok(TokenGrid::new(g.batch(), g.rows(), 1, dim, out)?.with_orientation(g.orientation()))
}

/// Broadcasts each pooled token across `w_target` columns.
pub fn repeat_width(g: &TokenGrid, w_target: usize) -> Result<TokenGrid> {
    if w_target < 1 {
        return domain_err("repeat target width must be at least 1");
    }
    if g.cols() != 1 {
        return shape_err(format!("repeat expects a pooled grid, got {} columns", g.cols()));
    }
    let dim = g.dim();
    let mut out = Vec::with_capacity(g.values().len() * w_target);
    for tok in g.values().chunks_exact(dim) {
        for _ in 0..w_target {
            out.extend_from_slice(tok);
        }
    }
    Ok(TokenGrid::new(g.batch(), g.rows(), w_target, dim, out)?.with_orientation(g.orientation()))
}

/// Gradient of mean pooling: the upstream gradient of each pooled token is
/// broadcast as `g / w` to every column of its row.
pub fn pool_width_backward(upstream: &TokenGrid, w: usize) -> Result<TokenGrid> {
    let mut g = repeat_width(upstream, w)?;
    let w = w as f64;
    g.values_mut().iter_mut().for_each(|v| *v /= w);
    Ok(g)
}

/// Gradient of repeat: per-row sum of the upstream gradient.
pub fn repeat_width_backward(upstream: &TokenGrid) -> Result<TokenGrid> {
    let (w, dim) = (upstream.cols(), upstream.dim());
    let rows = upstream.batch() * upstream.rows();
    let mut out = vec![0.0; rows * dim];
    for (r, chunk) in out.chunks_exact_mut(dim).enumerate() {
        for j in 0..w {
            let start = (r * w + j) * dim;
            chunk
                .iter_mut()
                .zip(&upstream.values()[start..start + dim])
                .for_each(|(o, v)| *o += v);
        }
    }
    TokenGrid::new(upstream.batch(), upstream.rows(), 1, dim, out)
}

/// Assignment of packed tokens to pooling groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupLayout {
    group_of: Vec<usize>,
    divisors: Vec<f64>,
    members: Vec<Vec<usize>>,
    rule: MeanRule,
}

impl GroupLayout {
    /// Builds a layout from one key per token; groups are numbered by first
    /// appearance. `divisor` maps a group's key and member count to the
    /// mean-pooling divisor.
    pub fn from_keys<K: Eq + std::hash::Hash + Copy>(
        keys: &[K],
        mut divisor: impl FnMut(K, usize) -> f64,
    ) -> Self {
        let mut index = std::collections::HashMap::new();
        let mut group_of = Vec::with_capacity(keys.len());
        let mut members: Vec<Vec<usize>> = Vec::new();
        let mut group_keys = Vec::new();
        for (t, k) in keys.iter().enumerate() {
            let g = *index.entry(*k).or_insert_with(|| {
                members.push(Vec::new());
                group_keys.push(*k);
                members.len() - 1
            });
            members[g].push(t);
            group_of.push(g);
        }
        let divisors: Vec<f64> = group_keys
            .iter()
            .zip(&members)
            .map(|(k, m)| divisor(*k, m.len()))
            .collect();
        let rule = if divisors.iter().zip(&members).all(|(d, m)| *d == m.len() as f64) {
            MeanRule::Shifted
        } else {
            MeanRule::SumDivide
        };
        Self {
            group_of,
            divisors,
            members,
            rule,
        }
    }

    /// Raster rows of an `h x w` grid, divisor `w`.
    pub fn rows(h: usize, w: usize) -> Self {
        let keys: Vec<usize> = (0..h * w).map(|t| t / w).collect();
        Self::from_keys(&keys, |_, _| w as f64)
    }

    /// Every token its own group: pooling and repeat are identities.
    pub fn singletons(n: usize) -> Self {
        Self {
            group_of: (0..n).collect(),
            divisors: vec![1.0; n],
            members: (0..n).map(|t| vec![t]).collect(),
            rule: MeanRule::Shifted,
        }
    }

    pub fn tokens(&self) -> usize {
        self.group_of.len()
    }

    pub fn groups(&self) -> usize {
        self.members.len()
    }

    pub fn group_of(&self) -> &[usize] {
        &self.group_of
    }

    pub fn members(&self, group: usize) -> &[usize] {
        &self.members[group]
    }

    pub fn divisor(&self, group: usize) -> f64 {
        self.divisors[group]
    }

    /// True when every group holds exactly one token.
    pub fn is_trivial(&self) -> bool {
        self.members.iter().all(|m| m.len() == 1) && self.divisors.iter().all(|&d| d == 1.0)
    }

    /// The layout of the order-reversed token sequence.
    pub fn reversed(&self) -> Self {
        let n = self.tokens();
        let keys: Vec<usize> = (0..n).map(|t| self.group_of[n - 1 - t]).collect();
        Self {
            rule: self.rule,
            ..Self::from_keys(&keys, |g, _| self.divisors[g])
        }
    }

    /// Pool by plain sum and divide even where the divisor equals the group
    /// size, so `pooled · divisor` reproduces the group sum.
    pub fn sum_divide(mut self) -> Self {
        self.rule = MeanRule::SumDivide;
        self
    }

    /// Pools `tokens x dim` values into `groups x dim`.
    pub fn pool(&self, x: &[f64], dim: usize, mode: &PoolMode) -> Result<Vec<f64>> {
        check_mode(mode, dim)?;
        if x.len() != self.tokens() * dim {
            return shape_err(format!(
                "pool input has {} values, layout needs {}x{dim}",
                x.len(),
                self.tokens()
            ));
        }
        let mut out = vec![0.0; self.groups() * dim];
        for (g, chunk) in out.chunks_exact_mut(dim).enumerate() {
            pool_members(
                x,
                dim,
                self.members[g].iter().copied(),
                self.divisors[g],
                self.rule,
                mode,
                chunk,
            );
        }
        Ok(out)
    }

    /// Scatters `groups x dim` pooled values back to every member token,
    /// multiplied by `scale`.
    pub fn repeat(&self, pooled: &[f64], dim: usize, scale: f64) -> Result<Vec<f64>> {
        if pooled.len() != self.groups() * dim {
            return shape_err(format!(
                "repeat input has {} values, layout needs {}x{dim}",
                pooled.len(),
                self.groups()
            ));
        }
        let mut out = Vec::with_capacity(self.tokens() * dim);
        for &g in &self.group_of {
            let src = &pooled[g * dim..(g + 1) * dim];
            if scale == 1.0 {
                out.extend_from_slice(src);
            } else {
                out.extend(src.iter().map(|v| v * scale));
            }
        }
        Ok(out)
    }
}
