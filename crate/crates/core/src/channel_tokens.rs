//! Per-channel token grids: hierarchical channel sampling, scanpath
//! orderings and per-channel spatial pooling.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block::{block_forward_seq, BlockOptions, BlockParams, BlockTrace, PooledAxis};
use crate::error::{shape_err, Result};
use crate::linalg::Matrix;
use crate::pooling::{GroupLayout, PoolMode};

/// Tokens indexed `(batch, row, col, channel, dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTokenGrid {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub dim: usize,
    pub values: Vec<f64>,
    /// Active source channels, strictly increasing, one per channel slot.
    pub channel_ids: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanPath {
    /// All channels at one spatial site before the next site.
    #[default]
    ChannelFirst,
    /// All spatial sites of one channel before the next channel.
    SpatialFirst,
}

/// Pooling schedule for channel grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelSchedule {
    /// Pool width per `(row, channel)`, transposing on odd blocks.
    #[default]
    Alternate,
    /// Cycle width+channel, height+channel, height+width pooling.
    TwoD,
}

/// The pair of axes reduced by the two-axis schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolAxes2d {
    WidthChannel,
    HeightChannel,
    HeightWidth,
}

impl PoolAxes2d {
    /// Scan length after pooling a `h x w x channels` grid.
    pub fn scan_len(self, h: usize, w: usize, channels: usize) -> usize {
        match self {
            PoolAxes2d::WidthChannel => h,
            PoolAxes2d::HeightChannel => w,
            PoolAxes2d::HeightWidth => channels,
        }
    }
}

pub fn pool_schedule_2d(block_index: usize) -> PoolAxes2d {
    match block_index % 3 {
        0 => PoolAxes2d::WidthChannel,
        1 => PoolAxes2d::HeightChannel,
        _ => PoolAxes2d::HeightWidth,
    }
}

impl ChannelTokenGrid {
    pub fn new(
        batch: usize,
        h: usize,
        w: usize,
        channels: usize,
        dim: usize,
        values: Vec<f64>,
        channel_ids: Vec<usize>,
    ) -> Result<Self> {
        if batch * h * w * channels * dim == 0 {
            return shape_err("channel grid dims must be positive");
        }
        if values.len() != batch * h * w * channels * dim {
            return shape_err(format!(
                "channel grid {batch}x{h}x{w}x{channels}x{dim} got {} values",
                values.len()
            ));
        }
        if channel_ids.len() != channels || channel_ids.windows(2).any(|p| p[0] >= p[1]) {
            return shape_err("channel ids must be strictly increasing, one per channel");
        }
        Ok(Self {
            batch,
            h,
            w,
            channels,
            dim,
            values,
            channel_ids,
        })
    }

    #[inline]
    pub fn index(&self, b: usize, i: usize, j: usize, c: usize) -> usize {
        (((b * self.h + i) * self.w + j) * self.channels + c) * self.dim
    }

    pub fn token(&self, b: usize, i: usize, j: usize, c: usize) -> &[f64] {
        let s = self.index(b, i, j, c);
        &self.values[s..s + self.dim]
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w * self.channels
    }

    /// Adds row `channel_ids[c]` of `embed` to every token of channel slot `c`.
    pub fn add_channel_embedding(&mut self, embed: &Matrix) -> Result<()> {
        if embed.cols != self.dim || self.channel_ids.iter().any(|&id| id >= embed.rows) {
            return shape_err("channel embedding does not cover the active channels");
        }
        let dim = self.dim;
        for (k, tok) in self.values.chunks_exact_mut(dim).enumerate() {
            let c = k % self.channels;
            tok.iter_mut()
                .zip(embed.row(self.channel_ids[c]))
                .for_each(|(t, e)| *t += e);
        }
        Ok(())
    }

    fn gather(&self, positions: &[(usize, usize, usize)]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.batch * positions.len() * self.dim);
        for b in 0..self.batch {
            for &(i, j, c) in positions {
                out.extend_from_slice(self.token(b, i, j, c));
            }
        }
        out
    }

    fn scatter(&mut self, positions: &[(usize, usize, usize)], seq: &[f64]) {
        let dim = self.dim;
        let n = positions.len();
        for b in 0..self.batch {
            for (k, &(i, j, c)) in positions.iter().enumerate() {
                let dst = self.index(b, i, j, c);
                let src = (b * n + k) * dim;
                self.values[dst..dst + dim].copy_from_slice(&seq[src..src + dim]);
            }
        }
    }
}

/// Draws `m` uniformly from `1..=total`, then `m` distinct channels
/// uniformly; returns them ascending.
pub fn hcs_sample_with(total: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(total >= 1, "channel count must be positive");
    let m = rng.random_range(1..=total);
    let mut picked = sample(rng, total, m).into_vec();
    picked.sort_unstable();
    picked
}

pub fn hcs_sample(total: usize, seed: u64) -> Vec<usize> {
    hcs_sample_with(total, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `(row, col, channel)` visited at each position of the flattened sequence.
pub fn token_order(h: usize, w: usize, channels: usize, path: ScanPath) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::with_capacity(h * w * channels);
    match path {
        ScanPath::ChannelFirst => {
            for p in 0..h * w {
                for c in 0..channels {
                    out.push((p / w, p % w, c));
                }
            }
        }
        ScanPath::SpatialFirst => {
            for c in 0..channels {
                for p in 0..h * w {
                    out.push((p / w, p % w, c));
                }
            }
        }
    }
    out
}

/// Flattens to `batch x (h·w·C) x dim` along `path`.
pub fn order_tokens(g: &ChannelTokenGrid, path: ScanPath) -> Vec<f64> {
    g.gather(&token_order(g.h, g.w, g.channels, path))
}

/// Inverse of [`order_tokens`] into a grid shaped like `like`.
pub fn unorder_tokens(seq: &[f64], like: &ChannelTokenGrid, path: ScanPath) -> Result<ChannelTokenGrid> {
    if seq.len() != like.values.len() {
        return shape_err("sequence length does not match the grid");
    }
    let mut g = like.clone();
    g.scatter(&token_order(g.h, g.w, g.channels, path), seq);
    Ok(g)
}

fn row_channel_layout(h: usize, w: usize, channels: usize) -> GroupLayout {
    let keys: Vec<(usize, usize)> = token_order(h, w, channels, ScanPath::ChannelFirst)
        .into_iter()
        .map(|(i, _, c)| (i, c))
        .collect();
    GroupLayout::from_keys(&keys, |_, _| w as f64)
}

/// Pools over the width index per `(row, channel)`; output is
/// `batch x (h·C) x dim` ordered channel-first over `(row, channel)`.
pub fn channel_pool_spatial(g: &ChannelTokenGrid, mode: &PoolMode) -> Result<Vec<f64>> {
    let layout = row_channel_layout(g.h, g.w, g.channels);
    let seq = order_tokens(g, ScanPath::ChannelFirst);
    let per = g.tokens() * g.dim;
    let mut out = Vec::with_capacity(g.batch * g.h * g.channels * g.dim);
    for b in 0..g.batch {
        out.extend(layout.pool(&seq[b * per..(b + 1) * per], g.dim, mode)?);
    }
    Ok(out)
}

/// Scatters `(row, channel)` pooled tokens back across the width.
pub fn channel_repeat_spatial(pooled: &[f64], like: &ChannelTokenGrid) -> Result<ChannelTokenGrid> {
    let (h, c, dim) = (like.h, like.channels, like.dim);
    if pooled.len() != like.batch * h * c * dim {
        return shape_err("pooled channel tokens do not match the grid");
    }
    let layout = row_channel_layout(h, like.w, c);
    let per = h * c * dim;
    let mut seq = Vec::with_capacity(like.values.len());
    for b in 0..like.batch {
        seq.extend(layout.repeat(&pooled[b * per..(b + 1) * per], dim, 1.0)?);
    }
    unorder_tokens(&seq, like, ScanPath::ChannelFirst)
}

/// Block over a channel grid. Returns the updated grid and its trace.
pub fn block_forward_channel(
    g: &ChannelTokenGrid,
    params: &BlockParams,
    opts: &BlockOptions,
    path: ScanPath,
    schedule: ChannelSchedule,
) -> Result<(ChannelTokenGrid, BlockTrace)> {
    let (h, w, c) = (g.h, g.w, g.channels);
    let (positions, keys, axis): (Vec<_>, Vec<usize>, PooledAxis);
    let divisor: f64;
    match schedule {
        ChannelSchedule::Alternate => {
            let transposed = params.transposes(opts);
            let (wh, ww) = if transposed { (w, h) } else { (h, w) };
            // Order in the working frame, mapped back to canonical positions.
            positions = token_order(wh, ww, c, path)
                .into_iter()
                .map(|(i, j, ch)| if transposed { (j, i, ch) } else { (i, j, ch) })
                .collect();
            keys = positions
                .iter()
                .map(|&(i, j, ch)| if transposed { j * c + ch } else { i * c + ch })
                .collect();
            divisor = ww as f64;
            axis = if transposed { PooledAxis::Height } else { PooledAxis::Width };
        }
        ChannelSchedule::TwoD => {
            positions = token_order(h, w, c, path);
            let axes = pool_schedule_2d(params.block_index);
            keys = positions
                .iter()
                .map(|&(i, j, ch)| match axes {
                    PoolAxes2d::WidthChannel => i,
                    PoolAxes2d::HeightChannel => j,
                    PoolAxes2d::HeightWidth => ch,
                })
                .collect();
            divisor = match axes {
                PoolAxes2d::WidthChannel => (w * c) as f64,
                PoolAxes2d::HeightChannel => (h * c) as f64,
                PoolAxes2d::HeightWidth => (h * w) as f64,
            };
            axis = match axes {
                PoolAxes2d::WidthChannel => PooledAxis::WidthChannel,
                PoolAxes2d::HeightChannel => PooledAxis::HeightChannel,
                PoolAxes2d::HeightWidth => PooledAxis::HeightWidth,
            };
        }
    }
    let layout = if opts.pooled {
        GroupLayout::from_keys(&keys, |_, _| divisor)
    } else {
        GroupLayout::singletons(positions.len())
    };
    let seq = g.gather(&positions);
    let (out, branch) = block_forward_seq(&seq, g.batch, &layout, params, opts)?;
    let mut result = g.clone();
    result.scatter(&positions, &out);
    let trace = BlockTrace {
        block_index: params.block_index,
        pooled_axis: if opts.pooled { axis } else { PooledAxis::None },
        pooled_len: branch.pooled_len,
        depth: branch.depth,
    };
    Ok((result, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize) -> f64) -> ChannelTokenGrid {
        let mut v = Vec::new();
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    v.push(f(i, j, ch));
                }
            }
        }
        ChannelTokenGrid::new(1, h, w, c, 1, v, (0..c).collect()).unwrap()
    }

    #[test]
    fn orderings() {
        // token value encodes (position, channel) as 10·p + c
        let g = grid(2, 1, 2, |i, _, c| (10 * i + c) as f64);
        assert_eq!(order_tokens(&g, ScanPath::ChannelFirst), vec![0., 1., 10., 11.]);
        assert_eq!(order_tokens(&g, ScanPath::SpatialFirst), vec![0., 10., 1., 11.]);
    }

    #[test]
    fn hcs_full_draw_is_identity_order() {
        let mut seen_full = false;
        for seed in 0..200 {
            let s = hcs_sample(5, seed);
            assert!(s.windows(2).all(|p| p[0] < p[1]));
            assert!(!s.is_empty() && s.len() <= 5);
            if s.len() == 5 {
                assert_eq!(s, vec![0, 1, 2, 3, 4]);
                seen_full = true;
            }
        }
        assert!(seen_full);
    }

    #[test]
    fn channel_constant_pooling() {
        let g = grid(3, 4, 2, |_, _, c| (c + 1) as f64);
        let pooled = channel_pool_spatial(&g, &PoolMode::Mean).unwrap();
        assert_eq!(pooled, vec![1., 2., 1., 2., 1., 2.]);
    }

    #[test]
    fn schedule_cycle() {
        assert_eq!(pool_schedule_2d(0), PoolAxes2d::WidthChannel);
        assert_eq!(pool_schedule_2d(1), PoolAxes2d::HeightChannel);
        assert_eq!(pool_schedule_2d(2), PoolAxes2d::HeightWidth);
        assert_eq!(pool_schedule_2d(3), PoolAxes2d::WidthChannel);
        let lens: Vec<usize> = (0..3).map(|k| pool_schedule_2d(k).scan_len(4, 4, 8)).collect();
        assert_eq!(lens, vec![4, 4, 8]);
    }

    #[test]
    fn unsorted_ids_rejected() {
        assert!(ChannelTokenGrid::new(1, 1, 1, 2, 1, vec![0.0; 2], vec![3, 1]).is_err());
    }
}
