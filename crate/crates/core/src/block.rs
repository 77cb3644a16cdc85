//! One bidirectional pooled-scan block.
//!
//! RMS-norm, expansion into an `x` branch and a gate `z`, optional transpose
//! of the working grid on odd blocks, forward and backward SSM branches
//! (causal conv, SiLU, pool, selective scan, repeat, skip, post-SSM
//! LayerNorm), SiLU gating, output projection and residual.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::linalg::{affine, layer_norm_rows, matmul, rms_norm_rows, silu, Matrix};
use crate::pooling::{GroupLayout, PoolKind, PoolMode};
use crate::selective_scan::{
    build_lane, parallel_depth, project_rows, scan_parallel, scan_sequential, DiscretizeMode,
    SelectiveProjection, SelectiveSSMParams,
};
use crate::tensor_grid::{transpose_grid, Orientation, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanKind {
    #[default]
    Sequential,
    Parallel,
}

/// Where decompression happens relative to the `D` skip connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipPlacement {
    /// Repeat the pooled scan output, then add `D ⊙ x` at full resolution.
    #[default]
    BeforeSkip,
    /// Add `D ⊙ x_pooled` inside the pooled scan, then repeat.
    AfterSkip,
}

/// Which grid axis a block pooled over, in canonical coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PooledAxis {
    /// Pooling across columns: the scan runs over rows.
    Width,
    /// Pooling across rows: the scan runs over columns.
    Height,
    WidthChannel,
    HeightChannel,
    HeightWidth,
    /// No pooling (unpooled reference).
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BlockFlags {
    pub use_post_norm: bool,
    pub skip_placement: SkipPlacement,
    pub fused_repeat_skip: bool,
}

impl Default for BlockFlags {
    fn default() -> Self {
        Self {
            use_post_norm: true,
            skip_placement: SkipPlacement::BeforeSkip,
            fused_repeat_skip: false,
        }
    }
}

/// Execution choices that do not change the parameter set.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlockOptions {
    /// Pool before the scan. `false` gives the unpooled reference block.
    pub pooled: bool,
    /// Transpose the working grid on odd block indices.
    pub alternate: bool,
    pub scan: ScanKind,
    pub discretize: DiscretizeMode,
    /// Multiplier applied to pooled outputs when they are repeated.
    pub repeat_scale: f64,
}

impl Default for BlockOptions {
    fn default() -> Self {
        Self {
            pooled: true,
            alternate: true,
            scan: ScanKind::Sequential,
            discretize: DiscretizeMode::ZohExact,
            repeat_scale: 1.0,
        }
    }
}

/// Per-direction branch parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionParams {
    /// `channels x k` depthwise taps; tap `k - 1` weights the current step.
    pub conv_taps: Matrix,
    pub conv_bias: Vec<f64>,
    pub ssm: SelectiveSSMParams,
    pub post_norm_gamma: Vec<f64>,
    pub post_norm_beta: Vec<f64>,
    /// Attention-pooling score weights, present iff pooling is attention.
    pub pool_score: Option<Vec<f64>>,
}

impl DirectionParams {
    pub fn random(channels: usize, state: usize, conv_width: usize, pool: PoolKind, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (conv_width as f64).sqrt();
        let uni = Uniform::new_inclusive(-bound, bound).unwrap();
        let conv_taps = Matrix::from_fn(channels, conv_width, |_, _| uni.sample(rng));
        let conv_bias = (0..channels).map(|_| uni.sample(rng)).collect();
        let ssm = SelectiveSSMParams::random(channels, state, rng);
        let pool_score = (pool == PoolKind::Attention).then(|| {
            let normal = Normal::new(0.0, 0.02).unwrap();
            (0..channels).map(|_| normal.sample(rng)).collect()
        });
        Self {
            conv_taps,
            conv_bias,
            ssm,
            post_norm_gamma: vec![1.0; channels],
            post_norm_beta: vec![0.0; channels],
            pool_score,
        }
    }

    pub fn channels(&self) -> usize {
        self.conv_taps.rows
    }

    pub fn pool_mode(&self) -> PoolMode {
        match &self.pool_score {
            Some(score) => PoolMode::Attention {
                score: score.clone(),
            },
            None => PoolMode::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub block_index: usize,
    pub input_norm: Vec<f64>,
    /// `dim x 2·channels`: the first `channels` outputs are `x`, the rest `z`.
    pub w_expand: Matrix,
    pub forward: DirectionParams,
    pub backward: DirectionParams,
    /// `channels x dim`.
    pub w_out: Matrix,
    pub flags: BlockFlags,
    /// Overrides the pool mode implied by `pool_score` (used for max pooling).
    pub pool_kind: PoolKind,
}

impl BlockParams {
    pub fn random(
        block_index: usize,
        dim: usize,
        expand: usize,
        state: usize,
        conv_width: usize,
        pool: PoolKind,
        rng: &mut impl Rng,
    ) -> Self {
        let channels = expand * dim;
        let normal = Normal::new(0.0, 0.02).unwrap();
        let w_expand = Matrix::from_fn(dim, 2 * channels, |_, _| normal.sample(rng));
        let forward = DirectionParams::random(channels, state, conv_width, pool, rng);
        let backward = DirectionParams::random(channels, state, conv_width, pool, rng);
        let w_out = Matrix::from_fn(channels, dim, |_, _| normal.sample(rng));
        Self {
            block_index,
            input_norm: vec![1.0; dim],
            w_expand,
            forward,
            backward,
            w_out,
            flags: BlockFlags::default(),
            pool_kind: pool,
        }
    }

    pub fn dim(&self) -> usize {
        self.input_norm.len()
    }

    pub fn channels(&self) -> usize {
        self.w_out.rows
    }

    pub fn direction(&self, d: Direction) -> &DirectionParams {
        match d {
            Direction::Forward => &self.forward,
            Direction::Backward => &self.backward,
        }
    }

    pub fn pool_mode(&self, d: Direction) -> PoolMode {
        match self.pool_kind {
            PoolKind::Max => PoolMode::Max,
            _ => self.direction(d).pool_mode(),
        }
    }

    /// Whether this block transposes its working grid.
    pub fn transposes(&self, opts: &BlockOptions) -> bool {
        opts.alternate && self.block_index % 2 == 1
    }

    pub fn validate(&self) -> Result<()> {
        let (dim, ch) = (self.dim(), self.channels());
        let mut ok = self.w_expand.shape() == (dim, 2 * ch) && self.w_out.shape() == (ch, dim);
        for d in [&self.forward, &self.backward] {
            d.ssm.validate()?;
            ok &= d.conv_taps.rows == ch
                && d.conv_taps.cols >= 1
                && d.conv_bias.len() == ch
                && d.ssm.channels() == ch
                && d.post_norm_gamma.len() == ch
                && d.post_norm_beta.len() == ch
                && d.pool_score.as_ref().is_none_or(|s| s.len() == ch);
            ok &= (self.pool_kind == PoolKind::Attention) == d.pool_score.is_some();
        }
        if ok {
            Ok(())
        } else {
            shape_err(format!("block {} parameters inconsistent with dim {dim}", self.block_index))
        }
    }
}

/// Depthwise causal convolution over `steps x channels` with zero left
/// padding: `out_t = bias + Σ_i taps[i]·seq_{t-(k-1)+i}`.
pub fn causal_conv1d(seq: &[f64], steps: usize, taps: &Matrix, bias: &[f64]) -> Vec<f64> {
    let (ch, k) = taps.shape();
    debug_assert_eq!(seq.len(), steps * ch);
    let mut out = Vec::with_capacity(steps * ch);
    for t in 0..steps {
        for c in 0..ch {
            let w = taps.row(c);
            let mut acc = bias[c];
            for (i, &tap) in w.iter().enumerate() {
                let Some(src) = (t + i).checked_sub(k - 1) else {
                    continue;
                };
                acc += tap * seq[src * ch + c];
            }
            out.push(acc);
        }
    }
    out
}

pub fn silu_in_place(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = silu(*v));
}

/// Causal conv followed by SiLU.
pub fn conv_silu(seq: &[f64], steps: usize, p: &DirectionParams) -> Vec<f64> {
    let mut act = causal_conv1d(seq, steps, &p.conv_taps, &p.conv_bias);
    silu_in_place(&mut act);
    act
}

/// Runs the selective scan over a pooled `steps x channels` sequence.
/// Returns `steps x channels` outputs and the parallel round count.
pub fn scan_pooled(
    pooled: &[f64],
    proj: &SelectiveProjection,
    ssm: &SelectiveSSMParams,
    placement: SkipPlacement,
    opts: &BlockOptions,
) -> (Vec<f64>, usize) {
    let (steps, ch) = (proj.steps, proj.channels);
    let a = ssm.a();
    let columns: Vec<Vec<f64>> = (0..ch)
        .into_par_iter()
        .map(|d| {
            let skip = match placement {
                SkipPlacement::BeforeSkip => 0.0,
                SkipPlacement::AfterSkip => ssm.d_skip[d],
            };
            let lane = build_lane(proj, a.row(d), pooled, d, 0, steps, skip, opts.discretize);
            match opts.scan {
                ScanKind::Sequential => scan_sequential(&lane),
                ScanKind::Parallel => scan_parallel(&lane).0,
            }
        })
        .collect();
    let mut y = vec![0.0; steps * ch];
    for (d, col) in columns.iter().enumerate() {
        for (t, v) in col.iter().enumerate() {
            y[t * ch + d] = *v;
        }
    }
    (y, parallel_depth(steps))
}

/// Repeat followed by the full-resolution skip, as two passes.
pub fn repeat_then_skip(y_pooled: &[f64], act: &[f64], layout: &GroupLayout, d_skip: &[f64], scale: f64) -> Result<Vec<f64>> {
    let mut out = layout.repeat(y_pooled, d_skip.len(), scale)?;
    add_skip(&mut out, act, d_skip);
    Ok(out)
}

pub fn add_skip(out: &mut [f64], act: &[f64], d_skip: &[f64]) {
    let ch = d_skip.len();
    for (o_row, x_row) in out.chunks_exact_mut(ch).zip(act.chunks_exact(ch)) {
        for ((o, x), d) in o_row.iter_mut().zip(x_row).zip(d_skip) {
            *o += d * x;
        }
    }
}

/// Single pass: each token reads its group's pooled output and adds its skip.
pub fn fused_repeat_skip(y_pooled: &[f64], act: &[f64], layout: &GroupLayout, d_skip: &[f64], scale: f64) -> Vec<f64> {
    let ch = d_skip.len();
    let mut out = Vec::with_capacity(act.len());
    for (t, &g) in layout.group_of().iter().enumerate() {
        let y = &y_pooled[g * ch..(g + 1) * ch];
        let x = &act[t * ch..(t + 1) * ch];
        for c in 0..ch {
            let rep = if scale == 1.0 { y[c] } else { y[c] * scale };
            out.push(rep + d_skip[c] * x[c]);
        }
    }
    out
}

/// Result of one directional branch over a packed sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput {
    /// `batch x tokens x channels`, in the input token order.
    pub values: Vec<f64>,
    pub pooled_len: usize,
    pub depth: usize,
}

/// One directional SSM branch over packed `batch x tokens x channels`
/// activations whose pooling groups are given by `layout` (in forward
/// order). The backward direction reverses the whole sequence, runs the
/// same pipeline and reverses the result.
pub fn ssm_branch_seq(
    x: &[f64],
    batch: usize,
    layout: &GroupLayout,
    direction: Direction,
    params: &BlockParams,
    opts: &BlockOptions,
) -> Result<BranchOutput> {
    let p = params.direction(direction);
    let ch = p.channels();
    let n = layout.tokens();
    if x.len() != batch * n * ch {
        return shape_err(format!(
            "branch input has {} values, expected {batch}x{n}x{ch}",
            x.len()
        ));
    }
    let owned;
    let layout = match direction {
        Direction::Forward => layout,
        Direction::Backward => {
            owned = layout.reversed();
            &owned
        }
    };
    let mode = params.pool_mode(direction);
    let trivial = layout.is_trivial();
    let groups = layout.groups();
    let mut values = Vec::with_capacity(x.len());
    let mut depth = 0;
    for b in 0..batch {
        let src = &x[b * n * ch..(b + 1) * n * ch];
        let seq: Vec<f64> = match direction {
            Direction::Forward => src.to_vec(),
            Direction::Backward => src.chunks_exact(ch).rev().flatten().copied().collect(),
        };
        let act = conv_silu(&seq, n, p);
        let pooled = if trivial {
            act.clone()
        } else {
            layout.pool(&act, ch, &mode)?
        };
        let proj = project_rows(&pooled, groups, &p.ssm)?;
        let (y_pooled, d) = scan_pooled(&pooled, &proj, &p.ssm, params.flags.skip_placement, opts);
        depth = d;
        let mut out = match params.flags.skip_placement {
            SkipPlacement::BeforeSkip if params.flags.fused_repeat_skip => {
                fused_repeat_skip(&y_pooled, &act, layout, &p.ssm.d_skip, opts.repeat_scale)
            }
            SkipPlacement::BeforeSkip => {
                repeat_then_skip(&y_pooled, &act, layout, &p.ssm.d_skip, opts.repeat_scale)?
            }
            SkipPlacement::AfterSkip => layout.repeat(&y_pooled, ch, opts.repeat_scale)?,
        };
        if params.flags.use_post_norm {
            layer_norm_rows(&mut out, &p.post_norm_gamma, &p.post_norm_beta);
        }
        match direction {
            Direction::Forward => values.extend_from_slice(&out),
            Direction::Backward => values.extend(out.chunks_exact(ch).rev().flatten()),
        }
    }
    Ok(BranchOutput {
        values,
        pooled_len: groups,
        depth,
    })
}

/// Branch over a dense working grid: pools across columns (or not at all
/// for the unpooled reference).
pub fn ssm_branch(g: &TokenGrid, direction: Direction, params: &BlockParams, opts: &BlockOptions) -> Result<TokenGrid> {
    let layout = grid_layout(g.rows(), g.cols(), opts.pooled);
    let out = ssm_branch_seq(g.values(), g.batch(), &layout, direction, params, opts)?;
    Ok(TokenGrid::new(g.batch(), g.rows(), g.cols(), g.dim(), out.values)?.with_orientation(g.orientation()))
}

pub fn grid_layout(rows: usize, cols: usize, pooled: bool) -> GroupLayout {
    if pooled {
        GroupLayout::rows(rows, cols)
    } else {
        GroupLayout::singletons(rows * cols)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BlockTrace {
    pub block_index: usize,
    pub pooled_axis: PooledAxis,
    pub pooled_len: usize,
    pub depth: usize,
}

/// Both directional branches, gated by `SiLU(z)` and summed, over packed
/// tokens in working order.
pub fn gated_mixer(
    x: &[f64],
    z: &[f64],
    batch: usize,
    layout: &GroupLayout,
    params: &BlockParams,
    opts: &BlockOptions,
) -> Result<(Vec<f64>, BranchOutput)> {
    let fwd = ssm_branch_seq(x, batch, layout, Direction::Forward, params, opts)?;
    let bwd = ssm_branch_seq(x, batch, layout, Direction::Backward, params, opts)?;
    let y = fwd
        .values
        .iter()
        .zip(&bwd.values)
        .zip(z)
        .map(|((f, b), z)| {
            let gate = silu(*z);
            f * gate + b * gate
        })
        .collect();
    Ok((y, fwd))
}

/// Norm and expansion: returns `(x, z)`, each `rows x channels`.
fn expand(tokens: &[f64], rows: usize, params: &BlockParams) -> (Vec<f64>, Vec<f64>) {
    let ch = params.channels();
    let mut u = tokens.to_vec();
    rms_norm_rows(&mut u, &params.input_norm);
    let xz = matmul(&u, rows, &params.w_expand);
    let mut x = Vec::with_capacity(rows * ch);
    let mut z = Vec::with_capacity(rows * ch);
    for row in xz.chunks_exact(2 * ch) {
        x.extend_from_slice(&row[..ch]);
        z.extend_from_slice(&row[ch..]);
    }
    (x, z)
}

fn project_out(residual: &[f64], y: &[f64], rows: usize, params: &BlockParams) -> Vec<f64> {
    let mut out = affine(y, rows, &params.w_out, None);
    out.iter_mut().zip(residual).for_each(|(o, r)| *o += r);
    out
}

/// Block over packed tokens already in working order with their pooling
/// layout. Returns the residual output in the same order.
pub fn block_forward_seq(
    tokens: &[f64],
    batch: usize,
    layout: &GroupLayout,
    params: &BlockParams,
    opts: &BlockOptions,
) -> Result<(Vec<f64>, BranchOutput)> {
    let rows = batch * layout.tokens();
    if tokens.len() != rows * params.dim() {
        return shape_err(format!(
            "block input has {} values, expected {rows}x{}",
            tokens.len(),
            params.dim()
        ));
    }
    let (x, z) = expand(tokens, rows, params);
    let (y, branch) = gated_mixer(&x, &z, batch, layout, params, opts)?;
    Ok((project_out(tokens, &y, rows, params), branch))
}

/// Dense block on a canonical grid. Odd blocks (with alternation) transpose
/// the expanded `x` and `z` grids so pooling runs across rows instead of
/// columns; the output is restored to canonical orientation before the
/// residual.
pub fn block_forward(g: &TokenGrid, params: &BlockParams, opts: &BlockOptions) -> Result<(TokenGrid, BlockTrace)> {
    if g.orientation() != Orientation::Canonical {
        return shape_err("block input must be in canonical orientation");
    }
    if g.dim() != params.dim() {
        return shape_err(format!("grid dim {} does not match block dim {}", g.dim(), params.dim()));
    }
    let ch = params.channels();
    let rows = g.batch() * g.tokens();
    let (x, z) = expand(g.values(), rows, params);
    let mut xg = TokenGrid::new(g.batch(), g.rows(), g.cols(), ch, x)?;
    let mut zg = TokenGrid::new(g.batch(), g.rows(), g.cols(), ch, z)?;
    let transposed = params.transposes(opts);
    if transposed {
        xg = transpose_grid(&xg);
        zg = transpose_grid(&zg);
    }
    let layout = grid_layout(xg.rows(), xg.cols(), opts.pooled);
    let (y, branch) = gated_mixer(xg.values(), zg.values(), g.batch(), &layout, params, opts)?;
    let mut yg = TokenGrid::new(xg.batch(), xg.rows(), xg.cols(), ch, y)?.with_orientation(xg.orientation());
    if transposed {
        yg = transpose_grid(&yg);
    }
    let out = project_out(g.values(), yg.values(), rows, params);
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
    Ok((TokenGrid::new(g.batch(), g.rows(), g.cols(), g.dim(), out)?, trace))
}
