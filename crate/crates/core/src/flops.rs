//! Closed-form FLOP counts for pooled and unpooled encoders.
//!
//! Convention: one multiply-accumulate is one FLOP and every elementwise
//! operation (activation, exp, add, scale) is one FLOP. The selective scan
//! kernel is charged 9 FLOPs per `(step, channel, state)` element, covering
//! discretization, the recurrence update and the `C·h` readout. Pooling and
//! repeat are pure data movement and cost nothing.

use crate::encoder::{ClassToken, EncoderConfig};
use crate::error::{Error, Result};

/// FLOPs per `(step, channel, state)` element of the selective scan.
pub const SCAN_FLOPS_PER_STATE: u64 = 9;

/// Classes of the classifier head used for reporting.
pub const REPORT_CLASSES: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopComponent {
    PatchEmbed,
    Norm,
    Expansion,
    Conv1d,
    Activation,
    SelectiveProjection,
    Scan,
    PoolRepeat,
    Skip,
    Gating,
    OutProj,
    Residual,
    Head,
}

impl FlopComponent {
    pub const ALL: [FlopComponent; 13] = [
        FlopComponent::PatchEmbed,
        FlopComponent::Norm,
        FlopComponent::Expansion,
        FlopComponent::Conv1d,
        FlopComponent::Activation,
        FlopComponent::SelectiveProjection,
        FlopComponent::Scan,
        FlopComponent::PoolRepeat,
        FlopComponent::Skip,
        FlopComponent::Gating,
        FlopComponent::OutProj,
        FlopComponent::Residual,
        FlopComponent::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FlopComponent::PatchEmbed => "patch_embed",
            FlopComponent::Norm => "norm",
            FlopComponent::Expansion => "expansion",
            FlopComponent::Conv1d => "conv1d",
            FlopComponent::Activation => "activation",
            FlopComponent::SelectiveProjection => "selective_projection",
            FlopComponent::Scan => "scan",
            FlopComponent::PoolRepeat => "pool_repeat",
            FlopComponent::Skip => "skip",
            FlopComponent::Gating => "gating",
            FlopComponent::OutProj => "out_proj",
            FlopComponent::Residual => "residual",
            FlopComponent::Head => "head",
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FlopReport {
    pub model: String,
    pub resolution: usize,
    pub tokens: usize,
    pub scan_len: usize,
    pub components: Vec<(FlopComponent, u64)>,
    pub total: u64,
}

impl FlopReport {
    pub fn get(&self, c: FlopComponent) -> u64 {
        self.components
            .iter()
            .find(|(k, _)| *k == c)
            .map_or(0, |(_, v)| *v)
    }

    pub fn gflops(&self) -> f64 {
        self.total as f64 / 1e9
    }
}

/// Counts FLOPs for one image at `resolution x resolution`.
pub fn count_flops(config: &EncoderConfig, resolution: usize) -> Result<FlopReport> {
    let p = config.patch;
    if p == 0 || resolution == 0 || resolution % p != 0 {
        return Err(Error::Domain(format!(
            "resolution {resolution} is not divisible by patch size {p}"
        )));
    }
    let h = (resolution / p) as u64;
    let w = h;
    let cls = u64::from(config.class_token == ClassToken::Middle);
    let patches = h * w;
    let tokens = patches + cls;
    let d = config.dim() as u64;
    let ed = config.expand as u64 * d;
    let n = config.state as u64;
    let k = config.conv_width as u64;
    let depth = config.depth() as u64;
    let chans = config.in_chans as u64;
    let dirs = 2;
    // steps per direction: pooled rows (or columns) plus the class token
    let scan_len = if config.pooled { h + cls } else { tokens };

    let mut c = vec![0u64; FlopComponent::ALL.len()];
    let mut add = |comp: FlopComponent, v: u64| c[comp as usize] += v;

    // patch projection, bias and position embedding
    add(FlopComponent::PatchEmbed, patches * p as u64 * p as u64 * chans * d + 2 * patches * d);

    for _ in 0..depth {
        // input RMS-norm (square-accumulate, scale) and post-SSM LayerNorm
        // (mean, variance, affine) per direction
        add(FlopComponent::Norm, 2 * tokens * d);
        if config.post_norm {
            add(FlopComponent::Norm, dirs * 3 * tokens * ed);
        }
        add(FlopComponent::Expansion, tokens * d * 2 * ed);
        add(FlopComponent::Conv1d, dirs * tokens * ed * (k + 1));
        add(FlopComponent::Activation, dirs * tokens * ed);
        // B, C and the scalar step projection, then bias add + softplus
        add(FlopComponent::SelectiveProjection, dirs * scan_len * (ed * (2 * n + 1) + 2 * ed));
        add(FlopComponent::Scan, dirs * SCAN_FLOPS_PER_STATE * scan_len * ed * n);
        add(FlopComponent::PoolRepeat, 0);
        add(FlopComponent::Skip, dirs * tokens * ed);
        // SiLU(z), two gate products, branch sum
        add(FlopComponent::Gating, 4 * tokens * ed);
        add(FlopComponent::OutProj, tokens * ed * d);
        add(FlopComponent::Residual, tokens * d);
    }
    // final norm, token mean, classifier
    add(FlopComponent::Head, 3 * tokens * d + d * REPORT_CLASSES);

    let components: Vec<(FlopComponent, u64)> = FlopComponent::ALL.iter().map(|&k| (k, c[k as usize])).collect();
    let total = components.iter().map(|(_, v)| v).sum();
    Ok(FlopReport {
        model: config.model_name(),
        resolution,
        tokens: tokens as usize,
        scan_len: scan_len as usize,
        components,
        total,
    })
}

/// `(vim - fastvim) / vim`.
pub fn reduction(vim: &FlopReport, fast: &FlopReport) -> f64 {
    (vim.total as f64 - fast.total as f64) / vim.total as f64
}

/// Plain ViT (DeiT) count under the same convention, matmuls only, used to
/// pin the convention against the published DeiT-S figure.
#[derive(Debug, Clone, Copy)]
pub struct VitShape {
    pub dim: u64,
    pub depth: u64,
    pub mlp_ratio: u64,
    pub patch: u64,
    pub in_chans: u64,
}

pub const DEIT_S: VitShape = VitShape {
    dim: 384,
    depth: 12,
    mlp_ratio: 4,
    patch: 16,
    in_chans: 3,
};

pub fn count_vit_flops(shape: VitShape, resolution: u64) -> u64 {
    let patches = (resolution / shape.patch).pow(2);
    let l = patches + 1;
    let d = shape.dim;
    let embed = patches * shape.patch * shape.patch * shape.in_chans * d;
    let per_block = l * d * 3 * d // qkv
        + 2 * l * l * d // scores and weighted sum
        + l * d * d // projection
        + 2 * l * d * shape.mlp_ratio * d; // mlp
    embed + shape.depth * per_block + d * REPORT_CLASSES
}
