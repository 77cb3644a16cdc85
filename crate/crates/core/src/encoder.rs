//! Full encoder: patch embedding, position embedding, alternating blocks,
//! final norm and head, in dense, masked and per-channel modes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::block::{
    block_forward, block_forward_seq, BlockFlags, BlockOptions, BlockParams, BlockTrace,
    PooledAxis, ScanKind, SkipPlacement,
};
use crate::channel_tokens::{
    block_forward_channel, hcs_sample, ChannelSchedule, ChannelTokenGrid, ScanPath,
};
use crate::error::{shape_err, Error, Result};
use crate::fvt1::Tensor;
use crate::linalg::{affine, rms_norm_rows, Matrix};
use crate::masked_grid::{block_forward_masked, random_mask, MaskSpec, MaskedDivisor, MaskedTokenSet};
use crate::pooling::{GroupLayout, PoolKind};
use crate::selective_scan::{DiscretizeMode, DEFAULT_STATE_COUNT};
use crate::tensor_grid::{transpose_grid, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Tiny,
    Small,
    Base,
    Large,
    Huge,
}

impl Preset {
    /// `(layers, embedding dim)`.
    pub fn shape(self) -> (usize, usize) {
        match self {
            Preset::Tiny => (24, 192),
            Preset::Small => (24, 384),
            Preset::Base => (24, 768),
            Preset::Large => (48, 1024),
            Preset::Huge => (64, 1280),
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            Preset::Tiny => "t",
            Preset::Small => "s",
            Preset::Base => "b",
            Preset::Large => "l",
            Preset::Huge => "h",
        }
    }

    fn from_suffix(s: &str) -> Option<Self> {
        Some(match s {
            "t" | "tiny" => Preset::Tiny,
            "s" | "small" => Preset::Small,
            "b" | "base" => Preset::Base,
            "l" | "large" => Preset::Large,
            "h" | "huge" => Preset::Huge,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Dense,
    Masked,
    Channel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassToken {
    #[default]
    None,
    Middle,
}

fn default_true() -> bool {
    true
}
fn default_patch() -> usize {
    16
}
fn default_state() -> usize {
    DEFAULT_STATE_COUNT
}
fn default_expand() -> usize {
    2
}
fn default_conv() -> usize {
    4
}
fn default_image() -> [usize; 2] {
    [224, 224]
}
fn default_chans() -> usize {
    3
}
fn default_ratio() -> f64 {
    0.75
}
fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default)]
    pub preset: Preset,
    /// Overrides the preset's layer count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    /// Overrides the preset's embedding dim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(rename = "P", default = "default_patch")]
    pub patch: usize,
    #[serde(rename = "N", default = "default_state")]
    pub state: usize,
    #[serde(rename = "E", default = "default_expand")]
    pub expand: usize,
    #[serde(rename = "k", default = "default_conv")]
    pub conv_width: usize,
    #[serde(default)]
    pub pooling: PoolKind,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub scan: ScanKind,
    #[serde(default = "default_true")]
    pub post_norm: bool,
    #[serde(default)]
    pub class_token: ClassToken,
    /// `false` runs the unpooled reference model with the same parameters.
    #[serde(default = "default_true")]
    pub pooled: bool,
    #[serde(default = "default_true")]
    pub alternate: bool,
    #[serde(default)]
    pub discretize: DiscretizeMode,
    #[serde(default)]
    pub skip_placement: SkipPlacement,
    #[serde(default)]
    pub fused_repeat_skip: bool,
    /// `[H, W]` in pixels.
    #[serde(default = "default_image")]
    pub image_size: [usize; 2],
    #[serde(default = "default_chans")]
    pub in_chans: usize,
    #[serde(default)]
    pub num_classes: usize,
    #[serde(default = "default_ratio")]
    pub mask_ratio: f64,
    #[serde(default)]
    pub mask_seed: u64,
    #[serde(default = "default_scale")]
    pub mask_scale: f64,
    #[serde(default)]
    pub masked_divisor: MaskedDivisor,
    #[serde(default)]
    pub channel_path: ScanPath,
    #[serde(default)]
    pub channel_schedule: ChannelSchedule,
    /// Sample a sorted channel subset with this seed (channel variant).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hcs_seed: Option<u64>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl EncoderConfig {
    pub fn preset(preset: Preset) -> Self {
        Self {
            preset,
            ..Self::default()
        }
    }

    /// Parses model names such as `fastvim-t` or `vim-s`.
    pub fn from_model_name(name: &str) -> Result<Self> {
        let (family, size) = name
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("model name `{name}` is not <family>-<size>")))?;
        let preset = Preset::from_suffix(size)
            .ok_or_else(|| Error::Config(format!("unknown model size `{size}`")))?;
        let pooled = match family {
            "fastvim" => true,
            "vim" => false,
            _ => return Err(Error::Config(format!("unknown model family `{family}`"))),
        };
        Ok(Self {
            preset,
            pooled,
            ..Self::default()
        })
    }

    pub fn model_name(&self) -> String {
        let family = if self.pooled { "fastvim" } else { "vim" };
        format!("{family}-{}", self.preset.suffix())
    }

    pub fn depth(&self) -> usize {
        self.depth.unwrap_or(self.preset.shape().0)
    }

    pub fn dim(&self) -> usize {
        self.dim.unwrap_or(self.preset.shape().1)
    }

    /// Token grid `(h, w)` for the configured image size.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_size[0] / self.patch, self.image_size[1] / self.patch)
    }

    pub fn with_resolution(mut self, res: usize) -> Self {
        self.image_size = [res, res];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} is not divisible by patch size {}",
                self.patch
            )));
        }
        if self.dim() == 0 || self.state == 0 || self.expand == 0 || self.conv_width == 0 || self.in_chans == 0 {
            return Err(Error::Config("dims, N, E, k and channels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask ratio {} outside [0, 1)", self.mask_ratio)));
        }
        if self.class_token == ClassToken::Middle && self.variant != Variant::Dense {
            return Err(Error::Config("class token is only supported by the dense variant".into()));
        }
        Ok(())
    }

    pub fn block_options(&self) -> BlockOptions {
        BlockOptions {
            pooled: self.pooled,
            alternate: self.alternate,
            scan: self.scan,
            discretize: self.discretize,
            repeat_scale: if self.variant == Variant::Masked {
                self.mask_scale
            } else {
                1.0
            },
        }
    }

    fn block_flags(&self) -> BlockFlags {
        BlockFlags {
            use_post_norm: self.post_norm,
            skip_placement: self.skip_placement,
            fused_repeat_skip: self.fused_repeat_skip,
        }
    }

    /// Width of one flattened patch fed to the embedding.
    fn patch_len(&self) -> usize {
        match self.variant {
            Variant::Channel => self.patch * self.patch,
            _ => self.patch * self.patch * self.in_chans,
        }
    }
}

/// `batch x channels x height x width` image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * channels * height * width {
            return shape_err("image data does not match its dims");
        }
        Ok(Self {
            batch,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape[..] {
            [b, c, h, w] => Self::new(b, c, h, w, t.data.clone()),
            [c, h, w] => Self::new(1, c, h, w, t.data.clone()),
            _ => shape_err(format!("image tensor must be [B, C, H, W], got {:?}", t.shape)),
        }
    }

    pub fn random(batch: usize, channels: usize, height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let data = (0..batch * channels * height * width)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Self {
            batch,
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((b * self.channels + c) * self.height + y) * self.width + x]
    }

    /// Patch `(i, j)` flattened in `(row, col, channel)` order.
    pub fn patch(&self, b: usize, i: usize, j: usize, p: usize, out: &mut Vec<f64>) {
        for py in 0..p {
            for px in 0..p {
                for c in 0..self.channels {
                    out.push(self.get(b, c, i * p + py, j * p + px));
                }
            }
        }
    }

    /// Single-channel patch `(i, j)` of channel `c`, row-major.
    pub fn channel_patch(&self, b: usize, c: usize, i: usize, j: usize, p: usize, out: &mut Vec<f64>) {
        for py in 0..p {
            for px in 0..p {
                out.push(self.get(b, c, i * p + py, j * p + px));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `patch_len x dim`.
    pub patch_w: Matrix,
    pub patch_b: Vec<f64>,
    /// `h·w x dim`, shared by every channel in the channel variant.
    pub pos_embed: Matrix,
    pub cls_token: Option<Vec<f64>>,
    /// `in_chans x dim`, channel variant only.
    pub channel_embed: Option<Matrix>,
    pub blocks: Vec<BlockParams>,
    pub final_norm: Vec<f64>,
    pub head: Option<(Matrix, Vec<f64>)>,
}

impl EncoderParams {
    /// Seeded random initialization; normal(0, 0.02) embeddings.
    pub fn random(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).unwrap();
        let dim = config.dim();
        let (h, w) = config.grid();
        let mat = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
        };
        let patch_w = mat(config.patch_len(), dim, &mut rng);
        let patch_b = vec![0.0; dim];
        let pos_embed = mat(h * w, dim, &mut rng);
        let cls_token = (config.class_token == ClassToken::Middle).then(|| mat(1, dim, &mut rng).data);
        let channel_embed = (config.variant == Variant::Channel).then(|| mat(config.in_chans, dim, &mut rng));
        let flags = config.block_flags();
        let blocks = (0..config.depth())
            .map(|i| {
                let mut b = BlockParams::random(
                    i,
                    dim,
                    config.expand,
                    config.state,
                    config.conv_width,
                    config.pooling,
                    &mut rng,
                );
                b.flags = flags;
                b
            })
            .collect();
        let head = (config.num_classes > 0).then(|| (mat(dim, config.num_classes, &mut rng), vec![0.0; config.num_classes]));
        Ok(Self {
            patch_w,
            patch_b,
            pos_embed,
            cls_token,
            channel_embed,
            blocks,
            final_norm: vec![1.0; dim],
            head,
        })
    }

    /// Visits every parameter tensor with its manifest name and shape.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, Vec<usize>, &mut Vec<f64>)) {
        fn mat(f: &mut dyn FnMut(&str, Vec<usize>, &mut Vec<f64>), name: &str, m: &mut Matrix) {
            f(name, vec![m.rows, m.cols], &mut m.data);
        }
        fn vec1(f: &mut dyn FnMut(&str, Vec<usize>, &mut Vec<f64>), name: &str, v: &mut Vec<f64>) {
            let n = v.len();
            f(name, vec![n], v);
        }
        mat(f, "patch_embed.weight", &mut self.patch_w);
        vec1(f, "patch_embed.bias", &mut self.patch_b);
        mat(f, "pos_embed", &mut self.pos_embed);
        if let Some(cls) = &mut self.cls_token {
            vec1(f, "cls_token", cls);
        }
        if let Some(ce) = &mut self.channel_embed {
            mat(f, "channel_embed", ce);
        }
        for b in &mut self.blocks {
            let prefix = format!("blocks.{}", b.block_index);
            vec1(f, &format!("{prefix}.input_norm"), &mut b.input_norm);
            mat(f, &format!("{prefix}.w_expand"), &mut b.w_expand);
            for (tag, d) in [("fwd", &mut b.forward), ("bwd", &mut b.backward)] {
                let p = format!("{prefix}.{tag}");
                mat(f, &format!("{p}.conv_taps"), &mut d.conv_taps);
                vec1(f, &format!("{p}.conv_bias"), &mut d.conv_bias);
                mat(f, &format!("{p}.a_log"), &mut d.ssm.a_log);
                vec1(f, &format!("{p}.d_skip"), &mut d.ssm.d_skip);
                vec1(f, &format!("{p}.dt_bias"), &mut d.ssm.dt_bias);
                mat(f, &format!("{p}.w_b"), &mut d.ssm.w_b);
                if let Some(bb) = &mut d.ssm.b_bias {
                    vec1(f, &format!("{p}.b_bias"), bb);
                }
                mat(f, &format!("{p}.w_c"), &mut d.ssm.w_c);
                mat(f, &format!("{p}.w_dt"), &mut d.ssm.w_dt);
                vec1(f, &format!("{p}.post_norm.gamma"), &mut d.post_norm_gamma);
                vec1(f, &format!("{p}.post_norm.beta"), &mut d.post_norm_beta);
                if let Some(s) = &mut d.pool_score {
                    vec1(f, &format!("{p}.pool_score"), s);
                }
            }
            mat(f, &format!("{prefix}.w_out"), &mut b.w_out);
        }
        vec1(f, "final_norm", &mut self.final_norm);
        if let Some((w, b)) = &mut self.head {
            mat(f, "head.weight", w);
            vec1(f, "head.bias", b);
        }
    }

    /// Writes one FVT1 file per parameter plus `manifest.json`.
    pub fn save(&self, dir: &Path, config: &EncoderConfig) -> Result<()> {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut entries = Vec::new();
        let mut err = None;
        let mut copy = self.clone();
        copy.visit_mut(&mut |name, shape, data| {
            if err.is_some() {
                return;
            }
            let file = format!("{name}.fvt");
            let res = Tensor::new(shape.clone(), data.clone()).and_then(|t| t.write(&dir.join(&file)));
            match res {
                Ok(()) => entries.push(ManifestEntry {
                    name: name.to_string(),
                    file,
                    shape,
                }),
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let manifest = Manifest {
            config: config.clone(),
            parameters: entries,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|source| Error::Io { path, source })
    }

    /// Loads a weights directory. The manifest must name every parameter the
    /// config implies, with matching shapes.
    pub fn load(dir: &Path) -> Result<(EncoderConfig, Self)> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|source| Error::Io { path, source })?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("unreadable manifest: {e}")))?;
        manifest.config.validate()?;
        let mut params = Self::random(&manifest.config, 0)?;
        let by_name: BTreeMap<&str, &ManifestEntry> =
            manifest.parameters.iter().map(|e| (e.name.as_str(), e)).collect();
        let mut expected = 0;
        let mut err = None;
        params.visit_mut(&mut |name, shape, data| {
            if err.is_some() {
                return;
            }
            expected += 1;
            let Some(entry) = by_name.get(name) else {
                err = Some(Error::Manifest(format!("missing parameter `{name}`")));
                return;
            };
            if entry.shape != shape {
                err = Some(Error::Manifest(format!(
                    "`{name}` has shape {:?}, config expects {shape:?}",
                    entry.shape
                )));
                return;
            }
            match Tensor::read(&dir.join(&entry.file)) {
                Ok(t) if t.shape == shape => *data = t.data,
                Ok(t) => {
                    err = Some(Error::Manifest(format!(
                        "`{name}` file holds shape {:?}, expected {shape:?}",
                        t.shape
                    )))
                }
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if expected != manifest.parameters.len() {
            return Err(Error::Manifest(format!(
                "manifest lists {} parameters, config implies {expected}",
                manifest.parameters.len()
            )));
        }
        Ok((manifest.config, params))
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub config: EncoderConfig,
    pub parameters: Vec<ManifestEntry>,
}

fn check_image(image: &Image, config: &EncoderConfig) -> Result<()> {
    let p = config.patch;
    if image.height % p != 0 || image.width % p != 0 {
        return shape_err(format!(
            "image {}x{} is not divisible by patch size {p}",
            image.height, image.width
        ));
    }
    if [image.height, image.width] != config.image_size || image.channels != config.in_chans {
        return shape_err(format!(
            "image {}x{}x{} does not match config {:?}x{}",
            image.channels, image.height, image.width, config.image_size, config.in_chans
        ));
    }
    Ok(())
}

/// Projects each `P x P x C` patch to a token and adds its position
/// embedding.
pub fn patch_embed(image: &Image, config: &EncoderConfig, params: &EncoderParams) -> Result<TokenGrid> {
    check_image(image, config)?;
    let p = config.patch;
    let (h, w) = (image.height / p, image.width / p);
    let mut patches = Vec::with_capacity(image.batch * h * w * p * p * image.channels);
    for b in 0..image.batch {
        for i in 0..h {
            for j in 0..w {
                image.patch(b, i, j, p, &mut patches);
            }
        }
    }
    let mut tokens = affine(&patches, image.batch * h * w, &params.patch_w, Some(&params.patch_b));
    let dim = params.patch_w.cols;
    for (k, tok) in tokens.chunks_exact_mut(dim).enumerate() {
        tok.iter_mut()
            .zip(params.pos_embed.row(k % (h * w)))
            .for_each(|(t, e)| *t += e);
    }
    TokenGrid::new(image.batch, h, w, dim, tokens)
}

/// Per-channel tokenization with shared spatial position embeddings plus a
/// per-channel embedding.
pub fn channel_patch_embed(
    image: &Image,
    config: &EncoderConfig,
    params: &EncoderParams,
    channel_ids: &[usize],
) -> Result<ChannelTokenGrid> {
    check_image(image, config)?;
    let p = config.patch;
    let (h, w) = (image.height / p, image.width / p);
    let c = channel_ids.len();
    let mut patches = Vec::with_capacity(image.batch * h * w * c * p * p);
    for b in 0..image.batch {
        for i in 0..h {
            for j in 0..w {
                for &id in channel_ids {
                    image.channel_patch(b, id, i, j, p, &mut patches);
                }
            }
        }
    }
    let dim = params.patch_w.cols;
    let mut tokens = affine(&patches, image.batch * h * w * c, &params.patch_w, Some(&params.patch_b));
    for (k, tok) in tokens.chunks_exact_mut(dim).enumerate() {
        let site = (k / c) % (h * w);
        tok.iter_mut()
            .zip(params.pos_embed.row(site))
            .for_each(|(t, e)| *t += e);
    }
    let mut grid = ChannelTokenGrid::new(image.batch, h, w, c, dim, tokens, channel_ids.to_vec())?;
    let embed = params
        .channel_embed
        .as_ref()
        .ok_or_else(|| Error::Config("channel variant needs channel embeddings".into()))?;
    grid.add_channel_embedding(embed)?;
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderTrace {
    pub model: String,
    pub variant: Variant,
    pub blocks: Vec<BlockTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `batch x dim`.
    pub features: Vec<f64>,
    pub dim: usize,
    pub logits: Option<Vec<f64>>,
    pub trace: EncoderTrace,
}

/// Input to [`encoder_forward`]: the masked variant may carry an explicit
/// mask; otherwise one is drawn from the config's ratio and seed.
#[derive(Debug, Clone, Copy)]
pub struct ForwardInput<'a> {
    pub image: &'a Image,
    pub mask: Option<&'a MaskSpec>,
}

impl<'a> From<&'a Image> for ForwardInput<'a> {
    fn from(image: &'a Image) -> Self {
        Self { image, mask: None }
    }
}

/// Mean of final-normed tokens per batch element.
fn norm_mean(tokens: &[f64], batch: usize, dim: usize, norm: &[f64]) -> Vec<f64> {
    let mut t = tokens.to_vec();
    rms_norm_rows(&mut t, norm);
    let n = t.len() / (batch * dim);
    let mut out = vec![0.0; batch * dim];
    for b in 0..batch {
        let acc = &mut out[b * dim..(b + 1) * dim];
        for tok in t[b * n * dim..(b + 1) * n * dim].chunks_exact(dim) {
            acc.iter_mut().zip(tok).for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    out
}

/// Dense block with a class token held at the middle of the working
/// sequence. The class token forms its own pooling group.
fn block_forward_cls(
    g: &TokenGrid,
    cls: &[f64],
    params: &BlockParams,
    opts: &BlockOptions,
) -> Result<(TokenGrid, Vec<f64>, BlockTrace)> {
    let dim = g.dim();
    let transposed = params.transposes(opts);
    let work = if transposed { transpose_grid(g) } else { g.clone() };
    let (h, w) = (work.rows(), work.cols());
    let n = h * w;
    let mid = n / 2;
    let mut seq = Vec::with_capacity(g.batch() * (n + 1) * dim);
    for b in 0..g.batch() {
        let s = work.batch_slice(b);
        seq.extend_from_slice(&s[..mid * dim]);
        seq.extend_from_slice(&cls[b * dim..(b + 1) * dim]);
        seq.extend_from_slice(&s[mid * dim..]);
    }
    let layout = if opts.pooled {
        let keys: Vec<usize> = (0..=n)
            .map(|t| match t.cmp(&mid) {
                std::cmp::Ordering::Less => t / w,
                std::cmp::Ordering::Equal => usize::MAX,
                std::cmp::Ordering::Greater => (t - 1) / w,
            })
            .collect();
        GroupLayout::from_keys(&keys, |k, _| if k == usize::MAX { 1.0 } else { w as f64 })
    } else {
        GroupLayout::singletons(n + 1)
    };
    let (out, branch) = block_forward_seq(&seq, g.batch(), &layout, params, opts)?;
    let mut grid_vals = Vec::with_capacity(g.values().len());
    let mut cls_out = Vec::with_capacity(cls.len());
    for b in 0..g.batch() {
        let s = &out[b * (n + 1) * dim..(b + 1) * (n + 1) * dim];
        grid_vals.extend_from_slice(&s[..mid * dim]);
        cls_out.extend_from_slice(&s[mid * dim..(mid + 1) * dim]);
        grid_vals.extend_from_slice(&s[(mid + 1) * dim..]);
    }
    let mut grid = TokenGrid::new(g.batch(), h, w, dim, grid_vals)?.with_orientation(work.orientation());
    if transposed {
        grid = transpose_grid(&grid);
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
    Ok((grid, cls_out, trace))
}

/// Runs the whole encoder. Features are the mean of final-normed tokens,
/// or the final-normed class token when one is configured.
pub fn encoder_forward<'a>(
    input: impl Into<ForwardInput<'a>>,
    config: &EncoderConfig,
    params: &EncoderParams,
) -> Result<EncoderOutput> {
    let input = input.into();
    config.validate()?;
    let image = input.image;
    let opts = config.block_options();
    let dim = config.dim();
    let batch = image.batch;
    let mut traces = Vec::with_capacity(params.blocks.len());
    let features = match config.variant {
        Variant::Dense => {
            let mut g = patch_embed(image, config, params)?;
            match &params.cls_token {
                None => {
                    for bp in &params.blocks {
                        let (next, trace) = block_forward(&g, bp, &opts)?;
                        g = next;
                        traces.push(trace);
                    }
                    norm_mean(g.values(), batch, dim, &params.final_norm)
                }
                Some(token) => {
                    let mut cls: Vec<f64> = (0..batch).flat_map(|_| token.iter().copied()).collect();
                    for bp in &params.blocks {
                        let (next, next_cls, trace) = block_forward_cls(&g, &cls, bp, &opts)?;
                        g = next;
                        cls = next_cls;
                        traces.push(trace);
                    }
                    rms_norm_rows(&mut cls, &params.final_norm);
                    cls
                }
            }
        }
        Variant::Masked => {
            let g = patch_embed(image, config, params)?;
            let mut m = match input.mask {
                Some(spec) => MaskedTokenSet::from_spec(spec, &g)?,
                None => random_mask(&g, config.mask_ratio, config.mask_seed)?,
            };
            for bp in &params.blocks {
                let (next, trace) = block_forward_masked(&m, bp, &opts, config.masked_divisor)?;
                m = next;
                traces.push(trace);
            }
            norm_mean(&m.values, batch, dim, &params.final_norm)
        }
        Variant::Channel => {
            let ids: Vec<usize> = match config.hcs_seed {
                Some(seed) => hcs_sample(config.in_chans, seed),
                None => (0..config.in_chans).collect(),
            };
            let mut g = channel_patch_embed(image, config, params, &ids)?;
            for bp in &params.blocks {
                let (next, trace) =
                    block_forward_channel(&g, bp, &opts, config.channel_path, config.channel_schedule)?;
                g = next;
                traces.push(trace);
            }
            norm_mean(&g.values, batch, dim, &params.final_norm)
        }
    };
    let logits = params
        .head
        .as_ref()
        .map(|(w, b)| affine(&features, batch, w, Some(b)));
    Ok(EncoderOutput {
        features,
        dim,
        logits,
        trace: EncoderTrace {
            model: config.model_name(),
            variant: config.variant,
            blocks: traces,
        },
    })
}
