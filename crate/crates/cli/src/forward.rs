//! Encoder forward pass over FVT1 inputs, and weight directory dumps.

use std::path::{Path, PathBuf};

use fastscan_core::encoder::{encoder_forward, EncoderConfig, EncoderParams, EncoderTrace, ForwardInput, Image, Variant};
use fastscan_core::fvt1::Tensor;
use fastscan_core::masked_grid::MaskSpec;

use crate::failure::{CmdResult, Failure};

#[derive(Debug, Clone, Default)]
pub struct ForwardArgs {
    /// Weights directory with `manifest.json`.
    pub weights: Option<PathBuf>,
    /// Seed for random initialization when no weights are given.
    pub seed: u64,
    pub input: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub variant: Option<Variant>,
    pub ratio: Option<f64>,
    pub no_alternate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutcome {
    /// `[batch, dim]`.
    pub features: Tensor,
    pub trace: EncoderTrace,
}

pub fn read_config(path: &Path) -> CmdResult<EncoderConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::io(format!("cannot read {}: {e}", path.display())))?;
    let config: EncoderConfig = serde_json::from_str(&text).map_err(|e| {
        let f = Failure::from(fastscan_core::Error::from(e));
        Failure {
            message: format!("{}: {}", path.display(), f.message),
            ..f
        }
    })?;
    config.validate()?;
    Ok(config)
}

fn apply_overrides(mut config: EncoderConfig, args: &ForwardArgs) -> CmdResult<EncoderConfig> {
    if let Some(v) = args.variant {
        config.variant = v;
    }
    if let Some(r) = args.ratio {
        config.mask_ratio = r;
    }
    if args.no_alternate {
        config.alternate = false;
    }
    config.validate()?;
    Ok(config)
}

pub fn run_forward(args: &ForwardArgs) -> CmdResult<ForwardOutcome> {
    let (config, params) = match &args.weights {
        Some(dir) => {
            let (manifest_config, params) = EncoderParams::load(dir)?;
            let base = match &args.config {
                Some(p) => read_config(p)?,
                None => manifest_config,
            };
            (apply_overrides(base, args)?, params)
        }
        None => {
            let base = match &args.config {
                Some(p) => read_config(p)?,
                None => EncoderConfig::default(),
            };
            let config = apply_overrides(base, args)?;
            let params = EncoderParams::random(&config, args.seed)?;
            (config, params)
        }
    };
    let image = match &args.input {
        Some(p) => Image::from_tensor(&Tensor::read(p)?)?,
        None => Image::random(1, config.in_chans, config.image_size[0], config.image_size[1], args.seed),
    };
    let mask: Option<MaskSpec> = match &args.mask {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::io(format!("cannot read {}: {e}", p.display())))?;
            Some(serde_json::from_str(&text).map_err(fastscan_core::Error::from)?)
        }
        None => None,
    };
    let out = encoder_forward(
        ForwardInput {
            image: &image,
            mask: mask.as_ref(),
        },
        &config,
        &params,
    )?;
    let features = Tensor::new(vec![image.batch, out.dim], out.features)?;
    Ok(ForwardOutcome {
        features,
        trace: out.trace,
    })
}

/// Writes a seeded random initialization as a weights directory.
pub fn init_weights(config: &EncoderConfig, seed: u64, dir: &Path) -> CmdResult<()> {
    let params = EncoderParams::random(config, seed)?;
    params.save(dir, config)?;
    Ok(())
}
