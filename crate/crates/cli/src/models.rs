//! Model-list and resolution parsing shared by `flops` and `bench`.

use fastscan_core::encoder::EncoderConfig;

use crate::failure::{CmdResult, Failure};

/// Parses model names, rejecting an empty list.
pub fn parse_models(names: &[String]) -> CmdResult<Vec<EncoderConfig>> {
    let names: Vec<&str> = names.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect();
    if names.is_empty() {
        return Err(Failure::config("no models given (expected e.g. --models vim-t,fastvim-t)"));
    }
    names
        .iter()
        .map(|n| EncoderConfig::from_model_name(n).map_err(Failure::from))
        .collect()
}

pub fn check_resolutions(resolutions: &[usize], patch: usize) -> CmdResult<()> {
    if resolutions.is_empty() {
        return Err(Failure::config("no resolutions given"));
    }
    if let Some(r) = resolutions.iter().find(|&&r| r == 0 || r % patch != 0) {
        return Err(Failure::config(format!("resolution {r} is not divisible by patch size {patch}")));
    }
    Ok(())
}
