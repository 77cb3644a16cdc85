//! FLOP tables across models and resolutions.

use std::io::Write;

use fastscan_core::encoder::EncoderConfig;
use fastscan_core::flops::{count_flops, reduction, FlopReport};

use crate::failure::CmdResult;
use crate::models::check_resolutions;

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FlopRow {
    pub resolution: usize,
    pub model: String,
    pub component: String,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FlopTotal {
    pub resolution: usize,
    pub model: String,
    pub flops: u64,
    pub gflops: f64,
}

/// Fraction of the unpooled model's FLOPs saved by its pooled counterpart.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FlopReduction {
    pub resolution: usize,
    pub baseline: String,
    pub pooled: String,
    pub reduction: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FlopTable {
    pub rows: Vec<FlopRow>,
    pub totals: Vec<FlopTotal>,
    pub reductions: Vec<FlopReduction>,
}

pub fn flop_table(models: &[EncoderConfig], resolutions: &[usize]) -> CmdResult<FlopTable> {
    let patch = models.first().map_or(16, |m| m.patch);
    check_resolutions(resolutions, patch)?;
    let mut rows = Vec::new();
    let mut totals = Vec::new();
    let mut reductions = Vec::new();
    for &res in resolutions {
        let reports: Vec<FlopReport> = models
            .iter()
            .map(|m| count_flops(m, res))
            .collect::<Result<_, _>>()?;
        for r in &reports {
            for (c, v) in &r.components {
                rows.push(FlopRow {
                    resolution: res,
                    model: r.model.clone(),
                    component: c.name().to_string(),
                    flops: *v,
                });
            }
            rows.push(FlopRow {
                resolution: res,
                model: r.model.clone(),
                component: "total".to_string(),
                flops: r.total,
            });
            totals.push(FlopTotal {
                resolution: res,
                model: r.model.clone(),
                flops: r.total,
                gflops: r.gflops(),
            });
        }
        for (m, fast) in models.iter().zip(&reports) {
            if !m.pooled {
                continue;
            }
            let base_cfg = EncoderConfig {
                pooled: false,
                ..m.clone()
            };
            if let Some(base) = models.iter().zip(&reports).find(|(b, _)| **b == base_cfg).map(|(_, r)| r) {
                reductions.push(FlopReduction {
                    resolution: res,
                    baseline: base.model.clone(),
                    pooled: fast.model.clone(),
                    reduction: reduction(base, fast),
                });
            }
        }
    }
    Ok(FlopTable {
        rows,
        totals,
        reductions,
    })
}

/// CSV with columns `resolution,model,component,flops`; one `total` row
/// per model and resolution.
pub fn write_csv(table: &FlopTable, out: impl Write) -> CmdResult<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in &table.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_json(table: &FlopTable) -> String {
    serde_json::to_string_pretty(table).expect("flop table serializes")
}
