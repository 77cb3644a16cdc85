//! Wall-clock timing of one block's components for pooled and unpooled
//! models across resolutions.

use std::hint::black_box;
use std::io::Write;
use std::time::Instant;

use fastscan_core::block::{
    add_skip, block_forward, conv_silu, grid_layout, scan_pooled, BlockParams, SkipPlacement,
};
use fastscan_core::encoder::EncoderConfig;
use fastscan_core::pooling::PoolMode;
use fastscan_core::selective_scan::{parallel_depth, project_rows};
use fastscan_core::TokenGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::failure::{CmdResult, Failure};
use crate::models::check_resolutions;

pub const MIN_WARMUPS: usize = 3;
pub const MIN_REPEATS: usize = 5;
pub const DEFAULT_WARMUPS: usize = 5;
pub const DEFAULT_REPEATS: usize = 9;

pub const COMPONENTS: [&str; 7] = ["scan", "projection", "pool", "repeat", "skip", "conv", "block_total"];

#[derive(Debug, Clone)]
pub struct BenchSettings {
    pub resolutions: Vec<usize>,
    pub warmups: usize,
    pub repeats: usize,
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            resolutions: vec![224, 448, 896],
            warmups: DEFAULT_WARMUPS,
            repeats: DEFAULT_REPEATS,
            threads: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BenchRecord {
    pub model: String,
    pub resolution: usize,
    pub component: String,
    pub median_ns: u64,
    #[serde(skip)]
    pub min_ns: u64,
    #[serde(skip)]
    pub max_ns: u64,
    pub depth: usize,
    pub pooled_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timing {
    pub median_ns: u64,
    pub min_ns: u64,
    pub max_ns: u64,
}

impl Timing {
    const ZERO: Timing = Timing {
        median_ns: 0,
        min_ns: 0,
        max_ns: 0,
    };
}

/// Runs `f` `warmups` times untimed, then `repeats` times timed.
pub fn time_it(warmups: usize, repeats: usize, mut f: impl FnMut()) -> Timing {
    for _ in 0..warmups {
        f();
    }
    let mut samples: Vec<u64> = (0..repeats)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_nanos() as u64
        })
        .collect();
    samples.sort_unstable();
    let n = samples.len();
    let median_ns = if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2
    };
    Timing {
        median_ns,
        min_ns: samples[0],
        max_ns: samples[n - 1],
    }
}

fn bench_model(config: &EncoderConfig, res: usize, s: &BenchSettings) -> CmdResult<Vec<BenchRecord>> {
    let config = config.clone().with_resolution(res);
    config.validate()?;
    let (h, w) = config.grid();
    let (dim, n) = (config.dim(), h * w);
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let params = BlockParams::random(0, dim, config.expand, config.state, config.conv_width, config.pooling, &mut rng);
    let ch = params.channels();
    let opts = config.block_options();
    let grid = TokenGrid::new(1, h, w, dim, (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let x: Vec<f64> = (0..n * ch).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p = &params.forward;
    let layout = grid_layout(h, w, config.pooled);
    let mode = PoolMode::Mean;

    let act = conv_silu(&x, n, p);
    let pooled = if config.pooled { layout.pool(&act, ch, &mode)? } else { act.clone() };
    let steps = layout.groups();
    let proj = project_rows(&pooled, steps, &p.ssm)?;
    let (y, _) = scan_pooled(&pooled, &proj, &p.ssm, SkipPlacement::BeforeSkip, &opts);
    let mut out = layout.repeat(&y, ch, 1.0)?;

    let (wu, rep) = (s.warmups, s.repeats);
    let conv = time_it(wu, rep, || {
        black_box(conv_silu(black_box(&x), n, p));
    });
    let (pool, repeat) = if config.pooled {
        let pool = time_it(wu, rep, || {
            black_box(layout.pool(black_box(&act), ch, &mode).expect("pool"));
        });
        let repeat = time_it(wu, rep, || {
            black_box(layout.repeat(black_box(&y), ch, 1.0).expect("repeat"));
        });
        (pool, repeat)
    } else {
        (Timing::ZERO, Timing::ZERO)
    };
    let projection = time_it(wu, rep, || {
        black_box(project_rows(black_box(&pooled), steps, &p.ssm).expect("projection"));
    });
    let scan = time_it(wu, rep, || {
        black_box(scan_pooled(black_box(&pooled), &proj, &p.ssm, SkipPlacement::BeforeSkip, &opts));
    });
    let skip = time_it(wu, rep, || {
        add_skip(black_box(&mut out), &act, &p.ssm.d_skip);
    });
    let mut block_err = None;
    let block_total = time_it(wu, rep, || match block_forward(black_box(&grid), &params, &opts) {
        Ok(r) => {
            black_box(r);
        }
        Err(e) => block_err = Some(e),
    });
    if let Some(e) = block_err {
        return Err(e.into());
    }

    let depth = parallel_depth(steps);
    let model = config.model_name();
    let timings = [scan, projection, pool, repeat, skip, conv, block_total];
    Ok(COMPONENTS
        .iter()
        .zip(timings)
        .map(|(c, t)| BenchRecord {
            model: model.clone(),
            resolution: res,
            component: c.to_string(),
            median_ns: t.median_ns,
            min_ns: t.min_ns,
            max_ns: t.max_ns,
            depth,
            pooled_len: steps,
        })
        .collect())
}

/// Times every component for every model and resolution on a dedicated
/// pool of `settings.threads` threads.
pub fn run_bench(models: &[EncoderConfig], settings: &BenchSettings) -> CmdResult<Vec<BenchRecord>> {
    if settings.warmups < MIN_WARMUPS || settings.repeats < MIN_REPEATS {
        return Err(Failure::config(format!(
            "need at least {MIN_WARMUPS} warmups and {MIN_REPEATS} repeats, got {} and {}",
            settings.warmups, settings.repeats
        )));
    }
    if settings.threads == 0 {
        return Err(Failure::config("thread count must be positive"));
    }
    let patch = models.first().map_or(16, |m| m.patch);
    check_resolutions(&settings.resolutions, patch)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.threads)
        .build()
        .map_err(|e| Failure::config(format!("cannot build thread pool: {e}")))?;
    pool.install(|| {
        let mut records = Vec::new();
        for m in models {
            for &res in &settings.resolutions {
                records.extend(bench_model(m, res, settings)?);
            }
        }
        Ok(records)
    })
}

/// CSV columns: `model,resolution,component,median_ns,depth,pooled_len`.
pub fn write_csv(records: &[BenchRecord], out: impl Write) -> CmdResult<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Median of `component` for `model` at `resolution`.
pub fn median_of(records: &[BenchRecord], model: &str, resolution: usize, component: &str) -> Option<u64> {
    records
        .iter()
        .find(|r| r.model == model && r.resolution == resolution && r.component == component)
        .map(|r| r.median_ns)
}
