//! Acceptance criteria, run in order with one PASS/FAIL line each.
//! Runs without the libtest harness so the timing criterion has the
//! machine to itself.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::process::Command;
use std::time::{Duration, Instant};

use common::{max_abs_diff, random_lane, reference_block, rng, uniform_vec};
use fastscan_cli::bench::{median_of, run_bench, BenchSettings};
use fastscan_cli::gradcheck::run_gradcheck;
use fastscan_cli::models::parse_models;
use fastscan_core::block::{block_forward, BlockOptions, BlockParams, ScanKind};
use fastscan_core::channel_tokens::{hcs_sample_with, order_tokens, unorder_tokens, ChannelTokenGrid, ScanPath};
use fastscan_core::encoder::{encoder_forward, EncoderConfig, EncoderParams, Image, Preset, Variant};
use fastscan_core::flops::{count_flops, count_vit_flops, reduction, DEIT_S};
use fastscan_core::masked_grid::{
    masked_pool_width, masked_repeat_width, masked_transpose, random_mask, transfer_scale, MaskedDivisor,
};
use fastscan_core::pooling::PoolKind;
use fastscan_core::selective_scan::{parallel_depth, scan_parallel, scan_sequential, scan_vjp};
use fastscan_core::tensor_grid::raster_flatten;
use fastscan_core::TokenGrid;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn grid(seed: u64, b: usize, h: usize, w: usize, d: usize) -> TokenGrid {
    let mut r = rng(seed);
    TokenGrid::new(b, h, w, d, uniform_vec(&mut r, b * h * w * d, -1.0, 1.0)).unwrap()
}

fn scan_equivalence() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let len = r.random_range(1..=257);
        let lane = random_lane(&mut r, len, 16);
        worst = worst.max(max_abs_diff(&scan_sequential(&lane), &scan_parallel(&lane).0));
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-10 && elapsed < Duration::from_secs(30),
        format!("1000 lanes, max |par - seq| = {worst:.2e} (< 1e-10), {elapsed:.2?} (< 30 s)"),
    )
}

fn depth_halving() -> Outcome {
    let dim = 4;
    let p = BlockParams::random(0, dim, 2, 4, 4, PoolKind::Mean, &mut rng(2));
    let pooled = BlockOptions {
        scan: ScanKind::Parallel,
        ..Default::default()
    };
    let unpooled = BlockOptions {
        pooled: false,
        ..pooled
    };
    let mut ok = true;
    let mut pairs = Vec::new();
    for h in [8usize, 16, 32, 64] {
        let g = grid(h as u64, 1, h, h, dim);
        let fast = block_forward(&g, &p, &pooled).unwrap().1.depth;
        let vim = block_forward(&g, &p, &unpooled).unwrap().1.depth;
        ok &= 2 * fast == vim;
        pairs.push(format!("{h}:{fast}/{vim}"));
    }
    let config = EncoderConfig {
        depth: Some(1),
        dim: Some(8),
        scan: ScanKind::Parallel,
        ..EncoderConfig::preset(Preset::Tiny)
    };
    let params = EncoderParams::random(&config, 2).unwrap();
    let image = Image::random(1, 3, 224, 224, 2);
    let fast = encoder_forward(&image, &config, &params).unwrap().trace.blocks[0].depth;
    let vim_cfg = EncoderConfig { pooled: false, ..config };
    let vim = encoder_forward(&image, &vim_cfg, &params).unwrap().trace.blocks[0].depth;
    ok &= fast == 8 && vim == 16 && parallel_depth(14) == 8 && parallel_depth(196) == 16;
    outcome(ok, format!("h:pooled/unpooled {}; 224 grid {fast} vs {vim}", pairs.join(" ")))
}

fn unpooled_reduction() -> Outcome {
    let dim = 8;
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for draw in 0..100u64 {
        let h = r.random_range(1..24);
        // odd blocks transpose, so their width-one grids are 1 x h
        let index = (draw % 2) as usize;
        let g = if index == 0 { grid(draw, 1, h, 1, dim) } else { grid(draw, 1, 1, h, dim) };
        let p = BlockParams::random(index, dim, 2, 16, 4, PoolKind::Mean, &mut rng(500 + draw));
        let (out, _) = block_forward(&g, &p, &BlockOptions::default()).unwrap();
        let reference: Vec<f64> = raster_flatten(&g)
            .iter()
            .flat_map(|s| reference_block(s, g.tokens(), &p))
            .collect();
        worst = worst.max(max_abs_diff(out.values(), &reference));
    }
    outcome(worst < 1e-10, format!("100 draws, max deviation {worst:.2e} (< 1e-10)"))
}

fn flop_ratios() -> Outcome {
    let fast = EncoderConfig::preset(Preset::Tiny);
    let vim = EncoderConfig { pooled: false, ..fast.clone() };
    let deit = count_vit_flops(DEIT_S, 224) as f64 / 1e9;
    let f224 = count_flops(&fast, 224).unwrap();
    let v224 = count_flops(&vim, 224).unwrap();
    let r224 = reduction(&v224, &f224);
    let r2048 = reduction(&count_flops(&vim, 2048).unwrap(), &count_flops(&fast, 2048).unwrap());
    let ok = (deit - 4.6).abs() <= 0.46
        && (f224.gflops() - 1.17).abs() <= 0.117
        && (v224.gflops() - 1.8).abs() <= 0.18
        && (r224 - 0.35).abs() <= 0.03
        && (r2048 - 0.385).abs() <= 0.03;
    outcome(
        ok,
        format!(
            "DeiT-S {deit:.2} G, FastVim-T {:.3} G, Vim-T {:.3} G, reduction {:.1}% @224, {:.1}% @2048",
            f224.gflops(),
            v224.gflops(),
            100.0 * r224,
            100.0 * r2048
        ),
    )
}

fn scan_time_scaling() -> Outcome {
    let start = Instant::now();
    let models = parse_models(&["vim-t".into(), "fastvim-t".into()]).unwrap();
    let settings = BenchSettings {
        resolutions: vec![224, 448, 896],
        warmups: 3,
        repeats: 5,
        threads: 1,
        seed: 0,
    };
    let records = match run_bench(&models, &settings) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("bench failed: {e}")),
    };
    let m = |model: &str, res: usize, comp: &str| median_of(&records, model, res, comp).unwrap() as f64;
    let vim_ratio = m("vim-t", 896, "scan") / m("vim-t", 224, "scan");
    let fast_ratio = m("fastvim-t", 896, "scan") / m("fastvim-t", 224, "scan");
    let faster = [448, 896]
        .iter()
        .all(|&r| m("fastvim-t", r, "block_total") < m("vim-t", r, "block_total"));
    let elapsed = start.elapsed();
    outcome(
        vim_ratio >= 10.0 && fast_ratio <= 8.0 && faster && elapsed < Duration::from_secs(300),
        format!(
            "scan 896/224: unpooled {vim_ratio:.1}x (>= 10), pooled {fast_ratio:.1}x (<= 8); \
             pooled block faster at 448 and 896: {faster}; {elapsed:.1?} (< 5 min)"
        ),
    )
}

fn gradients() -> Outcome {
    let report = run_gradcheck(7);
    let worst = report
        .checks
        .iter()
        .filter(|c| c.name != "zero_upstream")
        .map(|c| c.max_rel_error)
        .fold(0.0, f64::max);
    let lane = random_lane(&mut rng(6), 40, 16);
    let g = scan_vjp(&lane, &[0.0; 40]);
    let zero = g.abar.iter().chain(&g.bx).chain(&g.c).chain(&g.x_raw).all(|v| *v == 0.0) && g.d_skip == 0.0;
    outcome(
        report.all_pass && zero,
        format!("max relative error {worst:.2e} (< 1e-5) over {} checks; zero upstream exact: {zero}", report.checks.len()),
    )
}

fn ulps(a: f64, b: f64) -> u64 {
    (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
}

fn masked_agreement() -> Outcome {
    let dense_cfg = EncoderConfig {
        depth: Some(4),
        dim: Some(16),
        ..EncoderConfig::preset(Preset::Tiny)
    };
    let masked_cfg = EncoderConfig {
        variant: Variant::Masked,
        mask_ratio: 0.0,
        mask_scale: 1.0,
        ..dense_cfg.clone()
    };
    let params = EncoderParams::random(&dense_cfg, 7).unwrap();
    let image = Image::random(1, 3, 224, 224, 7);
    let a = encoder_forward(&image, &dense_cfg, &params).unwrap().features;
    let b = encoder_forward(&image, &masked_cfg, &params).unwrap().features;
    let agree = max_abs_diff(&a, &b);

    // pooled·w against the row sum: exact for power-of-two widths; one
    // rounding of slack otherwise
    let mut exact16 = true;
    let mut worst14 = 0u64;
    for (w, seeds) in [(16usize, 0..100u64), (14, 100..200)] {
        for seed in seeds {
            let g = grid(seed, 1, w, w, 4);
            let m = random_mask(&g, 0.75, seed).unwrap();
            let pooled = masked_pool_width(&m, MaskedDivisor::ColumnCount);
            let mut k = 0;
            for (r, &row) in pooled.rows.iter().enumerate() {
                let mut sum = [0.0; 4];
                while k < m.len() && m.coords[k].0 == row {
                    sum.iter_mut().zip(m.token(0, k)).for_each(|(s, v)| *s += v);
                    k += 1;
                }
                for d in 0..4 {
                    let back = pooled.values[r * 4 + d] * w as f64;
                    if w == 16 {
                        exact16 &= back == sum[d];
                    } else {
                        worst14 = worst14.max(ulps(back, sum[d]));
                    }
                }
            }
        }
    }

    let g = grid(8, 1, 14, 14, 4);
    let m = random_mask(&g, 0.75, 8).unwrap();
    let pooled = masked_pool_width(&m, MaskedDivisor::ColumnCount);
    let scale = transfer_scale(0.75);
    let plain = masked_repeat_width(&pooled, &m, 1.0).unwrap();
    let scaled = masked_repeat_width(&pooled, &m, scale).unwrap();
    let scaled_ok = scale == 0.25 && plain.values.iter().zip(&scaled.values).all(|(p, s)| p * 0.25 == *s);

    outcome(
        agree <= 1e-10 && exact16 && worst14 <= 1 && scaled_ok,
        format!(
            "ratio 0 masked vs dense {agree:.2e} (<= 1e-10); pooled*w == row sum exactly at w=16: {exact16}, \
             within {worst14} ulp at w=14; scale at ratio 0.75 = {scale}"
        ),
    )
}

fn orderings() -> Outcome {
    let mut r = rng(9);
    let mut round_trip = true;
    for seed in 0..200u64 {
        let (h, w, c) = (r.random_range(1..8), r.random_range(1..8), r.random_range(1..6));
        let vals = uniform_vec(&mut r, 2 * h * w * c * 3, -1.0, 1.0);
        let g = ChannelTokenGrid::new(2, h, w, c, 3, vals, (0..c).collect()).unwrap();
        for path in [ScanPath::ChannelFirst, ScanPath::SpatialFirst] {
            round_trip &= unorder_tokens(&order_tokens(&g, path), &g, path).unwrap() == g;
        }
        let dense = grid(seed, 2, h, w, 3);
        let m = random_mask(&dense, 0.5, seed).unwrap();
        round_trip &= masked_transpose(&masked_transpose(&m)) == m;
    }
    let draws = 100_000;
    let mut counts = [0usize; 9];
    let mut sorted = true;
    for _ in 0..draws {
        let s = hcs_sample_with(8, &mut r);
        sorted &= s.windows(2).all(|p| p[0] < p[1]);
        counts[s.len()] += 1;
    }
    let worst = (1..=8)
        .map(|m| (counts[m] as f64 / draws as f64 - 0.125).abs())
        .fold(0.0, f64::max);
    outcome(
        round_trip && sorted && worst <= 0.01,
        format!("round trips exact: {round_trip}; HCS sorted: {sorted}; max |freq(m) - 1/8| = {worst:.4} (<= 0.01)"),
    )
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fastscan"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let out = bin().args(args).env("FASTSCAN_THREADS", "1").output().unwrap();
        (out.status.code(), out.stdout)
    };
    let verify = run(&["verify", "--seed", "11"]) == run(&["verify", "--seed", "11"]);
    let grad = run(&["gradcheck", "--seed", "11"]) == run(&["gradcheck", "--seed", "11"]);
    let mut files = Vec::new();
    let mut traces = Vec::new();
    for name in ["a.fvt", "b.fvt"] {
        let path = dir.path().join(name);
        let (code, stdout) = run(&["forward", "--random-init", "--seed", "11", "--out", path.to_str().unwrap()]);
        traces.push((code, stdout));
        files.push(std::fs::read(&path).unwrap_or_default());
    }
    let forward = traces[0].0 == Some(0) && traces[0] == traces[1] && !files[0].is_empty() && files[0] == files[1];
    outcome(
        verify && grad && forward,
        format!("verify identical: {verify}; gradcheck identical: {grad}; forward features+trace identical: {forward}"),
    )
}

fn alternation() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, r#"{"preset": "tiny", "depth": 4, "dim": 16, "image_size": [224, 160]}"#).unwrap();
    let axes = |extra: &[&str]| -> Option<Vec<(String, u64)>> {
        let out = dir.path().join("f.fvt");
        let mut args = vec!["forward", "--random-init", "--config", cfg.to_str()?, "--out", out.to_str()?];
        args.extend_from_slice(extra);
        let res = bin().args(&args).output().ok()?;
        let trace: serde_json::Value = serde_json::from_slice(&res.stdout).ok()?;
        trace["blocks"]
            .as_array()?
            .iter()
            .map(|b| Some((b["pooled_axis"].as_str()?.to_string(), b["pooled_len"].as_u64()?)))
            .collect()
    };
    let alt = axes(&[]).unwrap_or_default();
    let fixed = axes(&["--no-alternate"]).unwrap_or_default();
    let alternates = alt.len() == 4 && alt.windows(2).all(|p| p[0].0 != p[1].0) && alt[0] == ("width".into(), 14) && alt[1] == ("height".into(), 10);
    let same = fixed.len() == 4 && fixed.iter().all(|a| *a == ("width".to_string(), 14));
    outcome(
        alternates && same,
        format!(
            "alternating: {:?}; --no-alternate: {:?}",
            alt.iter().map(|a| a.0.as_str()).collect::<Vec<_>>(),
            fixed.iter().map(|a| a.0.as_str()).collect::<Vec<_>>()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("scan equivalence", scan_equivalence),
        ("depth halving", depth_halving),
        ("unpooled reduction", unpooled_reduction),
        ("FLOP ratios", flop_ratios),
        ("scan-time scaling", scan_time_scaling),
        ("gradient correctness", gradients),
        ("masked/dense agreement", masked_agreement),
        ("ordering bijections", orderings),
        ("determinism", determinism),
        ("alternation", alternation),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("[{status}] {:>2}. {name}: {}", i + 1, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
