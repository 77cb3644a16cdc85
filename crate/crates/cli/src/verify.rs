//! Seeded invariant suite across every module.

use fastscan_core::block::{block_forward, causal_conv1d, BlockOptions, BlockParams, ScanKind};
use fastscan_core::channel_tokens::{hcs_sample_with, order_tokens, unorder_tokens, ChannelTokenGrid, ScanPath};
use fastscan_core::linalg::Matrix;
use fastscan_core::masked_grid::{
    block_forward_masked, masked_pool_width, masked_transpose, random_mask, MaskedDivisor,
};
use fastscan_core::pooling::{pool_width, repeat_width, PoolKind, PoolMode};
use fastscan_core::selective_scan::{combine, parallel_depth, scan_parallel, scan_sequential, ScanElement, ScanLane};
use fastscan_core::tensor_grid::{raster_flatten, raster_unflatten, transpose_grid};
use fastscan_core::TokenGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deliberate defects for checking that the suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Negate the parallel scan's outputs before comparing.
    FlipScanSign,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Property {
    pub name: String,
    pub pass: bool,
    pub max_error: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub fault: Option<Fault>,
    pub all_pass: bool,
    pub properties: Vec<Property>,
}

impl VerifyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Error measure for exact properties: 0 when equal, 1 otherwise.
fn mismatch(equal: bool) -> f64 {
    if equal {
        0.0
    } else {
        1.0
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn random_lane(rng: &mut ChaCha8Rng, len: usize, state: usize) -> ScanLane<f64> {
    ScanLane {
        len,
        state,
        abar: uniform(rng, len * state, 0.05, 0.999),
        bx: uniform(rng, len * state, -1.0, 1.0),
        c: uniform(rng, len * state, -1.0, 1.0),
        x_raw: uniform(rng, len, -1.0, 1.0),
        d_skip: rng.random_range(-1.0..1.0),
    }
}

fn random_grid(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize, d: usize) -> TokenGrid {
    TokenGrid::new(b, h, w, d, uniform(rng, b * h * w * d, -1.0, 1.0)).expect("valid dims")
}

struct Suite {
    rng: ChaCha8Rng,
    props: Vec<Property>,
}

impl Suite {
    fn record(&mut self, name: &str, max_error: f64, tolerance: f64) {
        self.props.push(Property {
            name: name.to_string(),
            pass: max_error <= tolerance,
            max_error,
            tolerance,
        });
    }

    fn scan_equivalence(&mut self, fault: Option<Fault>) {
        let mut worst: f64 = 0.0;
        for _ in 0..300 {
            let len = self.rng.random_range(1..=257);
            let lane = random_lane(&mut self.rng, len, 16);
            let seq = scan_sequential(&lane);
            let (mut par, _) = scan_parallel(&lane);
            if fault == Some(Fault::FlipScanSign) {
                par.iter_mut().for_each(|v| *v = -*v);
            }
            worst = worst.max(max_abs_diff(&seq, &par));
        }
        self.record("scan_equivalence", worst, 1e-10);
    }

    fn scan_associativity(&mut self) {
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let mut el = || ScanElement {
                a: uniform(&mut self.rng, 16, 0.0, 1.0),
                b: uniform(&mut self.rng, 16, -1.0, 1.0),
            };
            let (x, y, z) = (el(), el(), el());
            let l = combine(&combine(&x, &y), &z);
            let r = combine(&x, &combine(&y, &z));
            worst = worst.max(max_abs_diff(&l.a, &r.a)).max(max_abs_diff(&l.b, &r.b));
        }
        self.record("scan_associativity", worst, 1e-12);
    }

    fn depth_halving(&mut self) {
        let bad = [8usize, 16, 32, 64]
            .iter()
            .any(|&h| 2 * parallel_depth(h) != parallel_depth(h * h));
        let bad = bad || parallel_depth(14) != 8 || parallel_depth(196) != 16;
        self.record("depth_halving", mismatch(!bad), 0.0);
    }

    fn grid_round_trips(&mut self) {
        let mut ok_t = true;
        let mut ok_f = true;
        for _ in 0..20 {
            let (b, h, w, d) = (
                self.rng.random_range(1..3),
                self.rng.random_range(1..9),
                self.rng.random_range(1..9),
                self.rng.random_range(1..5),
            );
            let g = random_grid(&mut self.rng, b, h, w, d);
            ok_t &= transpose_grid(&transpose_grid(&g)) == g;
            ok_f &= raster_unflatten(&raster_flatten(&g), h, w, d).is_ok_and(|u| u == g);
        }
        self.record("transpose_involution", mismatch(ok_t), 0.0);
        self.record("flatten_round_trip", mismatch(ok_f), 0.0);
    }

    fn pooling(&mut self) {
        let mut idem = true;
        let mut constant = true;
        let mut identity = true;
        for _ in 0..20 {
            let (h, w) = (self.rng.random_range(1..8), self.rng.random_range(1..20));
            let g = random_grid(&mut self.rng, 1, h, w, 4);
            let p = pool_width(&g, &PoolMode::Mean).expect("mean pooling");
            let again = repeat_width(&p, w).and_then(|r| pool_width(&r, &PoolMode::Mean));
            idem &= again.is_ok_and(|a| a == p);
            let base = random_grid(&mut self.rng, 1, h, 1, 4);
            let cc = repeat_width(&base, w).and_then(|r| pool_width(&r, &PoolMode::Mean));
            constant &= cc.is_ok_and(|c| c.values() == base.values());
            for mode in [PoolMode::Mean, PoolMode::Max] {
                identity &= pool_width(&base, &mode).is_ok_and(|q| q == base);
            }
        }
        self.record("pool_idempotence", mismatch(idem), 0.0);
        self.record("pool_column_constant", mismatch(constant), 0.0);
        self.record("pool_width_one_identity", mismatch(identity), 0.0);
    }

    fn conv_causality(&mut self) {
        let (steps, ch, k) = (24, 3, 4);
        let taps = Matrix::new(ch, k, uniform(&mut self.rng, ch * k, -1.0, 1.0)).expect("taps");
        let bias = uniform(&mut self.rng, ch, -1.0, 1.0);
        let seq = uniform(&mut self.rng, steps * ch, -1.0, 1.0);
        let base = causal_conv1d(&seq, steps, &taps, &bias);
        let mut ok = true;
        for t in 0..steps {
            let mut bumped = seq.clone();
            bumped[t * ch] += 5.0;
            ok &= causal_conv1d(&bumped, steps, &taps, &bias)[..t * ch] == base[..t * ch];
        }
        self.record("conv_causality", mismatch(ok), 0.0);
    }

    fn block_properties(&mut self) {
        let dim = 8;
        let mut worst: f64 = 0.0;
        let mut fused_ok = true;
        for draw in 0..20usize {
            let index = draw % 2;
            let p = BlockParams::random(index, dim, 2, 16, 4, PoolKind::Mean, &mut self.rng);
            let h = self.rng.random_range(1..12);
            let g = if index == 0 {
                random_grid(&mut self.rng, 1, h, 1, dim)
            } else {
                random_grid(&mut self.rng, 1, 1, h, dim)
            };
            let pooled = BlockOptions::default();
            let unpooled = BlockOptions {
                pooled: false,
                ..pooled
            };
            let a = block_forward(&g, &p, &pooled).expect("pooled block").0;
            let b = block_forward(&g, &p, &unpooled).expect("unpooled block").0;
            worst = worst.max(max_abs_diff(a.values(), b.values()));

            let g = random_grid(&mut self.rng, 1, 4, 5, dim);
            let mut fused = p.clone();
            fused.flags.fused_repeat_skip = true;
            fused_ok &= block_forward(&g, &p, &pooled).expect("block").0
                == block_forward(&g, &fused, &pooled).expect("fused block").0;
        }
        self.record("unpooled_reduction", worst, 1e-10);
        self.record("fused_repeat_skip", mismatch(fused_ok), 0.0);

        let p = BlockParams::random(0, dim, 2, 16, 4, PoolKind::Mean, &mut self.rng);
        let g = random_grid(&mut self.rng, 1, 8, 8, dim);
        let seq = BlockOptions::default();
        let par = BlockOptions {
            scan: ScanKind::Parallel,
            ..seq
        };
        let a = block_forward(&g, &p, &seq).expect("block").0;
        let b = block_forward(&g, &p, &par).expect("block").0;
        self.record("block_scan_kinds_agree", max_abs_diff(a.values(), b.values()), 1e-10);
    }

    fn masked(&mut self) {
        let dim = 8;
        let mut worst: f64 = 0.0;
        for index in 0..2 {
            let p = BlockParams::random(index, dim, 2, 16, 4, PoolKind::Mean, &mut self.rng);
            let g = random_grid(&mut self.rng, 1, 6, 7, dim);
            let m = random_mask(&g, 0.0, 1).expect("mask");
            let opts = BlockOptions::default();
            let dense = block_forward(&g, &p, &opts).expect("block").0;
            let masked = block_forward_masked(&m, &p, &opts, MaskedDivisor::ColumnCount)
                .and_then(|(o, _)| o.to_dense())
                .expect("masked block");
            worst = worst.max(max_abs_diff(dense.values(), masked.values()));
        }
        self.record("masked_dense_agreement", worst, 1e-10);

        let mut round_trip = true;
        let mut divide = true;
        for seed in 0..20 {
            let g = random_grid(&mut self.rng, 1, 16, 16, 2);
            let m = random_mask(&g, 0.75, seed).expect("mask");
            round_trip &= masked_transpose(&masked_transpose(&m)) == m;
            let pooled = masked_pool_width(&m, MaskedDivisor::ColumnCount);
            let mut k = 0;
            for (r, &row) in pooled.rows.iter().enumerate() {
                let mut sum = [0.0; 2];
                while k < m.len() && m.coords[k].0 == row {
                    sum.iter_mut().zip(m.token(0, k)).for_each(|(s, v)| *s += v);
                    k += 1;
                }
                for (d, s) in sum.iter().enumerate() {
                    divide &= pooled.values[r * 2 + d] * 16.0 == *s;
                }
            }
        }
        self.record("masked_transpose_round_trip", mismatch(round_trip), 0.0);
        self.record("constant_divide_row_sum", mismatch(divide), 0.0);
    }

    fn channels(&mut self) {
        let mut bijection = true;
        for _ in 0..10 {
            let (h, w, c) = (
                self.rng.random_range(1..5),
                self.rng.random_range(1..5),
                self.rng.random_range(1..5),
            );
            let vals = uniform(&mut self.rng, h * w * c * 2, -1.0, 1.0);
            let g = ChannelTokenGrid::new(1, h, w, c, 2, vals, (0..c).collect()).expect("grid");
            for path in [ScanPath::ChannelFirst, ScanPath::SpatialFirst] {
                bijection &= unorder_tokens(&order_tokens(&g, path), &g, path).is_ok_and(|u| u == g);
            }
        }
        self.record("channel_order_bijection", mismatch(bijection), 0.0);
        let sorted = (0..1000).all(|_| {
            let s = hcs_sample_with(8, &mut self.rng);
            !s.is_empty() && s.windows(2).all(|p| p[0] < p[1])
        });
        self.record("hcs_sorted", mismatch(sorted), 0.0);
    }
}

pub fn run_verify(seed: u64, fault: Option<Fault>) -> VerifyReport {
    let mut suite = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        props: Vec::new(),
    };
    suite.scan_equivalence(fault);
    suite.scan_associativity();
    suite.depth_halving();
    suite.grid_round_trips();
    suite.pooling();
    suite.conv_causality();
    suite.block_properties();
    suite.masked();
    suite.channels();
    let all_pass = suite.props.iter().all(|p| p.pass);
    VerifyReport {
        seed,
        fault,
        all_pass,
        properties: suite.props,
    }
}
