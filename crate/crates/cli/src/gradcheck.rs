//! Analytic gradients against central finite differences.

use fastscan_core::pooling::{pool_width, pool_width_backward, repeat_width, repeat_width_backward, PoolMode};
use fastscan_core::selective_scan::{scan_sequential, scan_vjp, ScanLane};
use fastscan_core::TokenGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const THRESHOLD: f64 = 1e-5;
/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Denominator floor so near-zero gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GradCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GradReport {
    pub seed: u64,
    pub threshold: f64,
    pub step: f64,
    pub all_pass: bool,
    pub checks: Vec<GradCheck>,
}

impl GradReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn central(f: &mut dyn FnMut(f64) -> f64) -> f64 {
    (f(STEP) - f(-STEP)) / (2.0 * STEP)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn lane_loss(lane: &ScanLane<f64>, dy: &[f64]) -> f64 {
    scan_sequential(lane).iter().zip(dy).map(|(y, g)| y * g).sum()
}

/// `scan_vjp` on one random lane, every input perturbed.
pub fn check_scan_lane(rng: &mut ChaCha8Rng, len: usize, state: usize) -> GradCheck {
    let lane = ScanLane {
        len,
        state,
        abar: uniform(rng, len * state, 0.05, 0.999),
        bx: uniform(rng, len * state, -1.0, 1.0),
        c: uniform(rng, len * state, -1.0, 1.0),
        x_raw: uniform(rng, len, -1.0, 1.0),
        d_skip: rng.random_range(-1.0..1.0),
    };
    let dy = uniform(rng, len, -1.0, 1.0);
    let g = scan_vjp(&lane, &dy);
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let mut probe = |analytic: f64, set: &dyn Fn(&mut ScanLane<f64>, f64)| {
        let numeric = central(&mut |e| {
            let mut l = lane.clone();
            set(&mut l, e);
            lane_loss(&l, &dy)
        });
        worst = worst.max(rel_error(analytic, numeric));
        entries += 1;
    };
    for k in 0..len * state {
        probe(g.abar[k], &|l, e| l.abar[k] += e);
        probe(g.bx[k], &|l, e| l.bx[k] += e);
        probe(g.c[k], &|l, e| l.c[k] += e);
    }
    for t in 0..len {
        probe(g.x_raw[t], &|l, e| l.x_raw[t] += e);
    }
    probe(g.d_skip, &|l, e| l.d_skip += e);
    GradCheck {
        name: format!("scan_vjp_T{len}_N{state}"),
        entries,
        max_rel_error: worst,
        pass: worst < THRESHOLD,
    }
}

/// Fixed per-step scan coefficients applied to a pooled grid.
struct Composite {
    h: usize,
    w: usize,
    dim: usize,
    state: usize,
    abar: Vec<f64>,
    bbar: Vec<f64>,
    c: Vec<f64>,
    d_skip: Vec<f64>,
}

impl Composite {
    fn lane(&self, pooled: &TokenGrid, d: usize) -> ScanLane<f64> {
        let n = self.state;
        let x: Vec<f64> = (0..self.h).map(|t| pooled.get(0, t, 0, d)).collect();
        let off = d * self.h * n;
        let bx = (0..self.h * n).map(|k| self.bbar[off + k] * x[k / n]).collect();
        ScanLane {
            len: self.h,
            state: n,
            abar: self.abar[off..off + self.h * n].to_vec(),
            bx,
            c: self.c[off..off + self.h * n].to_vec(),
            x_raw: x,
            d_skip: self.d_skip[d],
        }
    }

    /// pool → per-channel scan → repeat.
    fn forward(&self, x: &TokenGrid) -> TokenGrid {
        let pooled = pool_width(x, &PoolMode::Mean).expect("pool");
        let mut y = TokenGrid::zeros(1, self.h, 1, self.dim).expect("dims");
        for d in 0..self.dim {
            for (t, v) in scan_sequential(&self.lane(&pooled, d)).into_iter().enumerate() {
                let i = y.index(0, t, 0, d);
                y.values_mut()[i] = v;
            }
        }
        repeat_width(&y, self.w).expect("repeat")
    }

    fn backward(&self, x: &TokenGrid, dy: &TokenGrid) -> TokenGrid {
        let pooled = pool_width(x, &PoolMode::Mean).expect("pool");
        let g_pooled = repeat_width_backward(dy).expect("repeat backward");
        let n = self.state;
        let mut dp = TokenGrid::zeros(1, self.h, 1, self.dim).expect("dims");
        for d in 0..self.dim {
            let lane = self.lane(&pooled, d);
            let up: Vec<f64> = (0..self.h).map(|t| g_pooled.get(0, t, 0, d)).collect();
            let g = scan_vjp(&lane, &up);
            let off = d * self.h * n;
            for t in 0..self.h {
                let via_b: f64 = (0..n).map(|s| g.bx[t * n + s] * self.bbar[off + t * n + s]).sum();
                let i = dp.index(0, t, 0, d);
                dp.values_mut()[i] = via_b + g.x_raw[t];
            }
        }
        pool_width_backward(&dp, self.w).expect("pool backward")
    }
}

/// Gradient of `Σ dy ⊙ repeat(scan(pool(x)))` with respect to `x`.
pub fn check_pool_scan_repeat(rng: &mut ChaCha8Rng, h: usize, w: usize, dim: usize, state: usize) -> GradCheck {
    let total = dim * h * state;
    let comp = Composite {
        h,
        w,
        dim,
        state,
        abar: uniform(rng, total, 0.05, 0.999),
        bbar: uniform(rng, total, -1.0, 1.0),
        c: uniform(rng, total, -1.0, 1.0),
        d_skip: uniform(rng, dim, -1.0, 1.0),
    };
    let x = TokenGrid::new(1, h, w, dim, uniform(rng, h * w * dim, -1.0, 1.0)).expect("dims");
    let dy = TokenGrid::new(1, h, w, dim, uniform(rng, h * w * dim, -1.0, 1.0)).expect("dims");
    let dx = comp.backward(&x, &dy);
    let loss = |g: &TokenGrid| -> f64 {
        comp.forward(g).values().iter().zip(dy.values()).map(|(a, b)| a * b).sum()
    };
    let mut worst: f64 = 0.0;
    for k in 0..x.values().len() {
        let numeric = central(&mut |e| {
            let mut xp = x.clone();
            xp.values_mut()[k] += e;
            loss(&xp)
        });
        worst = worst.max(rel_error(dx.values()[k], numeric));
    }
    GradCheck {
        name: format!("pool_scan_repeat_h{h}_w{w}_D{dim}_N{state}"),
        entries: x.values().len(),
        max_rel_error: worst,
        pass: worst < THRESHOLD,
    }
}

/// Zero upstream gradient must give exactly zero everywhere.
pub fn check_zero_upstream(rng: &mut ChaCha8Rng) -> GradCheck {
    let (len, state) = (17, 8);
    let lane = ScanLane {
        len,
        state,
        abar: uniform(rng, len * state, 0.05, 0.999),
        bx: uniform(rng, len * state, -1.0, 1.0),
        c: uniform(rng, len * state, -1.0, 1.0),
        x_raw: uniform(rng, len, -1.0, 1.0),
        d_skip: 0.5,
    };
    let g = scan_vjp(&lane, &vec![0.0; len]);
    let all = g.abar.iter().chain(&g.bx).chain(&g.c).chain(&g.x_raw).chain([&g.d_skip]);
    let worst = all.fold(0.0f64, |m, v| m.max(v.abs()));
    GradCheck {
        name: "zero_upstream".into(),
        entries: 3 * len * state + len + 1,
        max_rel_error: worst,
        pass: worst == 0.0,
    }
}

/// Mean-pool gradient of one row is `g / w` in every column.
pub fn check_pool_broadcast(rng: &mut ChaCha8Rng) -> GradCheck {
    let w = 7;
    let g = rng.random_range(-1.0..1.0);
    let up = TokenGrid::new(1, 1, 1, 1, vec![g]).expect("dims");
    let grad = pool_width_backward(&up, w).expect("pool backward");
    let worst = grad.values().iter().fold(0.0f64, |m, v| m.max((v - g / w as f64).abs()));
    GradCheck {
        name: "pool_broadcast".into(),
        entries: w,
        max_rel_error: worst,
        pass: worst == 0.0 && grad.values().len() == w,
    }
}

pub fn run_gradcheck(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    for (len, state) in [(1, 1), (2, 4), (9, 8), (33, 16), (64, 16)] {
        checks.push(check_scan_lane(&mut rng, len, state));
    }
    for (h, w, dim, state) in [(1, 5, 2, 4), (4, 3, 3, 8), (8, 8, 8, 16)] {
        checks.push(check_pool_scan_repeat(&mut rng, h, w, dim, state));
    }
    checks.push(check_zero_upstream(&mut rng));
    checks.push(check_pool_broadcast(&mut rng));
    let all_pass = checks.iter().all(|c| c.pass);
    GradReport {
        seed,
        threshold: THRESHOLD,
        step: STEP,
        all_pass,
        checks,
    }
}
