mod common;

use common::{max_abs_diff, naive_matmul, random_lane, rng, uniform_vec};
use fastscan_core::selective_scan::{
    combine, discretize, parallel_depth, project_rows, reverse_sequence, scan_parallel, scan_sequential,
    scan_vjp, DiscretizeMode, ScanElement, ScanLane, SelectiveSSMParams,
};
use proptest::prelude::*;
use rand::Rng;

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn projection_matches_naive_oracle() {
    let mut r = rng(11);
    let (ch, n, steps) = (24, 16, 37);
    let mut params = SelectiveSSMParams::random(ch, n, &mut r);
    params.b_bias = Some(uniform_vec(&mut r, n, -0.5, 0.5));
    let x = uniform_vec(&mut r, steps * ch, -2.0, 2.0);
    let proj = project_rows(&x, steps, &params).unwrap();

    let mut b = naive_matmul(&x, steps, &params.w_b);
    for row in b.chunks_mut(n) {
        row.iter_mut().zip(params.b_bias.as_ref().unwrap()).for_each(|(v, bias)| *v += bias);
    }
    let c = naive_matmul(&x, steps, &params.w_c);
    let dt = naive_matmul(&x, steps, &params.w_dt);
    for (got, want) in proj.b.iter().zip(&b).chain(proj.c.iter().zip(&c)) {
        assert!(rel_close(*got, *want, 1e-12) || (got - want).abs() < 1e-15, "{got} vs {want}");
    }
    for t in 0..steps {
        for d in 0..ch {
            let want = common::softplus(params.dt_bias[d] + dt[t]);
            let got = proj.delta[t * ch + d];
            assert!(got > 0.0);
            assert!(rel_close(got, want, 1e-12), "{got} vs {want}");
        }
    }
}

#[test]
fn discretization_matches_closed_form() {
    let mut r = rng(12);
    let (ch, n, steps) = (4, 8, 5);
    let params = SelectiveSSMParams::random(ch, n, &mut r);
    let x = uniform_vec(&mut r, steps * ch, -1.0, 1.0);
    let proj = project_rows(&x, steps, &params).unwrap();
    let exact = discretize(&proj, &params, DiscretizeMode::ZohExact).unwrap();
    let simple = discretize(&proj, &params, DiscretizeMode::ZohSimplified).unwrap();
    for t in 0..steps {
        for d in 0..ch {
            let delta = proj.delta[t * ch + d];
            for s in 0..n {
                let a = -params.a_log.get(d, s).exp();
                let b = proj.b[t * n + s];
                let k = (t * ch + d) * n + s;
                assert!(rel_close(exact.abar[k], (delta * a).exp(), 1e-14));
                let want = ((delta * a).exp() - 1.0) / a * b;
                assert!((exact.bbar[k] - want).abs() <= 1e-12 * want.abs().max(1e-12));
                assert_eq!(simple.bbar[k], delta * b);
                assert_eq!(simple.abar[k], exact.abar[k]);
            }
        }
    }
}

#[test]
fn parallel_matches_sequential_on_random_lanes() {
    let mut r = rng(13);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let len = r.random_range(1..=257);
        let lane = random_lane(&mut r, len, 16);
        let seq = scan_sequential(&lane);
        let (par, rounds) = scan_parallel(&lane);
        assert_eq!(rounds, parallel_depth(len));
        worst = worst.max(max_abs_diff(&seq, &par));
    }
    assert!(worst <= 1e-10, "max deviation {worst}");
}

#[test]
fn depth_is_logarithmic_and_halves_under_pooling() {
    assert_eq!(parallel_depth(1), 0);
    assert_eq!(parallel_depth(2), 2);
    assert_eq!(parallel_depth(196), 16);
    assert_eq!(parallel_depth(14), 8);
    for h in [2usize, 4, 8, 16, 32, 64, 128] {
        assert_eq!(parallel_depth(h * h), 2 * parallel_depth(h));
    }
}

#[test]
fn reversed_scan_matches_right_to_left_recurrence() {
    let mut r = rng(14);
    for _ in 0..50 {
        let len = r.random_range(1..40);
        let n = 4;
        let lane = random_lane(&mut r, len, n);
        let rev = ScanLane {
            len,
            state: n,
            abar: reverse_sequence(&lane.abar, n),
            bx: reverse_sequence(&lane.bx, n),
            c: reverse_sequence(&lane.c, n),
            x_raw: reverse_sequence(&lane.x_raw, 1),
            d_skip: lane.d_skip,
        };
        let got = reverse_sequence(&scan_parallel(&rev).0, 1);

        let mut h = vec![0.0; n];
        let mut want = vec![0.0; len];
        for t in (0..len).rev() {
            let mut y = lane.d_skip * lane.x_raw[t];
            for s in 0..n {
                h[s] = lane.abar[t * n + s] * h[s] + lane.bx[t * n + s];
                y += lane.c[t * n + s] * h[s];
            }
            want[t] = y;
        }
        assert!(max_abs_diff(&got, &want) < 1e-12);
    }
}

#[test]
fn vjp_matches_finite_differences() {
    let mut r = rng(15);
    let eps = 1e-6;
    for _ in 0..20 {
        let len = r.random_range(1..24);
        let lane = random_lane(&mut r, len, 4);
        let dy = uniform_vec(&mut r, len, -1.0, 1.0);
        let grads = scan_vjp(&lane, &dy);
        let loss = |l: &ScanLane<f64>| -> f64 { scan_sequential(l).iter().zip(&dy).map(|(y, g)| y * g).sum() };
        let check = |analytic: f64, mut bump: Box<dyn FnMut(&mut ScanLane<f64>, f64)>| {
            let mut up = lane.clone();
            bump(&mut up, eps);
            let mut dn = lane.clone();
            bump(&mut dn, -eps);
            let numeric = (loss(&up) - loss(&dn)) / (2.0 * eps);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            assert!(err < 1e-5, "analytic {analytic} numeric {numeric}");
        };
        for k in 0..lane.abar.len() {
            check(grads.abar[k], Box::new(move |l, e| l.abar[k] += e));
            check(grads.bx[k], Box::new(move |l, e| l.bx[k] += e));
            check(grads.c[k], Box::new(move |l, e| l.c[k] += e));
        }
        for t in 0..len {
            check(grads.x_raw[t], Box::new(move |l, e| l.x_raw[t] += e));
        }
        check(grads.d_skip, Box::new(|l, e| l.d_skip += e));
    }
}

#[test]
fn f32_lane_tracks_f64_lane() {
    let mut r = rng(16);
    let lane = random_lane(&mut r, 100, 16);
    let lane32 = ScanLane::<f32> {
        len: lane.len,
        state: lane.state,
        abar: lane.abar.iter().map(|v| *v as f32).collect(),
        bx: lane.bx.iter().map(|v| *v as f32).collect(),
        c: lane.c.iter().map(|v| *v as f32).collect(),
        x_raw: lane.x_raw.iter().map(|v| *v as f32).collect(),
        d_skip: lane.d_skip as f32,
    };
    let y64 = scan_sequential(&lane);
    let (y32, _) = scan_parallel(&lane32);
    let y32: Vec<f64> = y32.iter().map(|v| *v as f64).collect();
    assert!(max_abs_diff(&y64, &y32) < 1e-3);
}

#[test]
fn zero_projection_weights_leave_skip_only() {
    let (ch, steps) = (3, 6);
    let params = SelectiveSSMParams::zeroed(ch, 4);
    let x = vec![0.7; steps * ch];
    let proj = project_rows(&x, steps, &params).unwrap();
    assert!(proj.b.iter().chain(&proj.c).all(|v| *v == 0.0));
}

fn element(rng: &mut impl Rng, n: usize) -> ScanElement<f64> {
    ScanElement {
        a: uniform_vec(rng, n, 0.0, 1.0),
        b: uniform_vec(rng, n, -1.0, 1.0),
    }
}

proptest! {
    #[test]
    fn combine_is_associative(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (x, y, z) = (element(&mut r, 16), element(&mut r, 16), element(&mut r, 16));
        let left = combine(&combine(&x, &y), &z);
        let right = combine(&x, &combine(&y, &z));
        prop_assert!(max_abs_diff(&left.a, &right.a) <= 1e-12);
        prop_assert!(max_abs_diff(&left.b, &right.b) <= 1e-12);
        let id = ScanElement::identity(16);
        prop_assert_eq!(combine(&id, &x), x.clone());
        prop_assert_eq!(combine(&x, &id), x);
    }

    #[test]
    fn scan_is_linear_in_its_inputs(seed in any::<u64>(), len in 1usize..64, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut r = rng(seed);
        let l1 = random_lane(&mut r, len, 8);
        let mut l2 = random_lane(&mut r, len, 8);
        l2.abar = l1.abar.clone();
        l2.c = l1.c.clone();
        l2.d_skip = l1.d_skip;
        let mut mix = l1.clone();
        mix.bx = l1.bx.iter().zip(&l2.bx).map(|(a, b)| alpha * a + beta * b).collect();
        mix.x_raw = l1.x_raw.iter().zip(&l2.x_raw).map(|(a, b)| alpha * a + beta * b).collect();
        let y1 = scan_parallel(&l1).0;
        let y2 = scan_parallel(&l2).0;
        let want: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| alpha * a + beta * b).collect();
        prop_assert!(max_abs_diff(&scan_parallel(&mix).0, &want) <= 1e-10);
    }

    #[test]
    fn reverse_is_an_involution(v in prop::collection::vec(-1e3f64..1e3, 0..60), width in 1usize..4) {
        let v: Vec<f64> = v[..v.len() / width * width].to_vec();
        prop_assert_eq!(reverse_sequence(&reverse_sequence(&v, width), width), v);
    }
}
