use fastscan_core::encoder::{EncoderConfig, Preset};
use fastscan_core::flops::{count_flops, count_vit_flops, reduction, FlopComponent, DEIT_S};

const RESOLUTIONS: [usize; 6] = [224, 384, 512, 768, 1024, 2048];

fn models(preset: Preset) -> (EncoderConfig, EncoderConfig) {
    let fast = EncoderConfig::preset(preset);
    let vim = EncoderConfig { pooled: false, ..fast.clone() };
    (vim, fast)
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

#[test]
fn convention_reproduces_deit_small() {
    let g = count_vit_flops(DEIT_S, 224) as f64 / 1e9;
    assert!(within(g, 4.6, 0.10), "DeiT-S {g:.3} G");
}

#[test]
fn tiny_models_match_published_counts() {
    let (vim, fast) = models(Preset::Tiny);
    let v = count_flops(&vim, 224).unwrap();
    let f = count_flops(&fast, 224).unwrap();
    assert!(within(v.gflops(), 1.8, 0.10), "Vim-T {:.3} G", v.gflops());
    assert!(within(f.gflops(), 1.17, 0.10), "FastVim-T {:.3} G", f.gflops());
    assert!((reduction(&v, &f) - 0.35).abs() <= 0.03);
    let v = count_flops(&vim, 2048).unwrap();
    let f = count_flops(&fast, 2048).unwrap();
    assert!((reduction(&v, &f) - 0.385).abs() <= 0.03);
}

#[test]
fn totals_are_component_sums_and_pooling_is_free() {
    for preset in [Preset::Tiny, Preset::Small, Preset::Base] {
        let (vim, fast) = models(preset);
        for res in RESOLUTIONS {
            for report in [count_flops(&vim, res).unwrap(), count_flops(&fast, res).unwrap()] {
                assert_eq!(report.total, report.components.iter().map(|(_, v)| v).sum::<u64>());
                assert_eq!(report.get(FlopComponent::PoolRepeat), 0);
            }
        }
    }
}

#[test]
fn only_scan_and_projection_terms_differ() {
    let (vim, fast) = models(Preset::Small);
    let v = count_flops(&vim, 448).unwrap();
    let f = count_flops(&fast, 448).unwrap();
    assert_eq!((v.scan_len, f.scan_len), (784, 28));
    for c in FlopComponent::ALL {
        let differs = matches!(c, FlopComponent::Scan | FlopComponent::SelectiveProjection);
        assert_eq!(v.get(c) != f.get(c), differs, "{}", c.name());
    }
    assert_eq!(v.get(FlopComponent::Scan), 28 * f.get(FlopComponent::Scan));
}

#[test]
fn gap_is_positive_and_grows_with_resolution() {
    for preset in [Preset::Tiny, Preset::Small, Preset::Base, Preset::Large, Preset::Huge] {
        let (vim, fast) = models(preset);
        let mut last = 0.0;
        for res in (224..=2048).step_by(32) {
            let v = count_flops(&vim, res).unwrap();
            let f = count_flops(&fast, res).unwrap();
            assert!(f.total < v.total);
            let r = reduction(&v, &f);
            assert!(r >= last, "{res}: {r} < {last}");
            last = r;
        }
    }
}

#[test]
fn totals_scale_linearly_in_tokens() {
    for config in [models(Preset::Tiny).0, models(Preset::Tiny).1] {
        let pts: Vec<(f64, f64)> = RESOLUTIONS
            .iter()
            .map(|&r| {
                let rep = count_flops(&config, r).unwrap();
                ((rep.tokens as f64).ln(), (rep.total as f64).ln())
            })
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let cov: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let var: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let slope = cov / var;
        assert!((slope - 1.0).abs() <= 0.05, "exponent {slope}");
    }
}

#[test]
fn empty_stack_counts_embedding_and_head_only() {
    let (mut vim, mut fast) = models(Preset::Tiny);
    vim.depth = Some(0);
    fast.depth = Some(0);
    let v = count_flops(&vim, 224).unwrap();
    let f = count_flops(&fast, 224).unwrap();
    assert_eq!(v.total, f.total);
    assert_eq!(v.total, v.get(FlopComponent::PatchEmbed) + v.get(FlopComponent::Head));
}

#[test]
fn indivisible_resolution_is_rejected() {
    assert!(count_flops(&EncoderConfig::default(), 230).is_err());
}
