use std::f64::consts::PI;

use num_complex::Complex64;
use proptest::prelude::*;
use ssmlab_core::analysis::{
    self, classify_filter, dominant_and_secondary, spectral_entropy, spectrum, spectrum_profile, time_profile,
    AnalysisConfig, FilterThresholds,
};
use ssmlab_core::numeric::{Rng, Tensor};
use ssmlab_core::s4d::{self, Kernel};

fn kernel_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 2..=256).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

/// `|DFT|²` normalized, computed directly.
fn naive_psd(k: &[f64]) -> Vec<f64> {
    let n = k.len().next_power_of_two();
    let p: Vec<f64> = (0..n / 2 + 1)
        .map(|m| {
            k.iter()
                .enumerate()
                .map(|(t, &v)| Complex64::from_polar(v, -2.0 * PI * (m * t) as f64 / n as f64))
                .sum::<Complex64>()
                .norm_sqr()
        })
        .collect();
    let s: f64 = p.iter().sum();
    p.into_iter().map(|v| v / s).collect()
}

proptest! {
    #[test]
    fn psd_sums_to_one_and_entropy_bounded(k in kernel_strategy()) {
        let p = spectrum_profile(&k, 0.3).unwrap();
        prop_assert!((p.psd.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(p.entropy >= 0.0 && p.entropy <= (p.bins() as f64).ln() + 1e-12);
        prop_assert!(p.psd.iter().all(|&v| v <= p.dominant.power));
    }

    #[test]
    fn psd_matches_naive(k in kernel_strategy()) {
        let p = spectrum(&k).unwrap();
        for (a, b) in p.psd.iter().zip(naive_psd(&k)) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn scale_invariance(k in kernel_strategy(), c in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0]) {
        let ck: Vec<f64> = k.iter().map(|v| c * v).collect();
        let (a, b) = (spectrum_profile(&k, 0.3).unwrap(), spectrum_profile(&ck, 0.3).unwrap());
        for (x, y) in a.psd.iter().zip(&b.psd) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        prop_assert!((a.entropy - b.entropy).abs() <= 1e-9);
        prop_assert_eq!(a.dominant.bin, b.dominant.bin);
        let bins = |p: &analysis::SpectrumProfile| p.secondary.iter().map(|s| s.bin).collect::<Vec<_>>();
        prop_assert_eq!(bins(&a), bins(&b));
        let t = FilterThresholds::default();
        prop_assert_eq!(classify_filter(&a, &t), classify_filter(&b, &t));
        let (ta, tb) = (time_profile(&k, 2.0).unwrap(), time_profile(&ck, 2.0).unwrap());
        let (pos, neg) = if c > 0.0 { (tb.max_pos, tb.max_neg) } else { (tb.max_neg, tb.max_pos) };
        prop_assert!((pos - c * ta.max_pos).abs() <= 1e-12 * c.abs() * ta.max_pos.abs().max(1.0));
        prop_assert!((neg - c * ta.max_neg).abs() <= 1e-12 * c.abs() * ta.max_neg.abs().max(1.0));
    }

    #[test]
    fn circular_shift_keeps_psd(k in prop::collection::vec(-5.0f64..5.0, 64), s in 0usize..64) {
        prop_assume!(k.iter().any(|v| v.abs() > 1e-3));
        let mut shifted = k.clone();
        shifted.rotate_right(s);
        let (a, b) = (spectrum(&k).unwrap(), spectrum(&shifted).unwrap());
        for (x, y) in a.psd.iter().zip(&b.psd) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn time_profile_bounds(k in kernel_strategy()) {
        let t = time_profile(&k, 2.0).unwrap();
        prop_assert!(t.max_pos_index < k.len() && t.max_neg_index < k.len());
        prop_assert!(k.iter().all(|&v| v <= t.max_pos && v >= t.max_neg));
    }
}

#[test]
fn entropy_bounds_on_random_psds() {
    let mut r = Rng::new(8);
    for _ in 0..10_000 {
        let bins = 2 + r.below(200);
        let raw: Vec<f64> = (0..bins).map(|_| r.uniform().powi(3)).collect();
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let h = spectral_entropy(&p).unwrap();
        assert!(h >= 0.0 && h <= (bins as f64).ln() + 1e-12);
    }
}

#[test]
fn entropy_reference_values() {
    let mut one_hot = vec![0.0; 129];
    one_hot[40] = 1.0;
    assert_eq!(spectral_entropy(&one_hot).unwrap(), 0.0);
    let h = spectral_entropy(&vec![1.0 / 129.0; 129]).unwrap();
    assert!((h - 129f64.ln()).abs() <= 1e-9);
    assert!((h - 4.8598).abs() < 1e-4);
}

/// One active mode `n` on one channel: `K[l] = 2 Re(C B̄ Ā^l)` oscillates at `Δ·Im(A_n)/(2π)`.
fn single_mode_kernel(n: usize, dt: f64, len: usize) -> Vec<f64> {
    let mut p = s4d::init_s4d(1, n + 1, 1e-3, 1e-1, &mut Rng::new(0)).unwrap();
    p.log_dt = Tensor::vector(vec![dt.ln()]);
    let mut c_re = vec![0.0; n + 1];
    c_re[n] = 1.0;
    p.c_re = Tensor::new(&[1, n + 1], c_re).unwrap();
    p.c_im = Tensor::zeros(&[1, n + 1]);
    s4d::materialize_kernel(&p, len).unwrap().values
}

#[test]
fn single_mode_frequency() {
    let mut r = Rng::new(21);
    for _ in 0..20 {
        let dt = r.uniform_range(0.02, 0.1);
        // Target f0 = Δ·n/2 inside [0.05, 0.45].
        let lo = (0.1 / dt).ceil() as usize;
        let hi = (0.9 / dt).floor() as usize;
        let n = lo + r.below(hi - lo + 1);
        let f0 = dt * (PI * n as f64) / (2.0 * PI);
        let k = single_mode_kernel(n, dt, 256);
        let p = spectrum_profile(&k, 0.3).unwrap();
        let bin = 1.0 / p.padded_len as f64;
        assert!(
            (p.dominant.frequency - f0).abs() <= bin,
            "n {n} Δ {dt}: dominant {} vs {f0}",
            p.dominant.frequency
        );
    }
}

#[test]
fn two_identical_channels_match_one() {
    let row: Vec<f64> = (0..32).map(|l| (0.3 * l as f64).cos() * 0.95f64.powi(l)).collect();
    let cfg = AnalysisConfig::default();
    let one = analysis::aggregate_channels(&Kernel::new(1, 32, row.clone()).unwrap(), &cfg).unwrap();
    let two = analysis::aggregate_channels(&Kernel::new(2, 32, [row.clone(), row].concat()).unwrap(), &cfg).unwrap();
    for (a, b) in one.mean_psd.psd.iter().zip(&two.mean_psd.psd) {
        assert!((a - b).abs() < 1e-15);
    }
    for (a, b) in one.mean_kernel.iter().zip(&two.mean_kernel) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!((two.mean_psd.psd.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn dominant_tie_breaks_low() {
    let s = analysis::Spectrum {
        padded_len: 8,
        frequencies: (0..5).map(|m| m as f64 / 8.0).collect(),
        psd: vec![0.1, 0.35, 0.1, 0.35, 0.1],
    };
    let (d, sec) = dominant_and_secondary(&s, 0.3);
    assert_eq!(d.bin, 1);
    assert_eq!(sec.len(), 1);
    assert_eq!(sec[0].bin, 3);
}

const GOLDEN_KERNEL: [f64; 16] = [
    0.5, 1.25, -0.75, 2.0, 0.0, -1.5, 0.25, 0.8, -0.3, 0.1, 0.9, -2.2, 0.4, 0.05, -0.6, 1.1,
];

#[test]
fn golden_report_is_stable() {
    let k = Kernel::new(2, 8, GOLDEN_KERNEL.to_vec()).unwrap();
    let report = analysis::analyze_kernel(&k, "fixture", "golden", &AnalysisConfig::default()).unwrap();
    let json = serde_json::to_string_pretty(&report).unwrap() + "\n";
    let again = serde_json::to_string_pretty(
        &analysis::analyze_kernel(&k, "fixture", "golden", &AnalysisConfig::default()).unwrap(),
    )
    .unwrap()
        + "\n";
    assert_eq!(json, again);
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_report.json");
    if std::env::var_os("SSMLAB_BLESS").is_some() {
        std::fs::write(&path, &json).unwrap();
    }
    let golden = std::fs::read_to_string(&path).expect("golden fixture present");
    assert_eq!(json, golden);
}
