//! Independent reference implementations checked against the fast paths.

use proptest::prelude::*;
use ssmlab_core::check::{direct_causal, naive_dft, randn, recurrent_kernel};
use ssmlab_core::numeric::{fft_real, ifft_real, Rng};
use ssmlab_core::s4d;

fn assert_matches_dft(x: &[f64]) {
    let spec = fft_real(x).unwrap();
    assert_eq!(spec.padded_len, x.len().next_power_of_two());
    let oracle = naive_dft(x, spec.padded_len);
    assert_eq!(spec.bins.len(), oracle.len());
    for (m, o) in oracle.iter().enumerate() {
        assert!((spec.bins.re[m] - o.re).abs() <= 1e-10, "len {} bin {m}", x.len());
        assert!((spec.bins.im[m] - o.im).abs() <= 1e-10, "len {} bin {m}", x.len());
    }
}

#[test]
fn fft_matches_naive_dft_on_random_vectors() {
    let mut r = Rng::new(11);
    for _ in 0..100 {
        let len = 2 + r.below(127);
        let x: Vec<f64> = (0..len).map(|_| r.normal()).collect();
        assert_matches_dft(&x);
    }
}

proptest! {
    #[test]
    fn fft_matches_dft(x in prop::collection::vec(-10.0f64..10.0, 2..=128)) {
        assert_matches_dft(&x);
    }

    #[test]
    fn fft_round_trip(x in prop::collection::vec(-10.0f64..10.0, 1..=128)) {
        let spec = fft_real(&x).unwrap();
        let back = ifft_real(&spec.bins, x.len()).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn fft_linear(x in prop::collection::vec(-5.0f64..5.0, 16), y in prop::collection::vec(-5.0f64..5.0, 16), a in -3.0f64..3.0) {
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + q).collect();
        let (fx, fy, fxy) = (fft_real(&x).unwrap(), fft_real(&y).unwrap(), fft_real(&xy).unwrap());
        for m in 0..fx.bins.len() {
            prop_assert!((a * fx.bins.re[m] + fy.bins.re[m] - fxy.bins.re[m]).abs() < 1e-9);
            prop_assert!((a * fx.bins.im[m] + fy.bins.im[m] - fxy.bins.im[m]).abs() < 1e-9);
        }
    }
}

#[test]
fn kernel_matches_recurrence() {
    for draw in 0..50 {
        let mut r = Rng::new(draw).split("kernel-oracle");
        let mut p = s4d::init_s4d(4, 8, 1e-3, 1e-1, &mut r).unwrap();
        p.c_re = randn(&mut r, &[4, 8]);
        p.c_im = randn(&mut r, &[4, 8]);
        let k = s4d::materialize_kernel(&p, 64).unwrap();
        let oracle = recurrent_kernel(&p, 64);
        for (a, b) in k.values.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-10, "draw {draw}: {a} vs {b}");
        }
    }
}

#[test]
fn fft_convolution_matches_direct() {
    for case in 0..20 {
        let mut r = Rng::new(case).split("conv-oracle");
        let mut p = s4d::init_s4d(3, 4, 1e-3, 1e-1, &mut r).unwrap();
        p.c_re = randn(&mut r, &[3, 4]);
        p.d = randn(&mut r, &[3]);
        let u = randn(&mut r, &[2, 3, 256]);
        let y = s4d::s4d_forward(&p, &u).unwrap();
        let k = s4d::materialize_kernel(&p, 256).unwrap();
        let oracle = direct_causal(&u, &k.values, p.d.data());
        for (a, b) in y.data().iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-8, "case {case}: {a} vs {b}");
        }
    }
}

#[test]
fn output_is_causal() {
    let mut r = Rng::new(3);
    let p = s4d::init_s4d(2, 4, 1e-3, 1e-1, &mut r).unwrap();
    let u = randn(&mut r, &[1, 2, 32]);
    let mut v = u.clone();
    for c in 0..2 {
        v.data_mut()[c * 32 + 20] += 5.0;
    }
    let (a, b) = (s4d::s4d_forward(&p, &u).unwrap(), s4d::s4d_forward(&p, &v).unwrap());
    for c in 0..2 {
        for t in 0..20 {
            assert!((a.data()[c * 32 + t] - b.data()[c * 32 + t]).abs() < 1e-10);
        }
    }
}
