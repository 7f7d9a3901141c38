//! Iterative radix-2 FFT for real signals.
//!
//! Inputs whose length is not a power of two are zero-padded to the next
//! power of two. The padded length is kept next to the bins so the
//! frequency axis `m / padded_len` (cycles per sample) stays correct.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::tensor::ComplexVector;
use crate::error::{Error, Result};

/// One-sided spectrum of a real signal: `padded_len / 2 + 1` bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealSpectrum {
    pub bins: ComplexVector,
    pub padded_len: usize,
    pub signal_len: usize,
}

impl RealSpectrum {
    /// Frequency of bin `m` in cycles per sample.
    pub fn frequency(&self, m: usize) -> f64 {
        m as f64 / self.padded_len as f64
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.bins.len()).map(|m| self.frequency(m)).collect()
    }
}

pub fn padded_len(len: usize) -> usize {
    len.max(1).next_power_of_two()
}

pub fn half_bins(padded: usize) -> usize {
    padded / 2 + 1
}

/// Precomputed twiddles and bit-reversal permutation for one power-of-two size.
#[derive(Clone, Debug)]
pub struct FftPlan {
    n: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    rev: Vec<usize>,
}

impl FftPlan {
    pub fn new(n: usize) -> Self {
        assert!(n.is_power_of_two(), "FFT size must be a power of two, got {n}");
        let bits = n.trailing_zeros();
        let rev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        let half = n / 2;
        let cos = (0..half).map(|k| (2.0 * PI * k as f64 / n as f64).cos()).collect();
        let sin = (0..half).map(|k| (2.0 * PI * k as f64 / n as f64).sin()).collect();
        Self { n, cos, sin, rev }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place complex transform. `inverse` uses `exp(+2πi mk/n)` and scales by `1/n`.
    pub fn transform(&self, re: &mut [f64], im: &mut [f64], inverse: bool) {
        let n = self.n;
        debug_assert_eq!(re.len(), n);
        debug_assert_eq!(im.len(), n);
        for i in 0..n {
            let j = self.rev[i];
            if i < j {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let sign = if inverse { 1.0 } else { -1.0 };
        let mut size = 2;
        while size <= n {
            let half = size / 2;
            let stride = n / size;
            for start in (0..n).step_by(size) {
                for k in 0..half {
                    let wr = self.cos[k * stride];
                    let wi = sign * self.sin[k * stride];
                    let a = start + k;
                    let b = a + half;
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            size *= 2;
        }
        if inverse {
            let scale = 1.0 / n as f64;
            re.iter_mut().for_each(|v| *v *= scale);
            im.iter_mut().for_each(|v| *v *= scale);
        }
    }

    /// One-sided forward transform of `x`, zero-padded to the plan size.
    pub fn rfft(&self, x: &[f64]) -> ComplexVector {
        assert!(x.len() <= self.n);
        let mut re = vec![0.0; self.n];
        let mut im = vec![0.0; self.n];
        re[..x.len()].copy_from_slice(x);
        self.transform(&mut re, &mut im, false);
        let bins = half_bins(self.n);
        re.truncate(bins);
        im.truncate(bins);
        ComplexVector { re, im }
    }

    /// Forward transforms of two real signals with one complex FFT.
    pub fn rfft_pair(&self, x: &[f64], y: &[f64]) -> (ComplexVector, ComplexVector) {
        let n = self.n;
        let mut re = vec![0.0; n];
        let mut im = vec![0.0; n];
        re[..x.len()].copy_from_slice(x);
        im[..y.len()].copy_from_slice(y);
        self.transform(&mut re, &mut im, false);
        let bins = half_bins(n);
        let mut a = ComplexVector::zeros(bins);
        let mut b = ComplexVector::zeros(bins);
        for m in 0..bins {
            let k = (n - m) % n;
            let (zr, zi) = (re[m], im[m]);
            let (cr, ci) = (re[k], -im[k]);
            a.re[m] = 0.5 * (zr + cr);
            a.im[m] = 0.5 * (zi + ci);
            // (z - conj) / 2i
            b.re[m] = 0.5 * (zi - ci);
            b.im[m] = -0.5 * (zr - cr);
        }
        (a, b)
    }

    /// Inverse of [`FftPlan::rfft`]; returns all `n` samples.
    pub fn irfft(&self, spec: &ComplexVector) -> Vec<f64> {
        let n = self.n;
        let bins = half_bins(n);
        debug_assert_eq!(spec.len(), bins);
        let mut re = vec![0.0; n];
        let mut im = vec![0.0; n];
        for m in 0..bins.min(n) {
            re[m] = spec.re[m];
            im[m] = spec.im[m];
        }
        for m in bins..n {
            re[m] = spec.re[n - m];
            im[m] = -spec.im[n - m];
        }
        self.transform(&mut re, &mut im, true);
        re
    }
}

/// One-sided DFT of a real signal, zero-padded to the next power of two.
pub fn fft_real(signal: &[f64]) -> Result<RealSpectrum> {
    if signal.is_empty() {
        return Err(Error::EmptySignal);
    }
    let n = padded_len(signal.len());
    let bins = FftPlan::new(n).rfft(signal);
    Ok(RealSpectrum {
        bins,
        padded_len: n,
        signal_len: signal.len(),
    })
}

/// Inverse of [`fft_real`]: recovers the first `len` samples.
pub fn ifft_real(spectrum: &ComplexVector, len: usize) -> Result<Vec<f64>> {
    if len == 0 {
        return Err(Error::EmptySignal);
    }
    let n = padded_len(len);
    let expected = half_bins(n);
    if spectrum.len() != expected || spectrum.im.len() != expected {
        return Err(Error::BinCount {
            expected,
            got: spectrum.len(),
            len,
        });
    }
    let mut out = FftPlan::new(n).irfft(spectrum);
    out.truncate(len);
    Ok(out)
}
