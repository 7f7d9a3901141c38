//! Time- and frequency-domain profiling of learned convolution kernels.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::fft_real;
use crate::s4d::Kernel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterThresholds {
    pub low_cut: f64,
    pub high_cut: f64,
    /// Broadband when `H ≥ broadband_entropy · ln(bins)`.
    pub broadband_entropy: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self {
            low_cut: 0.05,
            high_cut: 0.35,
            broadband_entropy: 0.85,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    /// Sharp transition when `|ΔK| > mean + k·std` of all `|ΔK|`.
    pub sharpness_k: f64,
    pub secondary_threshold: f64,
    pub filter: FilterThresholds,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            sharpness_k: 2.0,
            secondary_threshold: 0.30,
            filter: FilterThresholds::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Difference `K[index + 1] − K[index]`.
    pub index: usize,
    pub diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeProfile {
    pub length: usize,
    pub max_pos: f64,
    pub max_pos_index: usize,
    pub max_neg: f64,
    pub max_neg_index: usize,
    pub diffs: Vec<f64>,
    pub sharp_threshold: f64,
    pub sharp_transitions: Vec<Transition>,
}

/// Peaks and first-difference transitions of one kernel row.
///
/// Peak ties resolve to the lowest index. The threshold uses the
/// population standard deviation of `|ΔK|`.
pub fn time_profile(kernel: &[f64], sharpness_k: f64) -> Result<TimeProfile> {
    if kernel.len() < 2 {
        return Err(Error::InvalidConfig(format!("kernel length {} < 2", kernel.len())));
    }
    if kernel.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "time_profile" });
    }
    let (mut max_pos_index, mut max_neg_index) = (0, 0);
    for (i, &v) in kernel.iter().enumerate() {
        if v > kernel[max_pos_index] {
            max_pos_index = i;
        }
        if v < kernel[max_neg_index] {
            max_neg_index = i;
        }
    }
    let diffs: Vec<f64> = kernel.windows(2).map(|w| w[1] - w[0]).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().map(|d| d.abs()).sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d.abs() - mean).powi(2)).sum::<f64>() / n;
    let sharp_threshold = mean + sharpness_k * var.sqrt();
    let sharp_transitions = diffs
        .iter()
        .enumerate()
        .filter(|(_, d)| d.abs() > sharp_threshold)
        .map(|(index, &diff)| Transition { index, diff })
        .collect();
    Ok(TimeProfile {
        length: kernel.len(),
        max_pos: kernel[max_pos_index],
        max_pos_index,
        max_neg: kernel[max_neg_index],
        max_neg_index,
        diffs,
        sharp_threshold,
        sharp_transitions,
    })
}

/// Normalized one-sided power spectrum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub padded_len: usize,
    /// `m / padded_len`, cycles per sample.
    pub frequencies: Vec<f64>,
    pub psd: Vec<f64>,
}

impl Spectrum {
    pub fn bins(&self) -> usize {
        self.psd.len()
    }
}

pub fn spectrum(kernel: &[f64]) -> Result<Spectrum> {
    if kernel.len() < 2 {
        return Err(Error::InvalidConfig(format!("kernel length {} < 2", kernel.len())));
    }
    let spec = fft_real(kernel)?;
    let power: Vec<f64> = (0..spec.bins.len()).map(|m| spec.bins.norm_sqr(m)).collect();
    let total: f64 = power.iter().sum();
    if !total.is_finite() {
        return Err(Error::NonFinite { op: "spectrum" });
    }
    if total == 0.0 {
        return Err(Error::ZeroEnergyKernel);
    }
    Ok(Spectrum {
        padded_len: spec.padded_len,
        frequencies: spec.frequencies(),
        psd: power.into_iter().map(|p| p / total).collect(),
    })
}

fn check_normalized(psd: &[f64]) -> Result<()> {
    let s: f64 = psd.iter().sum();
    if (s - 1.0).abs() > 1e-6 || psd.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::Unnormalized(s));
    }
    Ok(())
}

/// `−Σ P ln P` in nats, with `0 ln 0 = 0`.
pub fn spectral_entropy(psd: &[f64]) -> Result<f64> {
    check_normalized(psd)?;
    Ok(-psd.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub bin: usize,
    pub frequency: f64,
    pub power: f64,
}

/// Dominant bin (lowest index on ties) and the strict local maxima whose
/// power is at least `threshold` times the dominant power, strongest first.
/// The DC bin never counts as secondary; the last bin needs only to exceed
/// its single neighbour.
pub fn dominant_and_secondary(spectrum: &Spectrum, threshold: f64) -> (Peak, Vec<Peak>) {
    let p = &spectrum.psd;
    let peak = |bin: usize| Peak {
        bin,
        frequency: spectrum.frequencies[bin],
        power: p[bin],
    };
    let mut dom = 0;
    for (m, &v) in p.iter().enumerate() {
        if v > p[dom] {
            dom = m;
        }
    }
    let gate = threshold * p[dom];
    let last = p.len() - 1;
    let mut secondary: Vec<Peak> = (1..p.len())
        .filter(|&m| m != dom)
        .filter(|&m| p[m] > p[m - 1] && (m == last || p[m] > p[m + 1]))
        .filter(|&m| p[m] >= gate)
        .map(peak)
        .collect();
    secondary.sort_by(|a, b| b.power.total_cmp(&a.power).then(a.bin.cmp(&b.bin)));
    (peak(dom), secondary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumProfile {
    pub padded_len: usize,
    pub frequencies: Vec<f64>,
    pub psd: Vec<f64>,
    pub dominant: Peak,
    pub secondary: Vec<Peak>,
    pub entropy: f64,
}

impl SpectrumProfile {
    pub fn from_spectrum(s: Spectrum, threshold: f64) -> Result<Self> {
        let entropy = spectral_entropy(&s.psd)?;
        let (dominant, secondary) = dominant_and_secondary(&s, threshold);
        Ok(Self {
            padded_len: s.padded_len,
            frequencies: s.frequencies,
            psd: s.psd,
            dominant,
            secondary,
            entropy,
        })
    }

    pub fn bins(&self) -> usize {
        self.psd.len()
    }

    pub fn max_entropy(&self) -> f64 {
        (self.bins() as f64).ln()
    }
}

pub fn spectrum_profile(kernel: &[f64], threshold: f64) -> Result<SpectrumProfile> {
    SpectrumProfile::from_spectrum(spectrum(kernel)?, threshold)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterClass {
    LowPass,
    BandPass,
    HighPass,
    Broadband,
}

impl FilterClass {
    pub fn label(self) -> &'static str {
        match self {
            FilterClass::LowPass => "low-pass",
            FilterClass::BandPass => "band-pass",
            FilterClass::HighPass => "high-pass",
            FilterClass::Broadband => "broadband",
        }
    }
}

impl fmt::Display for FilterClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// First matching rule wins: low-pass, high-pass, broadband, band-pass.
pub fn classify_filter(profile: &SpectrumProfile, t: &FilterThresholds) -> FilterClass {
    let mass = |keep: &dyn Fn(f64) -> bool| -> f64 {
        profile
            .frequencies
            .iter()
            .zip(&profile.psd)
            .filter(|(f, _)| keep(**f))
            .map(|(_, p)| p)
            .sum()
    };
    let dom = profile.dominant.frequency;
    if dom < t.low_cut && mass(&|f| f < t.low_cut) >= 0.5 {
        FilterClass::LowPass
    } else if dom > t.high_cut && mass(&|f| f > t.high_cut) >= 0.5 {
        FilterClass::HighPass
    } else if profile.entropy >= t.broadband_entropy * profile.max_entropy() {
        FilterClass::Broadband
    } else {
        FilterClass::BandPass
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub channel: usize,
    pub time: TimeProfile,
    /// Absent for an all-zero row.
    pub spectrum: Option<SpectrumProfile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateProfile {
    /// `Σ_h w_h K_h` with `w_h ∝ ‖K_h‖²`.
    pub mean_kernel: Vec<f64>,
    pub mean_kernel_time: TimeProfile,
    /// Absent when the weighted channels cancel exactly.
    pub mean_kernel_spectrum: Option<SpectrumProfile>,
    /// Renormalized mean of the per-channel PSDs.
    pub mean_psd: SpectrumProfile,
}

/// Both channel aggregates. Zero-energy rows are left out of the PSD mean.
pub fn aggregate_channels(kernel: &Kernel, cfg: &AnalysisConfig) -> Result<AggregateProfile> {
    let energies: Vec<f64> = kernel.rows().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let total: f64 = energies.iter().sum();
    if total == 0.0 {
        return Err(Error::ZeroEnergyKernel);
    }
    let mut mean_kernel = vec![0.0; kernel.len];
    for (row, &e) in kernel.rows().zip(&energies) {
        let w = e / total;
        for (m, v) in mean_kernel.iter_mut().zip(row) {
            *m += w * v;
        }
    }
    let mean_kernel_time = time_profile(&mean_kernel, cfg.sharpness_k)?;
    let mean_kernel_spectrum = match spectrum_profile(&mean_kernel, cfg.secondary_threshold) {
        Ok(s) => Some(s),
        Err(Error::ZeroEnergyKernel) => None,
        Err(e) => return Err(e),
    };

    let mut acc: Option<Spectrum> = None;
    for (row, &e) in kernel.rows().zip(&energies) {
        if e == 0.0 {
            continue;
        }
        let s = spectrum(row)?;
        match &mut acc {
            None => acc = Some(s),
            Some(a) => a.psd.iter_mut().zip(&s.psd).for_each(|(x, y)| *x += y),
        }
    }
    let mut acc = acc.ok_or(Error::ZeroEnergyKernel)?;
    let s: f64 = acc.psd.iter().sum();
    acc.psd.iter_mut().for_each(|p| *p /= s);
    Ok(AggregateProfile {
        mean_kernel,
        mean_kernel_time,
        mean_kernel_spectrum,
        mean_psd: SpectrumProfile::from_spectrum(acc, cfg.secondary_threshold)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelReport {
    pub arch: String,
    pub checkpoint: String,
    pub channels: usize,
    pub kernel_len: usize,
    pub config: AnalysisConfig,
    pub channel_reports: Vec<ChannelReport>,
    pub aggregate: AggregateProfile,
    /// Label of the mean-PSD aggregate.
    pub filter_class: FilterClass,
}

impl KernelReport {
    pub fn dominant_frequency(&self) -> f64 {
        self.aggregate.mean_psd.dominant.frequency
    }

    pub fn entropy(&self) -> f64 {
        self.aggregate.mean_psd.entropy
    }
}

pub fn analyze_kernel(kernel: &Kernel, arch: &str, checkpoint: &str, cfg: &AnalysisConfig) -> Result<KernelReport> {
    if kernel.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "analyze_kernel" });
    }
    let mut channel_reports = Vec::with_capacity(kernel.channels);
    for (channel, row) in kernel.rows().enumerate() {
        let spectrum = match spectrum_profile(row, cfg.secondary_threshold) {
            Ok(s) => Some(s),
            Err(Error::ZeroEnergyKernel) => None,
            Err(e) => return Err(e),
        };
        channel_reports.push(ChannelReport {
            channel,
            time: time_profile(row, cfg.sharpness_k)?,
            spectrum,
        });
    }
    let aggregate = aggregate_channels(kernel, cfg)?;
    let filter_class = classify_filter(&aggregate.mean_psd, &cfg.filter);
    Ok(KernelReport {
        arch: arch.to_string(),
        checkpoint: checkpoint.to_string(),
        channels: kernel.channels,
        kernel_len: kernel.len,
        config: *cfg,
        channel_reports,
        aggregate,
        filter_class,
    })
}

/// `index,value,is_pos_peak,is_neg_peak,is_sharp_transition`
pub fn write_time_csv(w: &mut impl Write, kernel: &[f64], profile: &TimeProfile) -> Result<()> {
    writeln!(w, "index,value,is_pos_peak,is_neg_peak,is_sharp_transition")?;
    for (i, v) in kernel.iter().enumerate() {
        let sharp = profile.sharp_transitions.iter().any(|t| t.index == i);
        writeln!(
            w,
            "{i},{v},{},{},{}",
            (i == profile.max_pos_index) as u8,
            (i == profile.max_neg_index) as u8,
            sharp as u8
        )?;
    }
    Ok(())
}

/// `freq,psd,is_dominant,is_secondary`
pub fn write_spectrum_csv(w: &mut impl Write, profile: &SpectrumProfile) -> Result<()> {
    writeln!(w, "freq,psd,is_dominant,is_secondary")?;
    for (m, (f, p)) in profile.frequencies.iter().zip(&profile.psd).enumerate() {
        let sec = profile.secondary.iter().any(|s| s.bin == m);
        writeln!(w, "{f},{p},{},{}", (m == profile.dominant.bin) as u8, sec as u8)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn small_time_profile() {
        let t = time_profile(&[0.0, 3.0, -1.0], 2.0).unwrap();
        assert_eq!((t.max_pos, t.max_pos_index), (3.0, 1));
        assert_eq!((t.max_neg, t.max_neg_index), (-1.0, 2));
        assert_eq!(t.diffs, vec![3.0, -4.0]);
    }

    #[test]
    fn constant_kernel_has_no_transitions() {
        let t = time_profile(&[0.7; 10], 2.0).unwrap();
        assert!(t.sharp_transitions.is_empty());
    }

    #[test]
    fn short_kernel_rejected() {
        assert!(time_profile(&[1.0], 2.0).is_err());
        assert!(spectrum(&[1.0]).is_err());
    }

    #[test]
    fn reports_given_extrema() {
        let mut k = vec![0.1; 32];
        k[4] = 2.6;
        k[9] = -6.2;
        let t = time_profile(&k, 2.0).unwrap();
        assert_eq!((t.max_pos, t.max_neg), (2.6, -6.2));
    }

    #[test]
    fn pure_tone_dominant() {
        let k: Vec<f64> = (0..64).map(|l| (2.0 * PI * 0.25 * l as f64).cos()).collect();
        let p = spectrum_profile(&k, 0.3).unwrap();
        assert_eq!(p.dominant.frequency, 0.25);
        assert!((p.psd.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_kernel_errors() {
        assert!(matches!(spectrum(&[0.0; 8]), Err(Error::ZeroEnergyKernel)));
    }

    #[test]
    fn entropy_extremes() {
        let mut one_hot = vec![0.0; 129];
        one_hot[7] = 1.0;
        assert_eq!(spectral_entropy(&one_hot).unwrap(), 0.0);
        let uniform = vec![1.0 / 129.0; 129];
        assert!((spectral_entropy(&uniform).unwrap() - 129f64.ln()).abs() < 1e-9);
        assert!(matches!(spectral_entropy(&[0.5, 0.2]), Err(Error::Unnormalized(_))));
    }

    fn two_tones(ratio: f64) -> Vec<f64> {
        let a = ratio.sqrt();
        (0..128)
            .map(|l| {
                let l = l as f64;
                (2.0 * PI * 0.125 * l).cos() + a * (2.0 * PI * 0.3125 * l).cos()
            })
            .collect()
    }

    #[test]
    fn secondary_peak_gate() {
        let p = spectrum_profile(&two_tones(0.5), 0.3).unwrap();
        assert_eq!(p.dominant.frequency, 0.125);
        assert_eq!(p.secondary.len(), 1);
        assert_eq!(p.secondary[0].frequency, 0.3125);
        let p = spectrum_profile(&two_tones(0.2), 0.3).unwrap();
        assert!(p.secondary.is_empty());
    }

    #[test]
    fn one_hot_has_no_secondary() {
        let s = Spectrum {
            padded_len: 8,
            frequencies: (0..5).map(|m| m as f64 / 8.0).collect(),
            psd: vec![0.0, 0.0, 1.0, 0.0, 0.0],
        };
        let (d, sec) = dominant_and_secondary(&s, 0.3);
        assert_eq!(d.bin, 2);
        assert!(sec.is_empty());
    }

    fn profile_at(dominant: f64, psd: Vec<f64>) -> SpectrumProfile {
        let n = psd.len();
        let freqs: Vec<f64> = (0..n).map(|m| m as f64 / (2 * (n - 1)) as f64).collect();
        let bin = freqs.iter().position(|&f| f >= dominant).unwrap();
        SpectrumProfile::from_spectrum(
            Spectrum {
                padded_len: 2 * (n - 1),
                frequencies: freqs,
                psd,
            },
            0.3,
        )
        .map(|p| {
            assert_eq!(p.dominant.bin, bin);
            p
        })
        .unwrap()
    }

    fn bump(n: usize, center: usize, width: f64) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|m| (-((m as f64 - center as f64) / width).powi(2)).exp()).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    #[test]
    fn filter_labels() {
        let t = FilterThresholds::default();
        // 129 bins, bin m ↔ m/256 cycles/sample.
        let low = profile_at(5.0 / 256.0, bump(129, 5, 3.0));
        assert!((low.dominant.frequency - 0.0195).abs() < 1e-3);
        assert_eq!(classify_filter(&low, &t), FilterClass::LowPass);
        let band = profile_at(46.0 / 256.0, bump(129, 46, 6.0));
        assert_eq!(classify_filter(&band, &t), FilterClass::BandPass);
        let flat = profile_at(0.0, vec![1.0 / 129.0; 129]);
        assert_eq!(classify_filter(&flat, &t), FilterClass::Broadband);
        let high = profile_at(120.0 / 256.0, bump(129, 120, 4.0));
        assert_eq!(classify_filter(&high, &t), FilterClass::HighPass);
    }

    #[test]
    fn single_channel_aggregate_matches_channel() {
        let row: Vec<f64> = (0..16).map(|l| 0.9f64.powi(l) * (0.7 * l as f64).sin()).collect();
        let k = Kernel::new(1, 16, row.clone()).unwrap();
        let a = aggregate_channels(&k, &AnalysisConfig::default()).unwrap();
        let direct = spectrum_profile(&row, 0.3).unwrap();
        for (x, y) in a.mean_psd.psd.iter().zip(&direct.psd) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(a.mean_kernel, row);
    }

    #[test]
    fn csv_headers() {
        let k = [0.0, 1.0, 0.5, 0.25];
        let t = time_profile(&k, 2.0).unwrap();
        let mut buf = Vec::new();
        write_time_csv(&mut buf, &k, &t).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("index,value,is_pos_peak,is_neg_peak,is_sharp_transition\n0,0,0,1,0\n1,1,1,0,0\n"));
        let p = spectrum_profile(&k, 0.3).unwrap();
        let mut buf = Vec::new();
        write_spectrum_csv(&mut buf, &p).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("freq,psd,is_dominant,is_secondary\n0,"));
    }
}
