//! Frequency-domain scoring of generated sequences.

use std::f64::consts::TAU;

use rand::Rng as _;
use rustfft::FftPlanner;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::signal::{self, SignalConfig};

/// `|X_k|` for bins `k = 0..=N/2` of the DFT of a real sequence.
pub fn one_sided_magnitudes(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf.truncate(x.len() / 2 + 1);
    buf.into_iter().map(|c| c.norm()).collect()
}

/// Frequency (Hz) of the largest-magnitude DFT bin in `[0, N/2]`.
/// Ties resolve toward the lower bin, so an all-zero input maps to 0 Hz.
pub fn dominant_frequency(x: &[f64], fs: u32) -> f64 {
    let mags = one_sided_magnitudes(x);
    let mut best = 0;
    for (k, m) in mags.iter().enumerate() {
        if *m > mags[best] {
            best = k;
        }
    }
    if x.is_empty() {
        return 0.0;
    }
    best as f64 * f64::from(fs) / x.len() as f64
}

/// Per-window frequency errors of a set of generations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralScore {
    /// `(f_true, f_hat, squared error)` per window.
    pub per_window: Vec<(f64, f64, f64)>,
    pub mse: f64,
    pub rmse: f64,
}

impl SpectralScore {
    pub fn squared_errors(&self) -> Vec<f64> {
        self.per_window.iter().map(|p| p.2).collect()
    }
}

pub fn spectral_rmse(pairs: &[(f64, f64)]) -> Result<SpectralScore> {
    if pairs.is_empty() {
        return Err(Error::domain("spectral RMSE of an empty list"));
    }
    let per_window: Vec<(f64, f64, f64)> = pairs
        .iter()
        .map(|&(f, fh)| (f, fh, (f - fh).powi(2)))
        .collect();
    let mse = per_window.iter().map(|p| p.2).sum::<f64>() / pairs.len() as f64;
    Ok(SpectralScore {
        per_window,
        mse,
        rmse: mse.sqrt(),
    })
}

/// RMSE when every generation collapses to 0 Hz over the integers `lo..=hi`.
pub fn collapse_bound(lo: u32, hi: u32) -> f64 {
    let pairs: Vec<(f64, f64)> = (lo..=hi).map(|f| (f64::from(f), 0.0)).collect();
    spectral_rmse(&pairs).map(|s| s.rmse).unwrap_or(0.0)
}

/// Largest sample size for which the exact null distribution is used.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

/// Two-sided paired Wilcoxon signed-rank test of `a - b`.
///
/// Zero differences are dropped and tied magnitudes share their average rank.
/// Up to [`WILCOXON_EXACT_MAX_N`] non-zero pairs the p-value comes from the
/// exact null distribution of `W+`; above that a tie-corrected normal
/// approximation (no continuity correction) is used. With no non-zero
/// difference the p-value is 1.
pub fn wilcoxon_paired_two_sided(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numerical("non-finite paired difference".into()));
    }
    let n = diffs.len();
    if n == 0 {
        return Ok(1.0);
    }

    // Doubled average ranks keep everything integral.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().total_cmp(&diffs[j].abs()));
    let mut ranks2 = vec![0u64; n];
    let mut tie_term = 0.0;
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end + 1 < n && diffs[order[end + 1]].abs() == diffs[order[start]].abs() {
            end += 1;
        }
        // Ranks start+1..=end+1, average doubled = start + end + 2.
        let r2 = (start + end + 2) as u64;
        for &idx in &order[start..=end] {
            ranks2[idx] = r2;
        }
        let t = (end - start + 1) as f64;
        tie_term += t * t * t - t;
        start = end + 1;
    }
    let w_plus2: u64 = (0..n).filter(|&i| diffs[i] > 0.0).map(|i| ranks2[i]).sum();

    if n <= WILCOXON_EXACT_MAX_N {
        let total2: u64 = ranks2.iter().sum();
        let mut counts = vec![0f64; total2 as usize + 1];
        counts[0] = 1.0;
        let mut reach = 0usize;
        for &r in &ranks2 {
            let r = r as usize;
            for s in (0..=reach).rev() {
                if counts[s] != 0.0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let all = 2f64.powi(n as i32);
        let w = w_plus2 as usize;
        let lower: f64 = counts[..=w].iter().sum::<f64>() / all;
        let upper: f64 = counts[w..].iter().sum::<f64>() / all;
        Ok((2.0 * lower.min(upper)).min(1.0))
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        if !(var > 0.0) {
            return Ok(1.0);
        }
        let z = (w_plus2 as f64 / 2.0 - mean) / var.sqrt();
        let normal = Normal::standard();
        Ok((2.0 * normal.sf(z.abs())).min(1.0))
    }
}

/// Significance flag used in the erasure table.
pub fn is_significant(p_value: f64, alpha: f64) -> bool {
    p_value < alpha
}

/// Anything that continues a context for `total` samples.
pub trait SequenceGenerator {
    fn generate(&self, context: &[f64], total: usize) -> Result<Vec<f64>>;
}

impl<G: SequenceGenerator + ?Sized> SequenceGenerator for &G {
    fn generate(&self, context: &[f64], total: usize) -> Result<Vec<f64>> {
        (**self).generate(context, total)
    }
}

/// One point of the input/output frequency curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IoPoint {
    pub f: u32,
    pub mean_fhat: f64,
    pub std_fhat: f64,
}

/// Dominant generated frequency per input frequency, aggregated over
/// `n_windows` random-phase contexts (population std).
pub fn input_output_curve<G: SequenceGenerator>(
    generator: &G,
    cfg: &SignalConfig,
    frequencies: &[u32],
    n_windows: usize,
    seed: u64,
) -> Result<Vec<IoPoint>> {
    if n_windows == 0 {
        return Err(Error::domain("input/output curve needs at least one window"));
    }
    let mut r = rng::rng(seed);
    frequencies
        .iter()
        .map(|&f| {
            let fhats = (0..n_windows)
                .map(|_| {
                    let phase = r.random_range(0.0..TAU);
                    let context = signal::make_sinusoid(f, cfg.fs, cfg.window_len, phase)?;
                    let generated = generator.generate(&context, cfg.window_len)?;
                    Ok(dominant_frequency(&generated, cfg.fs))
                })
                .collect::<Result<Vec<f64>>>()?;
            let n = fhats.len() as f64;
            let mean = fhats.iter().sum::<f64>() / n;
            let var = fhats.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            Ok(IoPoint {
                f,
                mean_fhat: mean,
                std_fhat: var.sqrt(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::make_sinusoid;

    fn naive_dft_magnitudes(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..=n / 2)
            .map(|k| {
                let (re, im) = x.iter().enumerate().fold((0.0, 0.0), |(re, im), (t, v)| {
                    let ang = -TAU * (k * t) as f64 / n as f64;
                    (re + v * ang.cos(), im + v * ang.sin())
                });
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    #[test]
    fn fft_matches_direct_dft() {
        let x: Vec<f64> = (0..64).map(|i| ((i * 7 % 13) as f64).sin()).collect();
        for (a, b) in one_sided_magnitudes(&x).iter().zip(naive_dft_magnitudes(&x)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn dominant_frequency_examples() {
        let x = make_sinusoid(10, 512, 512, 0.0).unwrap();
        assert_eq!(dominant_frequency(&x, 512), 10.0);
        assert_eq!(dominant_frequency(&[0.0; 512], 512), 0.0);
        let a = make_sinusoid(20, 512, 512, 0.0).unwrap();
        let b = make_sinusoid(40, 512, 512, 0.0).unwrap();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(u, v)| 0.3 * u + v).collect();
        assert_eq!(dominant_frequency(&mix, 512), 40.0);
    }

    #[test]
    fn rmse_examples() {
        let exact = spectral_rmse(&[(5.0, 5.0), (9.0, 9.0)]).unwrap();
        assert_eq!((exact.mse, exact.rmse), (0.0, 0.0));
        let one = spectral_rmse(&[(10.0, 12.0)]).unwrap();
        assert_eq!((one.mse, one.rmse), (4.0, 2.0));
        assert!(spectral_rmse(&[]).is_err());
        assert!((collapse_bound(2, 250) - 145.06).abs() < 0.01);
    }

    #[test]
    fn wilcoxon_examples() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(wilcoxon_paired_two_sided(&a, &a).unwrap(), 1.0);
        let b = [0.0, 0.0, 0.0, 0.0, 0.0];
        assert!((wilcoxon_paired_two_sided(&a, &b).unwrap() - 0.0625).abs() < 1e-12);
        assert!(wilcoxon_paired_two_sided(&a, &b[..4]).is_err());
    }

    #[test]
    fn wilcoxon_large_sample_uses_normal_approximation() {
        // 30 positive differences 1..=30: W+ = 465, z = 232.5 / sqrt(2363.75).
        let a: Vec<f64> = (1..=30).map(f64::from).collect();
        let b = vec![0.0; 30];
        let p = wilcoxon_paired_two_sided(&a, &b).unwrap();
        let z: f64 = 232.5 / 2363.75f64.sqrt();
        let expected = 2.0 * Normal::standard().sf(z);
        assert!((p - expected).abs() < 1e-15);
        assert!(p < 1e-5);
    }

    struct Echo;
    impl SequenceGenerator for Echo {
        fn generate(&self, context: &[f64], total: usize) -> Result<Vec<f64>> {
            // T = fs, so every integer-Hz context holds whole periods.
            Ok(context.iter().copied().cycle().take(total).collect())
        }
    }

    struct Silent;
    impl SequenceGenerator for Silent {
        fn generate(&self, _context: &[f64], total: usize) -> Result<Vec<f64>> {
            Ok(vec![0.0; total])
        }
    }

    #[test]
    fn io_curve_oracles() {
        let cfg = SignalConfig::default();
        let freqs = [2, 17, 100, 250];
        let ideal = input_output_curve(&Echo, &cfg, &freqs, 3, 0).unwrap();
        for p in &ideal {
            assert_eq!(p.mean_fhat, f64::from(p.f));
            assert_eq!(p.std_fhat, 0.0);
        }
        let flat = input_output_curve(&Silent, &cfg, &freqs, 3, 0).unwrap();
        assert!(flat.iter().all(|p| p.mean_fhat == 0.0 && p.std_fhat == 0.0));
    }
}
