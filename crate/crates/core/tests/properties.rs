use std::f64::consts::TAU;

use freqprobe::eraser;
use freqprobe::probe::{self, Batch, PrequentialAudit, ProbeConfig, ProbeTarget};
use freqprobe::signal::{self, SignalConfig, SplitRatios, TaskName};
use freqprobe::spectral;
use freqprobe::store::{ActivationSet, TapId};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Correlated features with a planted linear concept.
fn planted(seed: u64, n: usize, d: usize) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let mix = Array2::from_shape_fn((d, d), |_| rng.random_range(-1.0..1.0));
    let z = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    let mut h = z.dot(&mix);
    let dir: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    for (i, mut row) in h.rows_mut().into_iter().enumerate() {
        for (v, u) in row.iter_mut().zip(&dir) {
            *v += y[i] * u + 3.0;
        }
    }
    (h, Array2::from_shape_vec((n, 1), y).unwrap())
}

fn covariance(h: &Array2<f64>) -> DMatrix<f64> {
    let n = h.nrows() as f64;
    let mean = h.mean_axis(ndarray::Axis(0)).unwrap();
    let c = h - &mean;
    let s = c.t().dot(&c) / n;
    DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| s[[i, j]])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn predictability_is_scale_invariant(f in 2u32..=250, phase in 0.0..TAU, c in prop_oneof![-1e3..-1e-3, 1e-3..1e3]) {
        let x = signal::make_sinusoid(f, 512, 512, phase).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from(f));
        let noisy: Vec<f64> = x.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
        let scaled: Vec<f64> = noisy.iter().map(|v| v * c).collect();
        let a = signal::spectral_predictability(&noisy).unwrap();
        let b = signal::spectral_predictability(&scaled).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn windows_stay_in_unit_range(f in 2u32..=250, phase in -10.0..10.0f64, len in 1usize..1024) {
        let x = signal::make_sinusoid(f, 512, len, phase).unwrap();
        prop_assert_eq!(x.len(), len);
        prop_assert!(x.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn dominant_frequency_ignores_phase(f in 2u32..=250, a in 0.0..TAU, b in 0.0..TAU) {
        let x = signal::make_sinusoid(f, 512, 512, a).unwrap();
        let y = signal::make_sinusoid(f, 512, 512, b).unwrap();
        prop_assert_eq!(spectral::dominant_frequency(&x, 512), spectral::dominant_frequency(&y, 512));
    }

    #[test]
    fn rmse_ignores_pair_order(
        pairs in prop::collection::vec((2.0..250.0f64, 0.0..256.0f64), 1..60),
        seed in any::<u64>(),
    ) {
        let mut shuffled = pairs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let a = spectral::spectral_rmse(&pairs).unwrap().rmse;
        let b = spectral::spectral_rmse(&shuffled).unwrap().rmse;
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn collapse_identity(lo in 1u32..200, span in 0u32..100) {
        let hi = lo + span;
        let pairs: Vec<(f64, f64)> = (lo..=hi).map(|f| (f64::from(f), 0.0)).collect();
        let sq: f64 = (lo..=hi).map(|f| f64::from(f).powi(2)).sum();
        let expected = (sq / f64::from(hi - lo + 1)).sqrt();
        prop_assert!((spectral::spectral_rmse(&pairs).unwrap().rmse - expected).abs() <= 1e-9 * expected);
        prop_assert!((spectral::collapse_bound(lo, hi) - expected).abs() <= 1e-9 * expected);
    }

    #[test]
    fn phase_shift_count_respects_cap(f in 2u32..=250, cap in 0usize..600) {
        let full = signal::count_phase_shifts(f, 512, usize::MAX).unwrap();
        prop_assert_eq!(signal::count_phase_shifts(f, 512, cap).unwrap(), full.min(cap));
        let g = num_gcd(f, 512);
        prop_assert_eq!(full, (512 / g - 1) as usize);
    }

    #[test]
    fn space_saving_decreases_with_codelength(u in 1.0..1e5f64, a in 0.0..1.0f64, b in 0.0..1.0f64) {
        let (lo, hi) = if a < b { (a * u, b * u) } else { (b * u, a * u) };
        prop_assert!(probe::space_saving(lo, u).unwrap() >= probe::space_saving(hi, u).unwrap());
        prop_assert_eq!(probe::space_saving(u, u).unwrap(), 0.0);
    }
}

fn num_gcd(a: u32, b: u32) -> u32 {
    if b == 0 { a } else { num_gcd(b, a % b) }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn leace_is_scale_equivariant(seed in any::<u64>(), c in 0.01..100.0f64) {
        let (h, y) = planted(seed, 400, 6);
        let base = eraser::fit_leace(&h, &y, TapId::Dec0).unwrap().apply_rows(&h).unwrap();
        let hs = &h * c;
        let scaled = eraser::fit_leace(&hs, &y, TapId::Dec0).unwrap().apply_rows(&hs).unwrap();
        let scale = base.iter().fold(0.0f64, |m, v| m.max(v.abs())) * c;
        for (a, b) in base.iter().zip(scaled.iter()) {
            prop_assert!((a * c - b).abs() <= 1e-6 * scale);
        }
    }

    #[test]
    fn leace_guards_and_beats_mean_difference(seed in any::<u64>()) {
        let (h, y) = planted(seed, 300, 5);
        let e = eraser::fit_leace(&h, &y, TapId::Dec1).unwrap();
        let erased = e.apply_rows(&h).unwrap();
        prop_assert!(eraser::guardedness(&erased, &y).unwrap() <= 1e-6);
        let md = eraser::fit_mean_difference(&h, &y, TapId::Dec1).unwrap();
        let md_erased = md.apply_rows(&h).unwrap();
        prop_assert!(eraser::distortion(&h, &erased) <= eraser::distortion(&h, &md_erased) * (1.0 + 1e-9));
        prop_assert_eq!(e.rank_removed, 1);
    }

    #[test]
    fn whitened_projector_keeps_all_but_the_concept(seed in any::<u64>()) {
        let (h, y) = planted(seed, 300, 5);
        let e = eraser::fit_leace(&h, &y, TapId::Out).unwrap();
        // Σ^{-1/2} P Σ^{1/2} should be an orthogonal projection.
        let eig = SymmetricEigen::new(covariance(&h));
        let v = &eig.eigenvectors;
        let root = v * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * v.transpose();
        let inv_root = v * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt())) * v.transpose();
        let p = DMatrix::from_fn(5, 5, |i, j| e.p[[i, j]]);
        let sv = (inv_root * p * root).singular_values();
        let ones = sv.iter().filter(|s| (*s - 1.0).abs() <= 1e-6).count();
        let zeros = sv.iter().filter(|s| s.abs() <= 1e-6).count();
        prop_assert_eq!(ones, 5 - e.rank_removed);
        prop_assert_eq!(zeros, e.rank_removed);
    }
}

fn stream(seed: u64, batches: usize) -> Vec<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batches)
        .map(|_| {
            let labels: Vec<usize> = (0..32).map(|_| rng.random_range(0..3)).collect();
            let features = Array2::from_shape_fn((32, 4), |(i, j)| {
                (labels[i] == j) as u8 as f64 + rng.random_range(-0.5..0.5)
            });
            Batch { features, labels }
        })
        .collect()
}

#[test]
fn every_batch_is_coded_before_it_trains_the_probe() {
    let cfg = ProbeConfig {
        steps_per_batch: 3,
        ..ProbeConfig::default()
    };
    let mut audit = PrequentialAudit::default();
    let data = stream(1, 15);
    let fit = probe::prequential_fit_observed(&data, 3, &cfg, |e| audit.observe(e)).unwrap();
    assert_eq!(audit.violations, 0);
    assert_eq!(audit.evaluations, 15);
    assert!(audit.updates >= 15 * 3);
    assert_eq!(fit.per_batch_bits.len(), 15);
    assert!((fit.per_batch_bits.iter().sum::<f64>() - fit.codelength_bits).abs() < 1e-9);
}

#[test]
fn probe_reports_are_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 600;
    let freqs: Vec<i32> = (0..n).map(|_| rng.random_range(2..=250)).collect();
    let labels: Vec<i32> = freqs.iter().map(|f| i32::from(*f > 126)).collect();
    let features = Array2::from_shape_fn((n, 6), |(i, j)| {
        (freqs[i] as f32 / 250.0) * j as f32 + rng.random_range(-0.2..0.2)
    });
    let set = ActivationSet::new(TapId::Dec3, features, labels, freqs).unwrap();
    let cfg = ProbeConfig {
        seed: 4,
        ..ProbeConfig::default()
    };
    let task = signal::task_by_name(&SignalConfig::default(), TaskName::Mid).unwrap();
    let a = probe::run_probe(&set, &ProbeTarget::Band(task), &cfg, false, None).unwrap();
    let b = probe::run_probe(&set, &ProbeTarget::Band(task), &cfg, false, None).unwrap();
    assert_eq!(a, b);
    let other = ProbeConfig { seed: 5, ..cfg };
    let c = probe::run_probe(&set, &ProbeTarget::Stored, &other, false, None).unwrap();
    assert_ne!(a.codelength_total, c.codelength_total);
}

#[test]
fn probe_datasets_are_pure_functions_of_their_inputs() {
    let cfg = SignalConfig {
        cap: 6,
        ..SignalConfig::default()
    };
    let task = signal::task_by_name(&cfg, TaskName::LH).unwrap();
    let ratios = SplitRatios::default();
    let a = signal::build_probe_dataset(&cfg, &task, 6, &ratios, 3).unwrap();
    let b = signal::build_probe_dataset(&cfg, &task, 6, &ratios, 3).unwrap();
    let c = signal::build_probe_dataset(&cfg, &task, 6, &ratios, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.len(), signal::probe_window_count(&cfg, &task, 6).unwrap());
}
