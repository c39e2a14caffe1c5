//! Controlled sinusoid datasets.
//!
//! Windows are cut from discrete sinusoids `sin(2π f n / fs + φ)` with integer
//! frequencies inside an operational band that stays strictly below Nyquist.
//! Two constructions exist: the probe dataset (stride-1 windows over every
//! non-redundant phase shift of each frequency) and the erasure dataset
//! (uniformly drawn continuous phases).

use std::collections::HashMap;
use std::collections::hash_map::DefaultHasher;
use std::f64::consts::TAU;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use num_integer::Integer;
use rand::Rng as _;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::spectral;

/// Sampling setup shared by every dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalConfig {
    /// Sampling frequency in Hz.
    pub fs: u32,
    /// Window length in samples.
    #[serde(rename = "T")]
    pub window_len: usize,
    pub f_min: u32,
    pub f_max: u32,
    /// Floor applied to the standard deviation during instance normalization.
    pub epsilon: f64,
    /// Cap on the number of phase shifts per frequency.
    pub cap: usize,
    pub seed: u64,
}

impl Default for SignalConfig {
    fn default() -> Self {
        Self {
            fs: 512,
            window_len: 512,
            f_min: 2,
            f_max: 250,
            epsilon: 1e-5,
            cap: 100,
            seed: 0,
        }
    }
}

impl SignalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fs == 0 {
            return Err(Error::config("signal.fs", "must be positive"));
        }
        if self.window_len == 0 {
            return Err(Error::config("signal.T", "must be positive"));
        }
        if self.f_min == 0 || self.f_min > self.f_max {
            return Err(Error::config("signal.f_min", "need 0 < f_min <= f_max"));
        }
        if 2 * u64::from(self.f_max) >= u64::from(self.fs) {
            return Err(Error::config("signal.f_max", "must stay below fs/2"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("signal.epsilon", "must be positive"));
        }
        if self.cap == 0 {
            return Err(Error::config("signal.cap", "must be at least 1"));
        }
        Ok(())
    }

    /// Integer frequencies of the operational band.
    pub fn band(&self) -> impl Iterator<Item = u32> {
        self.f_min..=self.f_max
    }

    pub fn contains(&self, f: u32) -> bool {
        (self.f_min..=self.f_max).contains(&f)
    }
}

/// A length-`T` slice of a sinusoid together with how it was generated.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesWindow {
    pub samples: Vec<f64>,
    pub frequency: u32,
    /// Phase of the first sample, in `[0, 2π)`.
    pub phase: f64,
    pub source_offset: usize,
}

/// Number of non-trivial circular shifts of `sin(2π f n / fs)` that yield a
/// sequence different from the unshifted one, capped at `cap`.
pub fn count_phase_shifts(f: u32, fs: u32, cap: usize) -> Result<usize> {
    if f < 1 || 2 * u64::from(f) >= u64::from(fs) {
        return Err(Error::domain(format!(
            "frequency {f} Hz outside [1, fs/2) for fs = {fs}"
        )));
    }
    if cap == 0 {
        return Err(Error::domain("phase-shift cap must be at least 1"));
    }
    let period = (fs / f.gcd(&fs)) as usize;
    Ok((period - 1).min(cap))
}

/// `sin(2π f n / fs + phase)` for `n = 0..length`.
pub fn make_sinusoid(f: u32, fs: u32, length: usize, phase: f64) -> Result<Vec<f64>> {
    if f < 1 || 2 * u64::from(f) >= u64::from(fs) {
        return Err(Error::domain(format!(
            "frequency {f} Hz outside [1, fs/2) for fs = {fs}"
        )));
    }
    if length == 0 {
        return Err(Error::domain("sinusoid length must be at least 1"));
    }
    let step = TAU * f64::from(f) / f64::from(fs);
    Ok((0..length)
        .map(|n| (step * n as f64 + phase).sin())
        .collect())
}

/// Output of [`instance_normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub values: Vec<f64>,
    pub mu: f64,
    /// Population standard deviation of the input, before flooring.
    pub sigma: f64,
    /// The divisor actually used, `max(sigma, epsilon)`.
    pub scale: f64,
}

impl Normalized {
    pub fn denormalize(&self, x: f64) -> f64 {
        x * self.scale + self.mu
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mu) / self.scale
    }
}

/// Instance standard-score normalization `(x - μ) / max(σ, ε)` with a
/// population-style σ.
pub fn instance_normalize(x: &[f64], epsilon: f64) -> Result<Normalized> {
    if x.is_empty() {
        return Err(Error::domain("cannot normalize an empty vector"));
    }
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let sigma = var.sqrt();
    let scale = sigma.max(epsilon);
    Ok(Normalized {
        values: x.iter().map(|v| (v - mu) / scale).collect(),
        mu,
        sigma,
        scale,
    })
}

/// Names of the seven band-discrimination tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskName {
    LL,
    L,
    LH,
    Mid,
    HL,
    H,
    HH,
}

impl TaskName {
    /// All tasks, ordered by ascending threshold.
    pub const ALL: [TaskName; 7] = [
        TaskName::LL,
        TaskName::L,
        TaskName::LH,
        TaskName::Mid,
        TaskName::HL,
        TaskName::H,
        TaskName::HH,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskName::LL => "LL",
            TaskName::L => "L",
            TaskName::LH => "LH",
            TaskName::Mid => "Mid",
            TaskName::HL => "HL",
            TaskName::H => "H",
            TaskName::HH => "HH",
        }
    }

    pub fn parent(self) -> Option<TaskName> {
        match self {
            TaskName::Mid => None,
            TaskName::L | TaskName::H => Some(TaskName::Mid),
            TaskName::LL | TaskName::LH => Some(TaskName::L),
            TaskName::HL | TaskName::HH => Some(TaskName::H),
        }
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskName::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::domain(format!("unknown task `{s}`")))
    }
}

/// Binary frequency discrimination over `[lo, hi]`: class 1 iff `f > threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandTask {
    pub name: TaskName,
    pub lo: u32,
    pub hi: u32,
    pub threshold: u32,
}

/// Band label of one window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandLabel {
    /// `f <= threshold`.
    Below,
    Above,
    /// Frequency outside the task interval.
    Excluded,
}

impl BandLabel {
    pub fn class(self) -> Option<u8> {
        match self {
            BandLabel::Below => Some(0),
            BandLabel::Above => Some(1),
            BandLabel::Excluded => None,
        }
    }
}

impl BandTask {
    pub fn contains(&self, f: u32) -> bool {
        (self.lo..=self.hi).contains(&f)
    }

    pub fn label(&self, f: u32) -> BandLabel {
        label_window(self, f)
    }
}

pub fn label_window(task: &BandTask, f: u32) -> BandLabel {
    if !task.contains(f) {
        BandLabel::Excluded
    } else if f > task.threshold {
        BandLabel::Above
    } else {
        BandLabel::Below
    }
}

fn midpoint(lo: u32, hi: u32) -> u32 {
    ((f64::from(lo) + f64::from(hi)) / 2.0).round() as u32
}

/// Depth-3 binary partition of `[f_min, f_max]` into the seven tasks, ordered
/// by ascending threshold.
pub fn build_task_hierarchy(f_min: u32, f_max: u32) -> Result<Vec<BandTask>> {
    if f_min >= f_max {
        return Err(Error::domain(format!(
            "task hierarchy needs f_min < f_max, got [{f_min}, {f_max}]"
        )));
    }
    let make = |name, lo, hi| -> Result<BandTask> {
        let threshold = midpoint(lo, hi);
        if !(lo < threshold && threshold < hi) {
            return Err(Error::domain(format!(
                "interval [{f_min}, {f_max}] too narrow to split three levels"
            )));
        }
        Ok(BandTask {
            name,
            lo,
            hi,
            threshold,
        })
    };
    let mid = make(TaskName::Mid, f_min, f_max)?;
    let low = make(TaskName::L, f_min, mid.threshold)?;
    let high = make(TaskName::H, mid.threshold, f_max)?;
    let tasks = vec![
        make(TaskName::LL, low.lo, low.threshold)?,
        low,
        make(TaskName::LH, low.threshold, low.hi)?,
        mid,
        make(TaskName::HL, high.lo, high.threshold)?,
        high,
        make(TaskName::HH, high.threshold, high.hi)?,
    ];
    Ok(tasks)
}

/// Looks up one task of the default hierarchy over `cfg`'s band.
pub fn task_by_name(cfg: &SignalConfig, name: TaskName) -> Result<BandTask> {
    build_task_hierarchy(cfg.f_min, cfg.f_max)?
        .into_iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::domain(format!("task {name} missing from hierarchy")))
}

/// Train/validation/test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            validation: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::domain("split ratios must lie in [0, 1]"));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::domain("split ratios must sum to 1"));
        }
        Ok(())
    }
}

/// Which partition a window belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Split> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Validation),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Windows of one partition with their targets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Partition {
    pub windows: Vec<TimeSeriesWindow>,
    pub labels: Vec<i32>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    fn push(&mut self, window: TimeSeriesWindow, label: i32) {
        self.windows.push(window);
        self.labels.push(label);
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Partition,
    pub validation: Partition,
    pub test: Partition,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All windows in train, validation, test order with their split tag.
    pub fn iter(&self) -> impl Iterator<Item = (Split, &TimeSeriesWindow, i32)> {
        fn tag(split: Split, part: &Partition) -> impl Iterator<Item = (Split, &TimeSeriesWindow, i32)> {
            part.windows
                .iter()
                .zip(part.labels.iter().copied())
                .map(move |(w, y)| (split, w, y))
        }
        tag(Split::Train, &self.train)
            .chain(tag(Split::Validation, &self.validation))
            .chain(tag(Split::Test, &self.test))
    }

    /// Fails when a byte-identical sample vector sits in two partitions.
    pub fn check_unique(&self) -> Result<()> {
        let mut seen: HashMap<u64, Vec<(Split, &TimeSeriesWindow)>> = HashMap::new();
        for (split, window, _) in self.iter() {
            let mut hasher = DefaultHasher::new();
            for v in &window.samples {
                v.to_bits().hash(&mut hasher);
            }
            let bucket = seen.entry(hasher.finish()).or_default();
            for (other_split, other) in bucket.iter() {
                if *other_split != split && bits_equal(&other.samples, &window.samples) {
                    return Err(Error::DuplicateWindow {
                        frequency: window.frequency,
                        offset: window.source_offset,
                    });
                }
            }
            bucket.push((split, window));
        }
        Ok(())
    }
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn split_counts(n: usize, ratios: &SplitRatios) -> (usize, usize) {
    let n_train = ((n as f64) * ratios.train).round() as usize;
    let n_val = (((n as f64) * ratios.validation).round() as usize).min(n - n_train.min(n));
    (n_train.min(n), n_val)
}

fn assign_splits(
    mut items: Vec<(TimeSeriesWindow, i32)>,
    ratios: &SplitRatios,
    seed: u64,
) -> Result<DatasetSplit> {
    let mut rng = rng::rng(seed);
    items.shuffle(&mut rng);
    let (n_train, n_val) = split_counts(items.len(), ratios);
    let mut out = DatasetSplit::default();
    for (i, (window, label)) in items.into_iter().enumerate() {
        let part = if i < n_train {
            &mut out.train
        } else if i < n_train + n_val {
            &mut out.validation
        } else {
            &mut out.test
        };
        part.push(window, label);
    }
    out.check_unique()?;
    Ok(out)
}

/// Stride-1 windows over each frequency's non-redundant phase shifts.
///
/// Every in-band frequency of `task` contributes `S_f` windows cut from a
/// sinusoid of length `T + S_f - 1`; labels follow the task's threshold.
pub fn build_probe_dataset(
    cfg: &SignalConfig,
    task: &BandTask,
    cap: usize,
    ratios: &SplitRatios,
    seed: u64,
) -> Result<DatasetSplit> {
    cfg.validate()?;
    ratios.validate()?;
    let mut items = Vec::new();
    for f in cfg.band().filter(|f| task.contains(*f)) {
        let shifts = count_phase_shifts(f, cfg.fs, cap)?;
        let source = make_sinusoid(f, cfg.fs, cfg.window_len + shifts - 1, 0.0)?;
        let label = task
            .label(f)
            .class()
            .expect("frequency filtered to the task interval");
        let step = TAU * f64::from(f) / f64::from(cfg.fs);
        for offset in 0..shifts {
            items.push((
                TimeSeriesWindow {
                    samples: source[offset..offset + cfg.window_len].to_vec(),
                    frequency: f,
                    phase: (step * offset as f64).rem_euclid(TAU),
                    source_offset: offset,
                },
                i32::from(label),
            ));
        }
    }
    assign_splits(items, ratios, seed)
}

/// Expected window count of [`build_probe_dataset`]: `Σ_f S_f` over the task.
pub fn probe_window_count(cfg: &SignalConfig, task: &BandTask, cap: usize) -> Result<usize> {
    cfg.band()
        .filter(|f| task.contains(*f))
        .map(|f| count_phase_shifts(f, cfg.fs, cap))
        .sum()
}

/// Options of the continuous-phase erasure dataset beyond the signal setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErasureDatasetOptions {
    pub n_phases: usize,
    /// Keep every `frequency_step`-th integer frequency of the band.
    pub frequency_step: u32,
    pub test_fraction: f64,
}

impl Default for ErasureDatasetOptions {
    fn default() -> Self {
        Self {
            n_phases: 100,
            frequency_step: 1,
            test_fraction: 0.3,
        }
    }
}

/// Continuous-phase windows: `n_phases` uniform phases per frequency, each
/// generating a length-`2T` sinusoid whose first `T` samples form the window.
/// Labels are the frequencies in Hz; there is no validation partition.
pub fn build_erasure_dataset(cfg: &SignalConfig, n_phases: usize, seed: u64) -> Result<DatasetSplit> {
    build_erasure_dataset_with(
        cfg,
        &ErasureDatasetOptions {
            n_phases,
            ..ErasureDatasetOptions::default()
        },
        seed,
    )
}

pub fn build_erasure_dataset_with(
    cfg: &SignalConfig,
    opts: &ErasureDatasetOptions,
    seed: u64,
) -> Result<DatasetSplit> {
    cfg.validate()?;
    if opts.n_phases == 0 {
        return Err(Error::domain("n_phases must be at least 1"));
    }
    if opts.frequency_step == 0 {
        return Err(Error::domain("frequency_step must be at least 1"));
    }
    if !(0.0..=1.0).contains(&opts.test_fraction) {
        return Err(Error::domain("test_fraction must lie in [0, 1]"));
    }
    let mut phase_rng = rng::rng(rng::derive_seed(seed, "erasure-phases"));
    let mut items = Vec::new();
    for f in cfg.band().step_by(opts.frequency_step as usize) {
        for _ in 0..opts.n_phases {
            let phase = phase_rng.random_range(0.0..TAU);
            let mut source = make_sinusoid(f, cfg.fs, 2 * cfg.window_len, phase)?;
            source.truncate(cfg.window_len);
            items.push((
                TimeSeriesWindow {
                    samples: source,
                    frequency: f,
                    phase,
                    source_offset: 0,
                },
                f as i32,
            ));
        }
    }
    let ratios = SplitRatios {
        train: 1.0 - opts.test_fraction,
        validation: 0.0,
        test: opts.test_fraction,
    };
    assign_splits(items, &ratios, rng::derive_seed(seed, "erasure-split"))
}

/// Inverted, normalized Shannon entropy of the one-sided power spectrum.
///
/// Returns 1 for a single-bin spectrum and 0 for a flat one; an all-zero
/// input returns 0.
pub fn spectral_predictability(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::domain("spectral predictability of an empty vector"));
    }
    let power: Vec<f64> = spectral::one_sided_magnitudes(x)
        .into_iter()
        .map(|m| m * m)
        .collect();
    let total: f64 = power.iter().sum();
    if power.len() < 2 || !(total > 0.0) {
        return Ok(0.0);
    }
    let entropy: f64 = power
        .iter()
        .map(|p| p / total)
        .filter(|p| *p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok((1.0 - entropy / (power.len() as f64).ln()).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn phase_shift_counts() {
        assert_eq!(count_phase_shifts(32, 512, 100).unwrap(), 15);
        assert_eq!(count_phase_shifts(2, 512, 100).unwrap(), 100);
        assert_eq!(count_phase_shifts(250, 512, 300).unwrap(), 255);
        assert!(count_phase_shifts(256, 512, 100).is_err());
        assert!(count_phase_shifts(0, 512, 100).is_err());
    }

    #[test]
    fn quarter_period_sinusoid() {
        let x = make_sinusoid(128, 512, 4, 0.0).unwrap();
        for (got, want) in x.iter().zip([0.0, 1.0, 0.0, -1.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        assert_eq!(make_sinusoid(2, 512, 1, 0.0).unwrap(), vec![0.0]);
        assert!(make_sinusoid(300, 512, 4, 0.0).is_err());
    }

    #[test]
    fn normalization_examples() {
        let n = instance_normalize(&[5.0; 4], 1e-3).unwrap();
        assert_eq!(n.values, vec![0.0; 4]);
        assert_eq!((n.mu, n.sigma), (5.0, 0.0));

        let n = instance_normalize(&[-1.0, 1.0], 1e-3).unwrap();
        assert_eq!(n.values, vec![-1.0, 1.0]);
        assert_eq!((n.mu, n.sigma), (0.0, 1.0));
        assert!(instance_normalize(&[], 1e-3).is_err());
    }

    #[test]
    fn normalized_sinusoid_moments() {
        let x = make_sinusoid(7, 512, 512, 0.3).unwrap();
        let n = instance_normalize(&x, 1e-5).unwrap();
        let mean = n.values.iter().sum::<f64>() / 512.0;
        let std = (n.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 512.0).sqrt();
        assert!(mean.abs() < 1e-12);
        assert!((std - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hierarchy_thresholds() {
        let tasks = build_task_hierarchy(2, 250).unwrap();
        let got: Vec<(TaskName, u32)> = tasks.iter().map(|t| (t.name, t.threshold)).collect();
        assert_eq!(
            got,
            vec![
                (TaskName::LL, 33),
                (TaskName::L, 64),
                (TaskName::LH, 95),
                (TaskName::Mid, 126),
                (TaskName::HL, 157),
                (TaskName::H, 188),
                (TaskName::HH, 219),
            ]
        );
        let small = build_task_hierarchy(0, 8).unwrap();
        let thr = |n| small.iter().find(|t| t.name == n).unwrap().threshold;
        assert_eq!((thr(TaskName::Mid), thr(TaskName::L), thr(TaskName::H)), (4, 2, 6));
        assert!(build_task_hierarchy(0, 3).is_err());
        assert!(build_task_hierarchy(5, 5).is_err());
    }

    #[test]
    fn hierarchy_nesting() {
        let tasks = build_task_hierarchy(2, 250).unwrap();
        for task in &tasks {
            if let Some(parent) = task.name.parent() {
                let p = tasks.iter().find(|t| t.name == parent).unwrap();
                assert!(p.lo <= task.lo && task.hi <= p.hi);
                assert!(task.hi - task.lo < p.hi - p.lo);
            }
            let mid = (f64::from(task.lo) + f64::from(task.hi)) / 2.0;
            assert!((f64::from(task.threshold) - mid).abs() <= 0.5);
        }
        assert!(tasks.windows(2).all(|w| w[0].threshold < w[1].threshold));
    }

    #[test]
    fn labels() {
        let tasks = build_task_hierarchy(2, 250).unwrap();
        let mid = tasks[3];
        let ll = tasks[0];
        assert_eq!(label_window(&mid, 200), BandLabel::Above);
        assert_eq!(label_window(&ll, 200), BandLabel::Excluded);
        assert_eq!(label_window(&mid, 126), BandLabel::Below);
        let (below, above): (Vec<u32>, Vec<u32>) =
            (2..=250).partition(|f| label_window(&mid, *f) == BandLabel::Below);
        assert!(!below.is_empty() && !above.is_empty());
        assert_eq!(below.len() + above.len(), 249);
    }

    #[test]
    fn task_name_round_trip() {
        for t in TaskName::ALL {
            assert_eq!(t.as_str().parse::<TaskName>().unwrap(), t);
        }
        assert!("XL".parse::<TaskName>().is_err());
    }

    #[test]
    fn probe_dataset_counts_and_determinism() {
        let cfg = SignalConfig::default();
        let task = BandTask {
            name: TaskName::LL,
            lo: 30,
            hi: 34,
            threshold: 32,
        };
        let ratios = SplitRatios::default();
        let ds = build_probe_dataset(&cfg, &task, 100, &ratios, 9).unwrap();
        assert_eq!(ds.len(), probe_window_count(&cfg, &task, 100).unwrap());
        let per_32 = ds.iter().filter(|(_, w, _)| w.frequency == 32).count();
        assert_eq!(per_32, 15);
        assert!(ds.iter().all(|(_, w, _)| w.samples.len() == 512));
        assert!(ds
            .iter()
            .all(|(_, w, _)| w.samples.iter().all(|v| v.abs() <= 1.0)));
        assert_eq!(ds, build_probe_dataset(&cfg, &task, 100, &ratios, 9).unwrap());
        assert_ne!(ds, build_probe_dataset(&cfg, &task, 100, &ratios, 10).unwrap());
    }

    #[test]
    fn probe_dataset_rejects_bad_ratios() {
        let cfg = SignalConfig::default();
        let task = build_task_hierarchy(2, 250).unwrap()[0];
        let ratios = SplitRatios {
            train: 0.5,
            validation: 0.2,
            test: 0.2,
        };
        assert!(build_probe_dataset(&cfg, &task, 5, &ratios, 0).is_err());
    }

    #[test]
    fn duplicate_windows_are_detected() {
        let w = TimeSeriesWindow {
            samples: vec![0.0, 1.0],
            frequency: 3,
            phase: 0.0,
            source_offset: 4,
        };
        let mut ds = DatasetSplit::default();
        ds.train.push(w.clone(), 0);
        ds.test.push(w, 0);
        assert!(matches!(
            ds.check_unique(),
            Err(Error::DuplicateWindow { frequency: 3, offset: 4 })
        ));
    }

    #[test]
    fn erasure_dataset_shape() {
        let cfg = SignalConfig {
            f_min: 10,
            f_max: 14,
            ..SignalConfig::default()
        };
        let ds = build_erasure_dataset(&cfg, 100, 1).unwrap();
        assert_eq!(ds.len(), 500);
        for f in 10..=14 {
            assert_eq!(ds.iter().filter(|(_, w, _)| w.frequency == f).count(), 100);
        }
        assert!(ds.validation.is_empty());
        assert!(ds.iter().all(|(_, w, y)| w.samples.len() == 512 && y == w.frequency as i32));
        assert!(ds.iter().all(|(_, w, _)| (0.0..TAU).contains(&w.phase)));
        let single = build_erasure_dataset(&cfg, 1, 1).unwrap();
        assert_eq!(single.len(), 5);
    }

    #[test]
    fn predictability_extremes() {
        let tone = make_sinusoid(10, 512, 512, 0.0).unwrap();
        assert!((spectral_predictability(&tone).unwrap() - 1.0).abs() < 1e-9);
        let mut impulse = vec![0.0; 512];
        impulse[0] = 1.0;
        assert!(spectral_predictability(&impulse).unwrap().abs() < 1e-12);
        assert_eq!(spectral_predictability(&[0.0; 16]).unwrap(), 0.0);
    }

    #[test]
    fn predictability_noise_below_tone() {
        use rand_distr::{Distribution, StandardNormal};
        let mut r = rng::rng(3);
        let noise: Vec<f64> = (0..512).map(|_| StandardNormal.sample(&mut r)).collect();
        let omega_noise = spectral_predictability(&noise).unwrap();
        for f in [2, 50, 128, 250] {
            let tone = make_sinusoid(f, 512, 512, 0.4).unwrap();
            assert!(omega_noise < spectral_predictability(&tone).unwrap());
        }
    }
}
