//! Online prequential-MDL linear probes.
//!
//! Each batch of the stream is first coded with the probe trained on the
//! batches before it, then used for training. Training mixes the current
//! batch with samples replayed from independent reservoir buffers over the
//! past, keeps an exponential moving average of the parameters, and with a
//! small probability per batch resets the trained parameters to that average.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::{self, Rng};
use crate::signal::{BandTask, Split};
use crate::store::ActivationSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub replay_streams: usize,
    pub ema_decay: f64,
    pub reset_prob: f64,
    pub noise_level: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Dropout on the probe's input features during updates.
    pub dropout: f64,
    pub seed: u64,
    /// Optimizer steps taken after coding each batch.
    pub steps_per_batch: usize,
    /// Capacity of each replay reservoir, in samples.
    pub replay_capacity: usize,
    /// Held-out fraction when no split assignment is supplied.
    pub test_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            replay_streams: 3,
            ema_decay: 0.02,
            reset_prob: 0.05,
            noise_level: 0.05,
            batch_size: 128,
            lr: 1e-2,
            weight_decay: 1e-4,
            dropout: 0.2,
            seed: 0,
            steps_per_batch: 20,
            replay_capacity: 2048,
            test_fraction: 0.15,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("probe.{field}"), msg))
            }
        };
        check((1..=5).contains(&self.replay_streams), "replay_streams", "must lie in [1, 5]")?;
        check((0.005..=0.1).contains(&self.ema_decay), "ema_decay", "must lie in [0.005, 0.1]")?;
        check((0.01..=0.2).contains(&self.reset_prob), "reset_prob", "must lie in [0.01, 0.2]")?;
        check((0.01..=0.1).contains(&self.noise_level), "noise_level", "must lie in [0.01, 0.1]")?;
        check([64, 128, 256].contains(&self.batch_size), "batch_size", "must be 64, 128 or 256")?;
        check(self.lr > 0.0, "lr", "must be positive")?;
        check(self.weight_decay > 0.0, "weight_decay", "must be positive")?;
        check((0.1..=0.3).contains(&self.dropout), "dropout", "must lie in [0.1, 0.3]")?;
        check(self.steps_per_batch >= 1, "steps_per_batch", "must be at least 1")?;
        check(self.replay_capacity >= 1, "replay_capacity", "must be at least 1")?;
        check((0.0..1.0).contains(&self.test_fraction), "test_fraction", "must lie in [0, 1)")
    }
}

/// Single linear layer with softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// `d × classes`.
    pub weights: Array2<f64>,
    /// `1 × classes`.
    pub bias: Array2<f64>,
}

impl LinearProbe {
    pub fn zeros(d: usize, classes: usize) -> Self {
        Self {
            weights: Array2::zeros((d, classes)),
            bias: Array2::zeros((1, classes)),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.bias.ncols()
    }

    pub fn logits(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weights) + &self.bias
    }

    /// Row-wise natural-log softmax.
    pub fn log_probs(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut z = self.logits(x);
        for mut row in z.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        z
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        self.logits(x)
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, v)| if *v > best.1 { (i, *v) } else { best })
                    .0
            })
            .collect()
    }

    /// Bits needed to code `labels` under the probe.
    pub fn codelength_bits(&self, x: &Array2<f64>, labels: &[usize]) -> f64 {
        let lp = self.log_probs(x);
        -labels
            .iter()
            .enumerate()
            .map(|(i, y)| lp[[i, *y]] / std::f64::consts::LN_2)
            .sum::<f64>()
    }

    fn params(&self) -> [Array2<f64>; 2] {
        [self.weights.clone(), self.bias.clone()]
    }

    fn set_params(&mut self, p: &[Array2<f64>]) {
        self.weights.assign(&p[0]);
        self.bias.assign(&p[1]);
    }
}

/// One stream batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

/// Instrumentation events of [`prequential_fit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeEvent {
    /// Batch `k` was coded.
    Evaluate(usize),
    /// Parameters were updated using batch `k`.
    Update(usize),
}

/// Counts updates that used a batch before that batch was coded.
#[derive(Debug, Default)]
pub struct PrequentialAudit {
    evaluated: BTreeSet<usize>,
    pub evaluations: usize,
    pub updates: usize,
    pub violations: usize,
}

impl PrequentialAudit {
    pub fn observe(&mut self, event: ProbeEvent) {
        match event {
            ProbeEvent::Evaluate(k) => {
                self.evaluated.insert(k);
                self.evaluations += 1;
            }
            ProbeEvent::Update(k) => {
                self.updates += 1;
                if !self.evaluated.contains(&k) {
                    self.violations += 1;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct PrequentialFit {
    pub codelength_bits: f64,
    pub per_batch_bits: Vec<f64>,
    pub probe: LinearProbe,
    pub resets: usize,
}

/// Fixed-size uniform sample of everything pushed so far.
struct Reservoir {
    rows: Vec<(Array1<f64>, usize)>,
    capacity: usize,
    seen: usize,
    rng: Rng,
}

impl Reservoir {
    fn push(&mut self, x: Array1<f64>, y: usize) {
        self.seen += 1;
        if self.rows.len() < self.capacity {
            self.rows.push((x, y));
        } else {
            let j = self.rng.random_range(0..self.seen);
            if j < self.capacity {
                self.rows[j] = (x, y);
            }
        }
    }

    fn draw(&mut self, n: usize) -> Vec<(Array1<f64>, usize)> {
        if self.rows.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| self.rows[self.rng.random_range(0..self.rows.len())].clone())
            .collect()
    }
}

/// Prequential codelength of `stream` under an online linear softmax probe.
pub fn prequential_fit(stream: &[Batch], n_classes: usize, cfg: &ProbeConfig) -> Result<PrequentialFit> {
    prequential_fit_observed(stream, n_classes, cfg, |_| {})
}

/// [`prequential_fit`] with an instrumentation hook.
pub fn prequential_fit_observed(
    stream: &[Batch],
    n_classes: usize,
    cfg: &ProbeConfig,
    mut observe: impl FnMut(ProbeEvent),
) -> Result<PrequentialFit> {
    cfg.validate()?;
    if stream.is_empty() || stream.iter().any(|b| b.labels.is_empty()) {
        return Err(Error::domain("prequential stream needs non-empty batches"));
    }
    if n_classes < 2 {
        return Err(Error::domain("a probe needs at least two classes"));
    }
    let d = stream[0].features.ncols();
    for b in stream {
        if b.features.ncols() != d || b.features.nrows() != b.labels.len() {
            return Err(Error::Shape("stream batches disagree in shape".into()));
        }
        if b.labels.iter().any(|y| *y >= n_classes) {
            return Err(Error::domain("label outside the class set"));
        }
    }

    let mut rng = rng::rng(rng::derive_seed(cfg.seed, "prequential"));
    let mut reservoirs: Vec<Reservoir> = (0..cfg.replay_streams)
        .map(|i| Reservoir {
            rows: Vec::new(),
            capacity: cfg.replay_capacity,
            seen: 0,
            rng: rng::rng(rng::derive_seed(cfg.seed, &format!("replay/{i}"))),
        })
        .collect();
    let replay_share = cfg.batch_size.div_ceil(cfg.replay_streams);
    let noise = Normal::new(0.0, cfg.noise_level).expect("validated noise level");

    let mut probe = LinearProbe::zeros(d, n_classes);
    let mut ema = probe.params();
    let mut adam = Adam::new(&probe.params());
    adam.weight_decay = cfg.weight_decay;
    let mut per_batch_bits = Vec::with_capacity(stream.len());
    let mut resets = 0;

    for (k, batch) in stream.iter().enumerate() {
        let bits = probe.codelength_bits(&batch.features, &batch.labels);
        if !bits.is_finite() {
            return Err(Error::Numerical(format!("codelength of batch {k} is {bits}")));
        }
        per_batch_bits.push(bits);
        observe(ProbeEvent::Evaluate(k));

        for _ in 0..cfg.steps_per_batch {
            let mut rows: Vec<(Array1<f64>, usize)> = batch
                .features
                .rows()
                .into_iter()
                .map(|r| r.to_owned())
                .zip(batch.labels.iter().copied())
                .collect();
            for res in reservoirs.iter_mut() {
                rows.extend(res.draw(replay_share));
            }
            let m = rows.len();
            let keep = 1.0 / (1.0 - cfg.dropout);
            let x = Array2::from_shape_fn((m, d), |(i, j)| {
                let mask = if rng.random::<f64>() < cfg.dropout { 0.0 } else { keep };
                (rows[i].0[j] + noise.sample(&mut rng)) * mask
            });
            let mut g = probe.log_probs(&x).mapv(f64::exp);
            for (i, (_, y)) in rows.iter().enumerate() {
                g[[i, *y]] -= 1.0;
            }
            g /= m as f64;
            let grads = [x.t().dot(&g), g.sum_axis(Axis(0)).insert_axis(Axis(0))];
            let mut params = probe.params();
            adam.step(&mut params, &grads, cfg.lr);
            if params.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
                return Err(Error::Numerical(format!("probe diverged at batch {k}")));
            }
            probe.set_params(&params);
            for (e, p) in ema.iter_mut().zip(&params) {
                e.zip_mut_with(p, |e, p| *e += cfg.ema_decay * (p - *e));
            }
            observe(ProbeEvent::Update(k));
        }

        if rng.random::<f64>() < cfg.reset_prob {
            probe.set_params(&ema);
            resets += 1;
        }
        for (row, y) in batch.features.rows().into_iter().zip(&batch.labels) {
            for res in reservoirs.iter_mut() {
                res.push(row.to_owned(), *y);
            }
        }
    }

    Ok(PrequentialFit {
        codelength_bits: per_batch_bits.iter().sum(),
        per_batch_bits,
        probe,
        resets,
    })
}

/// `1 - L / L_uniform`; negative when the probe codes worse than uniform.
pub fn space_saving(codelength: f64, codelength_uniform: f64) -> Result<f64> {
    if !(codelength_uniform > 0.0) {
        return Err(Error::domain("uniform codelength must be positive"));
    }
    Ok(1.0 - codelength / codelength_uniform)
}

/// What a probe predicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    /// Binary band label; rows outside the task interval are dropped.
    Band(BandTask),
    /// One class per distinct frequency.
    FrequencyIdentity,
    /// The labels stored with the activations.
    Stored,
}

impl ProbeTarget {
    pub fn name(&self) -> String {
        match self {
            ProbeTarget::Band(t) => t.name.to_string(),
            ProbeTarget::FrequencyIdentity => "freq".into(),
            ProbeTarget::Stored => "stored".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub tap: String,
    pub target: String,
    pub is_control: bool,
    pub n_classes: usize,
    pub n_stream: usize,
    pub n_test: usize,
    pub codelength_total: f64,
    pub codelength_uniform: f64,
    pub space_saving: f64,
    pub accuracy: f64,
    pub per_frequency_accuracy: BTreeMap<u32, f64>,
    pub resets: usize,
}

/// Rows kept for a target with their dense class index.
fn class_labels(set: &ActivationSet, target: &ProbeTarget) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    let freqs = &set.frequencies;
    match target {
        ProbeTarget::Band(task) => {
            let (rows, labels): (Vec<usize>, Vec<usize>) = freqs
                .iter()
                .enumerate()
                .filter_map(|(i, f)| {
                    let f = u32::try_from(*f).ok()?;
                    task.label(f).class().map(|c| (i, usize::from(c)))
                })
                .unzip();
            Ok((rows, labels, 2))
        }
        ProbeTarget::FrequencyIdentity => dense(freqs),
        ProbeTarget::Stored => dense(&set.labels),
    }
}

fn dense(values: &[i32]) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    let classes: BTreeSet<i32> = values.iter().copied().collect();
    let index: BTreeMap<i32, usize> = classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let labels = values.iter().map(|v| index[v]).collect();
    Ok(((0..values.len()).collect(), labels, classes.len().max(2)))
}

fn standardize(x: &mut Array2<f64>) {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let std = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-8 { s } else { 1.0 });
    *x -= &mean;
    *x /= &std;
}

/// Prequential probe over one activation set.
///
/// Rows tagged [`Split::Test`] in `split` (or a seeded `test_fraction` of the
/// rows when `split` is `None`) are held out for accuracy; the rest form the
/// coded stream in seeded shuffled order. Features are standardized per
/// column over the whole set. With `control`, labels are redrawn uniformly
/// from the class set.
pub fn run_probe(
    set: &ActivationSet,
    target: &ProbeTarget,
    cfg: &ProbeConfig,
    control: bool,
    split: Option<&[Split]>,
) -> Result<ProbeReport> {
    set.validate()?;
    cfg.validate()?;
    if let Some(split) = split {
        if split.len() != set.len() {
            return Err(Error::Shape(format!(
                "split assignment has {} rows, activation set {}",
                split.len(),
                set.len()
            )));
        }
    }
    let (rows, mut labels, n_classes) = class_labels(set, target)?;
    if rows.is_empty() {
        return Err(Error::domain(format!(
            "no rows of tap {} fall inside target {}",
            set.tap,
            target.name()
        )));
    }
    if control {
        let mut r = rng::rng(rng::derive_seed(cfg.seed, "control-labels"));
        labels.iter_mut().for_each(|y| *y = r.random_range(0..n_classes));
    }

    let mut features = set.features.select(Axis(0), &rows).mapv(f64::from);
    standardize(&mut features);

    let (mut stream_idx, test_idx): (Vec<usize>, Vec<usize>) = match split {
        Some(split) => (0..rows.len()).partition(|&i| split[rows[i]] != Split::Test),
        None => {
            let mut order: Vec<usize> = (0..rows.len()).collect();
            order.shuffle(&mut rng::rng(rng::derive_seed(cfg.seed, "holdout")));
            let n_test = ((rows.len() as f64) * cfg.test_fraction).round() as usize;
            let test = order.split_off(rows.len() - n_test);
            (order, test)
        }
    };
    if stream_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::domain("probe needs non-empty stream and test partitions"));
    }
    stream_idx.shuffle(&mut rng::rng(rng::derive_seed(cfg.seed, "stream-order")));

    let stream: Vec<Batch> = stream_idx
        .chunks(cfg.batch_size)
        .map(|chunk| Batch {
            features: features.select(Axis(0), chunk),
            labels: chunk.iter().map(|&i| labels[i]).collect(),
        })
        .collect();
    let fit = prequential_fit(&stream, n_classes, cfg)?;
    let codelength_uniform = stream_idx.len() as f64 * (n_classes as f64).log2();

    let test_x = features.select(Axis(0), &test_idx);
    let predicted = fit.probe.predict(&test_x);
    let mut hits: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (p, &i) in predicted.iter().zip(&test_idx) {
        let ok = *p == labels[i];
        correct += usize::from(ok);
        let f = set.frequencies[rows[i]].max(0) as u32;
        let e = hits.entry(f).or_default();
        e.0 += usize::from(ok);
        e.1 += 1;
    }

    Ok(ProbeReport {
        tap: set.tap.to_string(),
        target: target.name(),
        is_control: control,
        n_classes,
        n_stream: stream_idx.len(),
        n_test: test_idx.len(),
        codelength_total: fit.codelength_bits,
        codelength_uniform,
        space_saving: space_saving(fit.codelength_bits, codelength_uniform)?,
        accuracy: correct as f64 / test_idx.len() as f64,
        per_frequency_accuracy: hits
            .into_iter()
            .map(|(f, (ok, n))| (f, ok as f64 / n as f64))
            .collect(),
        resets: fit.resets,
    })
}

/// Frequencies whose test accuracy falls below `threshold_acc`, ascending.
pub fn degradation_gap(report: &ProbeReport, threshold_acc: f64) -> Vec<u32> {
    report
        .per_frequency_accuracy
        .iter()
        .filter(|(_, acc)| **acc < threshold_acc)
        .map(|(f, _)| *f)
        .collect()
}

/// Accuracy band used by the heatmap: below `0.6` fails, `>= 0.9` is optimal.
pub fn accuracy_band(acc: f64) -> &'static str {
    if acc < 0.6 {
        "fail"
    } else if acc >= 0.9 {
        "optimal"
    } else {
        "partial"
    }
}
