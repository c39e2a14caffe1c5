//! Quantile training of the forecaster with Adam.

use std::f64::consts::TAU;

use ndarray::Array2;
use rand::Rng as _;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Forecaster;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng;
use crate::signal::{self, SignalConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    /// Number of random-phase sinusoid windows in the training corpus.
    pub n_windows: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            n_windows: 8192,
            epochs: 4,
            batch_size: 16,
            lr: 3e-3,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Random-phase windows of length `context_len + horizon` over the band.
pub fn sinusoid_corpus(
    cfg: &SignalConfig,
    length: usize,
    n_windows: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let mut r = rng::rng(seed);
    (0..n_windows)
        .map(|_| {
            let f = r.random_range(cfg.f_min..=cfg.f_max);
            let phase = r.random_range(0.0..TAU);
            signal::make_sinusoid(f, cfg.fs, length, phase)
        })
        .collect()
}

/// Minimizes the mean pinball loss over windows of `context_len + horizon`
/// samples. Deterministic for a fixed seed and worker count.
pub fn train_quantile(
    model: &mut Forecaster,
    windows: &[Vec<f64>],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    let cfg = model.config().clone();
    let need = cfg.context_len + cfg.horizon;
    if windows.is_empty() {
        return Err(Error::domain("training needs at least one window"));
    }
    if let Some(w) = windows.iter().find(|w| w.len() != need) {
        return Err(Error::Shape(format!(
            "training window has {} samples, expected {need}",
            w.len()
        )));
    }
    if opts.batch_size == 0 || !(opts.lr > 0.0) {
        return Err(Error::config("training", "batch_size and lr must be positive"));
    }

    let mut adam = Adam::new(model.params());
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut shuffle_rng = rng::rng(rng::derive_seed(opts.seed, "train-order"));
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(opts.epochs),
        steps: 0,
    };

    for epoch in 0..opts.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(opts.batch_size).enumerate() {
            let frozen = &*model;
            let results: Vec<(f64, Vec<Option<Array2<f64>>>)> = batch
                .par_iter()
                .map(|&i| {
                    let seed = rng::derive_seed(opts.seed, &format!("dropout/{epoch}/{b}/{i}"));
                    let mut r = rng::rng(seed);
                    let w = &windows[i];
                    frozen.loss_and_gradients(&w[..cfg.context_len], &w[cfg.context_len..], Some(&mut r))
                })
                .collect::<Result<_>>()
                .map_err(|e| e.context(format!("epoch {epoch}, batch {b}")))?;

            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Array2<f64>> = model
                .params()
                .iter()
                .map(|p| Array2::zeros(p.raw_dim()))
                .collect();
            for (loss, g) in &results {
                epoch_loss += loss;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    if let Some(gi) = gi {
                        acc.scaled_add(scale, gi);
                    }
                }
            }
            let norm = grads
                .iter()
                .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                return Err(Error::Numerical(format!(
                    "gradient norm diverged at epoch {epoch}, batch {b}"
                )));
            }
            if opts.clip_norm > 0.0 && norm > opts.clip_norm {
                let k = opts.clip_norm / norm;
                grads.iter_mut().for_each(|g| *g *= k);
            }
            adam.step(model.params_mut(), &grads, opts.lr);
            report.steps += 1;
        }
        let mean = epoch_loss / windows.len() as f64;
        log::info!("epoch {epoch}: mean pinball loss {mean:.5}");
        report.epoch_losses.push(mean);
    }
    Ok(report)
}
