//! Closed-form least-squares concept erasure and sequential multi-tap fitting.
//!
//! An eraser is the affine map `h -> P h + b` that makes the features
//! uncorrelated with a concept while moving them as little as possible in
//! mean squared distance. With `W` the whitening map of the feature
//! covariance and `U` an orthonormal basis of the column space of `W Σ_hy`,
//! `P = W⁺ (I - U Uᵀ) W` and `b = μ - P μ`.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ErasedForecaster, Forecaster};
use crate::signal::{BandTask, DatasetSplit, TimeSeriesWindow};
use crate::spectral::{self, SequenceGenerator};
use crate::store::{ErasureRecord, TapId};

/// Whitening eigenvalues below this fraction of the largest are floored.
pub const EIGENVALUE_FLOOR: f64 = 1e-8;
/// Whitened cross-covariance directions weaker than this (relative to the
/// concept's standard deviation) are not erased.
pub const RANK_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FittedEraser {
    pub tap: TapId,
    pub p: Array2<f64>,
    pub b: Array1<f64>,
    pub mu_h: Array1<f64>,
    pub rank_removed: usize,
}

impl FittedEraser {
    pub fn identity(tap: TapId, d: usize) -> Self {
        Self {
            tap,
            p: Array2::eye(d),
            b: Array1::zeros(d),
            mu_h: Array1::zeros(d),
            rank_removed: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn apply(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: h.len(),
            });
        }
        let out = self.p.dot(&Array1::from(h.to_vec())) + &self.b;
        Ok(out.to_vec())
    }

    /// Applies the eraser to every row of `h`.
    pub fn apply_rows(&self, h: &Array2<f64>) -> Result<Array2<f64>> {
        if h.ncols() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: h.ncols(),
            });
        }
        Ok(h.dot(&self.p.t()) + &self.b)
    }

    pub fn to_record(&self) -> ErasureRecord {
        ErasureRecord {
            layer_tap: self.tap,
            p: self.p.clone(),
            b: self.b.to_vec(),
            mu: self.mu_h.to_vec(),
        }
    }

    /// Rebuilds an eraser from its stored form. The removed rank is read off
    /// as the number of eigenvalues of `P` that are not close to one.
    pub fn from_record(rec: &ErasureRecord) -> Result<Self> {
        rec.validate()?;
        let d = rec.dim();
        let p = to_dmatrix(&rec.p);
        let eig = p.clone().complex_eigenvalues();
        let rank_removed = eig.iter().filter(|z| (z.re - 1.0).abs() > 1e-6 || z.im.abs() > 1e-6).count();
        Ok(Self {
            tap: rec.layer_tap,
            p: rec.p.clone(),
            b: Array1::from(rec.b.clone()),
            mu_h: Array1::from(rec.mu.clone()),
            rank_removed: rank_removed.min(d),
        })
    }
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_dmatrix(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn centered(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let mean = x.mean_axis(Axis(0)).expect("non-empty rows");
    (x - &mean, mean)
}

/// Column-centered cross-covariance `Xcᵀ Yc / n`.
pub fn cross_covariance(x: &Array2<f64>, y: &Array2<f64>) -> Result<Array2<f64>> {
    if x.nrows() != y.nrows() || x.nrows() == 0 {
        return Err(Error::Shape(format!(
            "covariance needs matching non-empty row counts, got {} and {}",
            x.nrows(),
            y.nrows()
        )));
    }
    let (xc, _) = centered(x);
    let (yc, _) = centered(y);
    Ok(xc.t().dot(&yc) / x.nrows() as f64)
}

/// `‖Cov(h, y)‖_F` divided by the product of the norms of the per-column
/// standard deviations of `h` and `y`; scale-free and zero when guarded.
pub fn guardedness(h: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    let cov = cross_covariance(h, y)?;
    let norm = |x: &Array2<f64>| x.std_axis(Axis(0), 0.0).mapv(|s| s * s).sum().sqrt();
    let scale = norm(h) * norm(y);
    let frob = cov.mapv(|v| v * v).sum().sqrt();
    Ok(if scale > 0.0 { frob / scale } else { frob })
}

/// Mean squared displacement `E‖h - ψ(h)‖²`.
pub fn distortion(h: &Array2<f64>, erased: &Array2<f64>) -> f64 {
    (h - erased).mapv(|v| v * v).sum() / h.nrows().max(1) as f64
}

fn check_fit_inputs(h: &Array2<f64>, y: &Array2<f64>) -> Result<()> {
    let (n, d) = h.dim();
    if y.nrows() != n {
        return Err(Error::Shape(format!("{n} feature rows but {} concept rows", y.nrows())));
    }
    if y.ncols() == 0 || y.ncols() >= d {
        return Err(Error::domain(format!(
            "concept dimension {} must lie in [1, d) with d = {d}",
            y.ncols()
        )));
    }
    if n <= d {
        return Err(Error::domain(format!("fitting needs more rows than features: n = {n}, d = {d}")));
    }
    if h.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite fitting data".into()));
    }
    Ok(())
}

/// Least-squares-optimal linear eraser of concept `y` (`n × k`) from `h`.
pub fn fit_leace(h: &Array2<f64>, y: &Array2<f64>, tap: TapId) -> Result<FittedEraser> {
    check_fit_inputs(h, y)?;
    let n = h.nrows() as f64;
    let d = h.ncols();
    let (hc, mu) = centered(h);
    let (yc, _) = centered(y);
    let sigma_hh = to_dmatrix(&(hc.t().dot(&hc) / n));
    let sigma_hy = to_dmatrix(&(hc.t().dot(&yc) / n));
    let y_scale = (yc.mapv(|v| v * v).sum() / n).sqrt();

    let eig = SymmetricEigen::new(sigma_hh);
    let lmax = eig.eigenvalues.max();
    if !(lmax > 0.0) {
        return Err(Error::Numerical("feature covariance is zero".into()));
    }
    let floor = EIGENVALUE_FLOOR * lmax;
    let v = &eig.eigenvectors;
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.max(floor).sqrt()));
    let sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(floor).sqrt()));
    let w = v * inv_sqrt * v.transpose();
    let w_pinv = v * sqrt * v.transpose();

    let svd = (&w * sigma_hy).svd(true, false);
    let u = svd.u.as_ref().expect("requested U");
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > RANK_TOLERANCE * y_scale)
        .collect();
    let mut projector = DMatrix::<f64>::identity(d, d);
    for &i in &keep {
        let col = u.column(i);
        projector -= col * col.transpose();
    }
    let p = from_dmatrix(&(w_pinv * projector * w));
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("eraser matrix is not finite".into()));
    }
    let b = &mu - &p.dot(&mu);
    Ok(FittedEraser {
        tap,
        p,
        b,
        mu_h: mu,
        rank_removed: keep.len(),
    })
}

/// Baseline eraser: orthogonal projection removing the span of the
/// class-conditional mean differences (the columns of `Σ_hy`).
pub fn fit_mean_difference(h: &Array2<f64>, y: &Array2<f64>, tap: TapId) -> Result<FittedEraser> {
    check_fit_inputs(h, y)?;
    let d = h.ncols();
    let (_, mu) = centered(h);
    let sigma_hy = to_dmatrix(&cross_covariance(h, y)?);
    let scale = sigma_hy.norm();
    let svd = sigma_hy.svd(true, false);
    let u = svd.u.as_ref().expect("requested U");
    let mut p = DMatrix::<f64>::identity(d, d);
    let mut rank = 0;
    for i in 0..svd.singular_values.len() {
        if svd.singular_values[i] > RANK_TOLERANCE * scale {
            let col = u.column(i);
            p -= col * col.transpose();
            rank += 1;
        }
    }
    let p = from_dmatrix(&p);
    let b = &mu - &p.dot(&mu);
    Ok(FittedEraser {
        tap,
        p,
        b,
        mu_h: mu,
        rank_removed: rank,
    })
}

/// Binary band concept as one centered `±1` column; rows outside the task
/// interval map to `None`.
pub fn band_concept(task: &BandTask, frequencies: &[u32]) -> Vec<Option<f64>> {
    frequencies
        .iter()
        .map(|&f| task.label(f).class().map(|c| if c == 1 { 1.0 } else { -1.0 }))
        .collect()
}

fn tap_features(model: &Forecaster, windows: &[&[f64]], active: &[ErasureRecord], tap: TapId) -> Result<Array2<f64>> {
    let states = model.collect_taps(windows, active)?;
    let d = model.config().d_model;
    Ok(Array2::from_shape_fn((states.len(), d), |(i, j)| {
        states[i][tap.index()].hidden[j]
    }))
}

/// Fits one eraser per tap in the given order. Each fit sees activations
/// produced with all previously fitted erasers installed.
pub fn fit_sequential(
    model: &Forecaster,
    taps: &[TapId],
    windows: &[&[f64]],
    y: &Array2<f64>,
) -> Result<Vec<FittedEraser>> {
    for (i, t) in taps.iter().enumerate() {
        if taps[..i].contains(t) {
            return Err(Error::domain(format!("tap {t} listed twice")));
        }
    }
    let mut fitted = Vec::with_capacity(taps.len());
    let mut active: Vec<ErasureRecord> = Vec::with_capacity(taps.len());
    for &tap in taps {
        let h = tap_features(model, windows, &active, tap)?;
        let eraser = fit_leace(&h, y, tap).map_err(|e| e.context(format!("fitting eraser at tap {tap}")))?;
        active.push(eraser.to_record());
        fitted.push(eraser);
    }
    Ok(fitted)
}

/// Guardedness of every tap's activations with `erasers` installed.
pub fn audit_taps(
    model: &Forecaster,
    erasers: &[FittedEraser],
    windows: &[&[f64]],
    y: &Array2<f64>,
) -> Result<Vec<(TapId, f64)>> {
    let records: Vec<ErasureRecord> = erasers.iter().map(FittedEraser::to_record).collect();
    let states = model.collect_taps(windows, &records)?;
    let d = model.config().d_model;
    TapId::ALL
        .iter()
        .map(|&tap| {
            let h = Array2::from_shape_fn((states.len(), d), |(i, j)| states[i][tap.index()].hidden[j]);
            Ok((tap, guardedness(&h, y)?))
        })
        .collect()
}

/// Default erasure subsets by tap index: each tap alone, growing prefixes,
/// then shrinking suffixes.
pub const DEFAULT_SUBSETS: [&[usize]; 12] = [
    &[0],
    &[1],
    &[2],
    &[3],
    &[4],
    &[0, 1],
    &[0, 1, 2],
    &[0, 1, 2, 3],
    &[0, 1, 2, 3, 4],
    &[1, 2, 3, 4],
    &[2, 3, 4],
    &[3, 4],
];

/// Taps for a list of indices, sorted into forward order.
pub fn subset_taps(indices: &[usize]) -> Result<Vec<TapId>> {
    let mut taps = indices
        .iter()
        .map(|&i| TapId::from_index(i).ok_or_else(|| Error::domain(format!("no tap with index {i}"))))
        .collect::<Result<Vec<_>>>()?;
    taps.sort_by_key(|t| t.index());
    taps.dedup();
    Ok(taps)
}

/// Row label of a subset: concatenated tap indices, or `baseline`.
pub fn subset_label(taps: &[TapId]) -> String {
    if taps.is_empty() {
        "baseline".into()
    } else {
        taps.iter().map(|t| t.index().to_string()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErasureRow {
    pub subset: String,
    pub mse: f64,
    pub rmse: f64,
    /// Two-sided paired Wilcoxon p-value against the baseline; `None` on the
    /// baseline row.
    pub p_value: Option<f64>,
    #[serde(skip)]
    pub erasers: Vec<FittedEraser>,
    #[serde(skip)]
    pub per_window: Vec<(f64, f64, f64)>,
}

impl ErasureRow {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value.is_some_and(|p| spectral::is_significant(p, alpha))
    }
}

fn score<G: SequenceGenerator + Sync>(
    generator: &G,
    windows: &[&TimeSeriesWindow],
    fs: u32,
) -> Result<spectral::SpectralScore> {
    let pairs = windows
        .par_iter()
        .map(|w| {
            let generated = generator.generate(&w.samples, w.samples.len())?;
            Ok((f64::from(w.frequency), spectral::dominant_frequency(&generated, fs)))
        })
        .collect::<Result<Vec<_>>>()?;
    spectral::spectral_rmse(&pairs)
}

/// Baseline row followed by one row per subset. Erasers are fitted
/// sequentially on the in-task training windows; every test window is used
/// as a closed-loop generation context of its own length.
pub fn erasure_experiment(
    model: &Forecaster,
    dataset: &DatasetSplit,
    task: &BandTask,
    subsets: &[Vec<TapId>],
    fs: u32,
) -> Result<Vec<ErasureRow>> {
    let (train, concept): (Vec<&[f64]>, Vec<f64>) = dataset
        .train
        .windows
        .iter()
        .zip(band_concept(task, &dataset.train.windows.iter().map(|w| w.frequency).collect::<Vec<_>>()))
        .filter_map(|(w, y)| y.map(|y| (w.samples.as_slice(), y)))
        .unzip();
    let test: Vec<&TimeSeriesWindow> = dataset.test.windows.iter().collect();
    if test.is_empty() {
        return Err(Error::domain("erasure experiment needs test windows"));
    }
    let y = Array2::from_shape_vec((concept.len(), 1), concept).expect("one column");

    let baseline = score(model, &test, fs)?;
    let base_sq = baseline.squared_errors();
    let mut rows = vec![ErasureRow {
        subset: subset_label(&[]),
        mse: baseline.mse,
        rmse: baseline.rmse,
        p_value: None,
        erasers: Vec::new(),
        per_window: baseline.per_window.clone(),
    }];
    for taps in subsets {
        if taps.is_empty() {
            continue;
        }
        log::info!("erasing at taps {}", subset_label(taps));
        let erasers = fit_sequential(model, taps, &train, &y)?;
        let records: Vec<ErasureRecord> = erasers.iter().map(FittedEraser::to_record).collect();
        let erased = ErasedForecaster {
            model,
            erasers: &records,
        };
        let s = score(&erased, &test, fs)?;
        let p = spectral::wilcoxon_paired_two_sided(&s.squared_errors(), &base_sq)?;
        rows.push(ErasureRow {
            subset: subset_label(taps),
            mse: s.mse,
            rmse: s.rmse,
            p_value: Some(p),
            erasers,
            per_window: s.per_window,
        });
    }
    Ok(rows)
}
