//! The surrogate forecaster and its patch geometry.

mod config;
mod forecaster;
pub mod tape;
mod train;

pub use config::{ModelConfig, TapPooling};
pub use forecaster::{ErasedForecaster, Forecaster, ForwardOutput, TapState};
pub use train::{sinusoid_corpus, train_quantile, TrainOptions, TrainReport};

use crate::error::{Error, Result};

/// Splits `x` into patches of `patch_len` samples taken every `stride` samples.
pub fn patchify(x: &[f64], patch_len: usize, stride: usize) -> Result<Vec<Vec<f64>>> {
    if patch_len == 0 || stride == 0 {
        return Err(Error::domain("patch length and stride must be positive"));
    }
    if x.len() < patch_len || !(x.len() - patch_len).is_multiple_of(stride) {
        return Err(Error::Shape(format!(
            "length {} does not tile into patches of {patch_len} with stride {stride}",
            x.len()
        )));
    }
    Ok(x.windows(patch_len)
        .step_by(stride)
        .map(<[f64]>::to_vec)
        .collect())
}

/// True iff `f` is an integer multiple of the patch frequency `fs / P`,
/// in which case every patch of a sinusoid at `f` is identical.
pub fn aliasing_predictor(f: u32, fs: u32, patch_len: u32) -> bool {
    fs != 0 && (u64::from(f) * u64::from(patch_len)) % u64::from(fs) == 0
}

/// Patch-aligned harmonics inside `[lo, hi]`.
pub fn aliasing_harmonics(lo: u32, hi: u32, fs: u32, patch_len: u32) -> Vec<u32> {
    (lo..=hi)
        .filter(|f| aliasing_predictor(*f, fs, patch_len))
        .collect()
}
