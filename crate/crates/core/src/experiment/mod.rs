//! The `freqprobe` pipeline: JSON configuration, output layout and the six
//! subcommands.
//!
//! Every command reads the same [`ExperimentConfig`], writes its resolved
//! form next to the outputs and only consumes files produced by earlier
//! commands (or by an external exporter that speaks the `FQPB` format).

mod commands;
mod report;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use commands::{
    cmd_erase, cmd_gen, cmd_probe, cmd_tap, cmd_train, ErasureOutput, ErasureRowOut, GenSummary, ProbeRun, TaskCounts,
};
pub use report::{cmd_report, AliasingSection, ErasureSection, GapRow, ProbeSection, Summary, SvRow, SUMMARY_SCHEMA};

use crate::eraser::DEFAULT_SUBSETS;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrainOptions};
use crate::probe::ProbeConfig;
use crate::rng::derive_seed;
use crate::signal::{ErasureDatasetOptions, SignalConfig, SplitRatios, TaskName};
use crate::store::TapId;

/// Environment variable bounding the worker pool.
pub const WORKERS_ENV: &str = "FREQPROBE_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErasureSettings {
    pub dataset: ErasureDatasetOptions,
    /// Concept erased by every subset.
    pub task: TaskName,
    /// Random-phase contexts per frequency on the input/output curve.
    pub io_windows: usize,
    pub io_frequency_step: u32,
    pub alpha: f64,
}

impl Default for ErasureSettings {
    fn default() -> Self {
        Self {
            dataset: ErasureDatasetOptions::default(),
            task: TaskName::Mid,
            io_windows: 10,
            io_frequency_step: 1,
            alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub signal: SignalConfig,
    pub split: SplitRatios,
    pub model: ModelConfig,
    pub training: TrainOptions,
    pub probe: ProbeConfig,
    pub erasure: ErasureSettings,
    pub tasks: Vec<TaskName>,
    pub taps: Vec<TapId>,
    /// Tap index lists; each is fitted in forward order.
    pub tap_subsets: Vec<Vec<usize>>,
    /// Per-frequency accuracy below this counts as a degradation gap.
    pub degradation_threshold: f64,
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/activations`.
    pub activations_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            signal: SignalConfig::default(),
            split: SplitRatios::default(),
            model: ModelConfig::default(),
            training: TrainOptions::default(),
            probe: ProbeConfig::default(),
            erasure: ErasureSettings::default(),
            tasks: TaskName::ALL.to_vec(),
            taps: TapId::ALL.to_vec(),
            tap_subsets: DEFAULT_SUBSETS.iter().map(|s| s.to_vec()).collect(),
            degradation_threshold: 0.6,
            output_dir: PathBuf::from("out"),
            activations_dir: None,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON config. Unknown fields are rejected.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), format!("cannot read config: {e}")))?;
        serde_json::from_str(&text).map_err(|e| {
            Error::config(
                path.display().to_string(),
                format!("line {} column {}: {e}", e.line(), e.column()),
            )
        })
    }

    /// Applies command line overrides and fixes every component seed as a
    /// function of the top-level seed.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        if let Some(seed) = seed {
            self.seed = seed;
        }
        if let Some(out) = out {
            self.output_dir = out;
        }
        self.signal.seed = derive_seed(self.seed, "signal");
        self.training.seed = derive_seed(self.seed, "training");
        self.probe.seed = derive_seed(self.seed, "probe");
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.signal.validate()?;
        self.split
            .validate()
            .map_err(|e| Error::config("split", e.to_string()))?;
        self.model.validate()?;
        self.probe.validate()?;
        if self.model.context_len != self.signal.window_len {
            return Err(Error::config(
                "model.context_len",
                format!("must equal signal.T = {}", self.signal.window_len),
            ));
        }
        if self.training.batch_size == 0 || !(self.training.lr > 0.0) || self.training.n_windows == 0 {
            return Err(Error::config("training", "n_windows, batch_size and lr must be positive"));
        }
        if self.tasks.is_empty() || self.tasks.iter().collect::<BTreeSet<_>>().len() != self.tasks.len() {
            return Err(Error::config("tasks", "must be a non-empty list without repeats"));
        }
        if self.taps.is_empty() || self.taps.iter().collect::<BTreeSet<_>>().len() != self.taps.len() {
            return Err(Error::config("taps", "must be a non-empty list without repeats"));
        }
        for (i, subset) in self.tap_subsets.iter().enumerate() {
            if let Some(bad) = subset.iter().find(|t| TapId::from_index(**t).is_none()) {
                return Err(Error::config(
                    format!("tap_subsets[{i}]"),
                    format!("tap index {bad} does not exist (valid: 0..=4)"),
                ));
            }
        }
        let e = &self.erasure;
        if e.dataset.n_phases == 0 || e.dataset.frequency_step == 0 || !(0.0..1.0).contains(&e.dataset.test_fraction) || e.dataset.test_fraction == 0.0 {
            return Err(Error::config(
                "erasure.dataset",
                "n_phases and frequency_step must be positive and test_fraction in (0, 1)",
            ));
        }
        if e.io_windows == 0 || e.io_frequency_step == 0 {
            return Err(Error::config("erasure", "io_windows and io_frequency_step must be positive"));
        }
        if !(e.alpha > 0.0 && e.alpha < 1.0) {
            return Err(Error::config("erasure.alpha", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.degradation_threshold) {
            return Err(Error::config("degradation_threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout {
            root: self.output_dir.clone(),
            activations: self
                .activations_dir
                .clone()
                .unwrap_or_else(|| self.output_dir.join("activations")),
        }
    }
}

/// File locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
    pub activations: PathBuf,
}

impl Layout {
    pub fn resolved_config(&self) -> PathBuf {
        self.root.join("config.resolved.json")
    }
    pub fn dataset(&self, task: TaskName) -> PathBuf {
        self.root.join("datasets").join(format!("{task}.fqpb"))
    }
    pub fn erasure_dataset(&self) -> PathBuf {
        self.root.join("datasets").join("erasure.fqpb")
    }
    pub fn gen_summary(&self) -> PathBuf {
        self.root.join("datasets").join("summary.json")
    }
    pub fn weights(&self) -> PathBuf {
        self.root.join("model").join("weights.fqpb")
    }
    pub fn train_report(&self) -> PathBuf {
        self.root.join("model").join("train_report.json")
    }
    pub fn activations(&self, task: TaskName, tap: TapId) -> PathBuf {
        self.activations.join(task.as_str()).join(format!("{tap}.fqpb"))
    }
    pub fn sv_csv(&self) -> PathBuf {
        self.root.join("sv_by_layer_task.csv")
    }
    pub fn accuracy_csv(&self) -> PathBuf {
        self.root.join("accuracy_by_frequency.csv")
    }
    pub fn probe_reports(&self) -> PathBuf {
        self.root.join("probe_reports.json")
    }
    pub fn erasure_csv(&self) -> PathBuf {
        self.root.join("erasure_rmse.csv")
    }
    pub fn erasure_json(&self) -> PathBuf {
        self.root.join("erasure.json")
    }
    pub fn eraser(&self, subset: &str, tap: TapId) -> PathBuf {
        self.root.join("erasers").join(subset).join(format!("{tap}.fqpb"))
    }
    pub fn io_curve(&self) -> PathBuf {
        self.root.join("io_curve.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io(e).context(format!("creating {}", dir.display())))?;
    }
    Ok(())
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::Io(e).context(format!("writing {}", path.display())))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub(crate) fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput(format!("{what} not found at {}", path.display())))
    }
}

/// Worker count from [`WORKERS_ENV`], or `None` for the rayon default.
pub fn workers_from_env() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::config(WORKERS_ENV, format!("expected a positive integer, got {v:?}"))),
        },
    }
}

/// Runs `f` on a pool bounded by [`WORKERS_ENV`].
pub fn with_workers<T: Send>(f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers_from_env()? {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::config(WORKERS_ENV, e.to_string()))?;
    pool.install(f)
}
