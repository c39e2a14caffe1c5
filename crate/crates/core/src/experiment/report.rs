use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::commands::{ErasureOutput, ErasureRowOut, GenSummary, ProbeRun};
use super::{write_json, ExperimentConfig};
use crate::error::{Error, Result};
use crate::model::{aliasing_harmonics, aliasing_predictor, TrainReport};
use crate::probe;
use crate::spectral::{collapse_bound, IoPoint};

/// JSON Schema of `summary.json`.
pub const SUMMARY_SCHEMA: &str = include_str!("../../schema/summary.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvRow {
    pub layer: String,
    pub task: String,
    pub sv: f64,
    pub sv_control: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub layer: String,
    pub task: String,
    pub threshold: f64,
    pub frequencies: Vec<u32>,
    /// Whether each gap frequency is an aliasing harmonic of the patch length.
    pub aliasing_flagged: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSection {
    pub sv_by_layer_task: Vec<SvRow>,
    pub degradation_gaps: Vec<GapRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErasureSection {
    pub task: String,
    pub alpha: f64,
    pub rows: Vec<ErasureRowOut>,
    pub io_curve: Option<Vec<IoPoint>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AliasingSection {
    pub fs: u32,
    pub patch_len: usize,
    /// RMSE of a generator that always answers 0 Hz over the band.
    pub collapse_bound: f64,
    pub harmonics: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub config: Option<serde_json::Value>,
    pub datasets: Option<GenSummary>,
    pub training: Option<TrainReport>,
    pub probe: Option<ProbeSection>,
    pub erasure: Option<ErasureSection>,
    pub aliasing: AliasingSection,
    pub warnings: Vec<String>,
}

fn read_optional<T: DeserializeOwned>(path: &Path, section: &str, warnings: &mut Vec<String>) -> Result<Option<T>> {
    if !path.exists() {
        warnings.push(format!("{section}: {} is missing", path.display()));
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::InvalidRecord(format!("{}: {e}", path.display())))
}

fn read_io_curve(path: &Path) -> Result<Option<Vec<IoPoint>>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            let bad = || Error::InvalidRecord(format!("{}: bad row {line:?}", path.display()));
            if cols.len() != 3 {
                return Err(bad());
            }
            Ok(IoPoint {
                f: cols[0].parse().map_err(|_| bad())?,
                mean_fhat: cols[1].parse().map_err(|_| bad())?,
                std_fhat: cols[2].parse().map_err(|_| bad())?,
            })
        })
        .collect::<Result<_>>()
        .map(Some)
}

/// Collects every available output into `summary.json`. Missing stages
/// become `null` sections with a warning each.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<Summary> {
    let layout = cfg.layout();
    let mut warnings = Vec::new();
    let fs_hz = cfg.signal.fs;
    let p = cfg.model.patch_len as u32;

    let datasets = read_optional::<GenSummary>(&layout.gen_summary(), "datasets", &mut warnings)?;
    let training = read_optional::<TrainReport>(&layout.train_report(), "training", &mut warnings)?;
    let probe = read_optional::<Vec<ProbeRun>>(&layout.probe_reports(), "probe", &mut warnings)?.map(|runs| {
        ProbeSection {
            sv_by_layer_task: runs
                .iter()
                .map(|r| SvRow {
                    layer: r.tap.to_string(),
                    task: r.task.to_string(),
                    sv: r.report.space_saving,
                    sv_control: r.control.space_saving,
                    accuracy: r.report.accuracy,
                })
                .collect(),
            degradation_gaps: runs
                .iter()
                .map(|r| {
                    let frequencies = probe::degradation_gap(&r.report, cfg.degradation_threshold);
                    GapRow {
                        layer: r.tap.to_string(),
                        task: r.task.to_string(),
                        threshold: cfg.degradation_threshold,
                        aliasing_flagged: frequencies.iter().map(|f| aliasing_predictor(*f, fs_hz, p)).collect(),
                        frequencies,
                    }
                })
                .collect(),
        }
    });
    let erasure = read_optional::<ErasureOutput>(&layout.erasure_json(), "erasure", &mut warnings)?;
    let io_curve = read_io_curve(&layout.io_curve())?;
    if erasure.is_some() && io_curve.is_none() {
        warnings.push(format!("erasure: {} is missing", layout.io_curve().display()));
    }
    let erasure = erasure.map(|e| ErasureSection {
        task: e.task.to_string(),
        alpha: e.alpha,
        rows: e.rows,
        io_curve,
    });

    let summary = Summary {
        schema_version: 1,
        config: Some(serde_json::to_value(cfg)?),
        datasets,
        training,
        probe,
        erasure,
        aliasing: AliasingSection {
            fs: fs_hz,
            patch_len: cfg.model.patch_len,
            collapse_bound: collapse_bound(cfg.signal.f_min, cfg.signal.f_max),
            harmonics: aliasing_harmonics(cfg.signal.f_min, cfg.signal.f_max, fs_hz, p),
        },
        warnings,
    };
    for w in &summary.warnings {
        log::warn!("{w}");
    }
    write_json(&layout.summary(), &summary)?;
    println!("wrote {}", layout.summary().display());
    Ok(summary)
}
