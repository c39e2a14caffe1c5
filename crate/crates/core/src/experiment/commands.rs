use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{require, write_json, write_text, ExperimentConfig};
use crate::eraser::{self, ErasureRow};
use crate::error::{Error, Result};
use crate::model::{self, ErasedForecaster, Forecaster};
use crate::probe::{self, ProbeReport, ProbeTarget};
use crate::rng::derive_seed;
use crate::signal::{self, Split, TaskName};
use crate::spectral;
use crate::store::{self, ErasureRecord, TapId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCounts {
    pub windows: usize,
    /// `Σ_f S_f` over the task's frequencies.
    pub expected: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSummary {
    pub tasks: BTreeMap<String, TaskCounts>,
    pub erasure_windows: usize,
    pub erasure_train: usize,
    pub erasure_test: usize,
}

/// Writes one probe dataset per task and the continuous-phase erasure set.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<GenSummary> {
    let layout = cfg.layout();
    write_json(&layout.resolved_config(), cfg)?;
    let jobs: Vec<(TaskName, TaskCounts)> = cfg
        .tasks
        .par_iter()
        .map(|&name| {
            let task = signal::task_by_name(&cfg.signal, name)?;
            let seed = derive_seed(cfg.signal.seed, &format!("dataset/{name}"));
            let ds = signal::build_probe_dataset(&cfg.signal, &task, cfg.signal.cap, &cfg.split, seed)?;
            store::write_dataset(layout.dataset(name), name.as_str(), &ds)?;
            Ok((
                name,
                TaskCounts {
                    windows: ds.len(),
                    expected: signal::probe_window_count(&cfg.signal, &task, cfg.signal.cap)?,
                    train: ds.train.len(),
                    validation: ds.validation.len(),
                    test: ds.test.len(),
                },
            ))
        })
        .collect::<Result<_>>()?;

    let erasure = signal::build_erasure_dataset_with(
        &cfg.signal,
        &cfg.erasure.dataset,
        derive_seed(cfg.signal.seed, "dataset/erasure"),
    )?;
    store::write_dataset(layout.erasure_dataset(), "erasure", &erasure)?;

    let summary = GenSummary {
        tasks: jobs.into_iter().map(|(n, c)| (n.to_string(), c)).collect(),
        erasure_windows: erasure.len(),
        erasure_train: erasure.train.len(),
        erasure_test: erasure.test.len(),
    };
    for (name, c) in &summary.tasks {
        println!(
            "{name}: {} windows (train {}, validation {}, test {})",
            c.windows, c.train, c.validation, c.test
        );
    }
    println!(
        "erasure: {} windows (train {}, test {})",
        summary.erasure_windows, summary.erasure_train, summary.erasure_test
    );
    write_json(&layout.gen_summary(), &summary)?;
    Ok(summary)
}

/// Trains the surrogate on random-phase sinusoids and saves its weights.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<model::TrainReport> {
    let layout = cfg.layout();
    write_json(&layout.resolved_config(), cfg)?;
    let length = cfg.model.context_len + cfg.model.horizon;
    let corpus = model::sinusoid_corpus(&cfg.signal, length, cfg.training.n_windows, cfg.training.seed)?;
    let mut forecaster = Forecaster::new(cfg.model.clone(), derive_seed(cfg.seed, "init"))?;
    log::info!("training {} parameters on {} windows", forecaster.n_parameters(), corpus.len());
    let report = model::train_quantile(&mut forecaster, &corpus, &cfg.training)?;
    forecaster.save(layout.weights())?;
    write_json(&layout.train_report(), &report)?;
    if let Some(last) = report.epoch_losses.last() {
        println!("trained {} steps, final epoch loss {last:.5}", report.steps);
    }
    Ok(report)
}

pub(crate) fn load_model(cfg: &ExperimentConfig) -> Result<Forecaster> {
    let path = cfg.layout().weights();
    require(&path, "surrogate weights (run `freqprobe train` first)")?;
    let model = Forecaster::load(&path)?;
    if model.config().context_len != cfg.signal.window_len {
        return Err(Error::config(
            "model.context_len",
            "stored weights do not match the configured window length",
        ));
    }
    Ok(model)
}

/// Extracts activations at the configured taps for every task dataset.
pub fn cmd_tap(cfg: &ExperimentConfig) -> Result<()> {
    let layout = cfg.layout();
    write_json(&layout.resolved_config(), cfg)?;
    let model = load_model(cfg)?;
    for &name in &cfg.tasks {
        let path = layout.dataset(name);
        require(&path, &format!("dataset for task {name}"))?;
        let (_, ds) = store::read_dataset(&path)?;
        let rows: Vec<_> = ds.iter().collect();
        let windows: Vec<&[f64]> = rows.iter().map(|(_, w, _)| w.samples.as_slice()).collect();
        let labels: Vec<i32> = rows.iter().map(|(_, _, y)| *y).collect();
        let freqs: Vec<i32> = rows.iter().map(|(_, w, _)| w.frequency as i32).collect();
        let sets = model.activation_sets(&windows, &labels, &freqs, &[])?;
        for set in sets.iter().filter(|s| cfg.taps.contains(&s.tap)) {
            store::write_activations(layout.activations(name, set.tap), set)?;
        }
        println!("{name}: tapped {} windows", windows.len());
    }
    Ok(())
}

/// True and control probe reports for one (task, tap) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRun {
    pub task: TaskName,
    pub tap: TapId,
    pub report: ProbeReport,
    pub control: ProbeReport,
}

fn split_codes(cfg: &ExperimentConfig, task: TaskName, n: usize) -> Result<Option<Vec<Split>>> {
    let path = cfg.layout().dataset(task);
    if !path.exists() {
        return Ok(None);
    }
    let (_, ds) = store::read_dataset(&path)?;
    if ds.len() != n {
        log::warn!("dataset for {task} has {} rows, activations {n}; using a random hold-out", ds.len());
        return Ok(None);
    }
    Ok(Some(ds.iter().map(|(s, _, _)| s).collect()))
}

/// Runs a true and a control probe for every configured (task, tap) pair.
pub fn cmd_probe(cfg: &ExperimentConfig) -> Result<Vec<ProbeRun>> {
    let layout = cfg.layout();
    write_json(&layout.resolved_config(), cfg)?;
    let pairs: Vec<(TaskName, TapId)> = cfg
        .tasks
        .iter()
        .flat_map(|&t| cfg.taps.iter().map(move |&tap| (t, tap)))
        .collect();
    for &(task, tap) in &pairs {
        require(&layout.activations(task, tap), &format!("activations for task {task}, tap {tap}"))?;
    }
    let runs: Vec<ProbeRun> = pairs
        .par_iter()
        .map(|&(name, tap)| {
            let set = store::read_activations(layout.activations(name, tap))?;
            if set.tap != tap {
                return Err(Error::InvalidRecord(format!(
                    "file for tap {tap} holds activations of tap {}",
                    set.tap
                )));
            }
            let split = split_codes(cfg, name, set.len())?;
            let task = signal::task_by_name(&cfg.signal, name)?;
            let probe_cfg = probe::ProbeConfig {
                seed: derive_seed(cfg.probe.seed, &format!("{name}/{tap}")),
                ..cfg.probe.clone()
            };
            let target = ProbeTarget::Band(task);
            let run = |control| {
                probe::run_probe(&set, &target, &probe_cfg, control, split.as_deref())
                    .map_err(|e| e.context(format!("probe {name}/{tap}")))
            };
            Ok(ProbeRun {
                task: name,
                tap,
                report: run(false)?,
                control: run(true)?,
            })
        })
        .collect::<Result<_>>()?;

    let mut sv = String::from("layer,task,sv,sv_control,accuracy\n");
    for r in &runs {
        writeln!(
            sv,
            "{},{},{:.6},{:.6},{:.6}",
            r.tap, r.task, r.report.space_saving, r.control.space_saving, r.report.accuracy
        )
        .expect("writing to a string");
    }
    write_text(&layout.sv_csv(), &sv)?;

    let mut acc = String::from("task,layer,f_hz,accuracy\n");
    for r in &runs {
        let task = signal::task_by_name(&cfg.signal, r.task)?;
        for f in cfg.signal.band() {
            let cell = if !task.contains(f) {
                "excluded".to_string()
            } else {
                r.report
                    .per_frequency_accuracy
                    .get(&f)
                    .map(|a| format!("{a:.6}"))
                    .unwrap_or_default()
            };
            writeln!(acc, "{},{},{f},{cell}", r.task, r.tap).expect("writing to a string");
        }
    }
    write_text(&layout.accuracy_csv(), &acc)?;
    write_json(&layout.probe_reports(), &runs)?;
    for r in &runs {
        println!(
            "{:>3} {:>4}: sv {:+.4}  control {:+.4}  accuracy {:.3}",
            r.task, r.tap, r.report.space_saving, r.control.space_saving, r.report.accuracy
        );
    }
    Ok(runs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErasureOutput {
    pub task: TaskName,
    pub alpha: f64,
    pub rows: Vec<ErasureRowOut>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErasureRowOut {
    pub subset: String,
    pub mse: f64,
    pub rmse: f64,
    pub p_value: Option<f64>,
    pub significant: bool,
    pub rank_removed: Vec<usize>,
}

/// Sequential erasure over every configured subset, then the baseline
/// input/output frequency curve.
pub fn cmd_erase(cfg: &ExperimentConfig) -> Result<Vec<ErasureRow>> {
    let layout = cfg.layout();
    write_json(&layout.resolved_config(), cfg)?;
    let model = load_model(cfg)?;
    let path = layout.erasure_dataset();
    require(&path, "erasure dataset (run `freqprobe gen` first)")?;
    let (_, dataset) = store::read_dataset(&path)?;
    let task = signal::task_by_name(&cfg.signal, cfg.erasure.task)?;
    let subsets = cfg
        .tap_subsets
        .iter()
        .map(|s| eraser::subset_taps(s))
        .collect::<Result<Vec<_>>>()?;
    let rows = eraser::erasure_experiment(&model, &dataset, &task, &subsets, cfg.signal.fs)?;

    let mut csv = String::from("subset,rmse,p_value,significant\n");
    for row in &rows {
        let p = row.p_value.map(|p| format!("{p:.6e}")).unwrap_or_default();
        writeln!(csv, "{},{:.6},{p},{}", row.subset, row.rmse, row.significant(cfg.erasure.alpha))
            .expect("writing to a string");
        for e in &row.erasers {
            store::write_eraser(layout.eraser(&row.subset, e.tap), &e.to_record())?;
        }
        println!("{:>8}: rmse {:.3} Hz  p {}", row.subset, row.rmse, if p.is_empty() { "-" } else { &p });
    }
    write_text(&layout.erasure_csv(), &csv)?;
    write_json(
        &layout.erasure_json(),
        &ErasureOutput {
            task: cfg.erasure.task,
            alpha: cfg.erasure.alpha,
            rows: rows
                .iter()
                .map(|r| ErasureRowOut {
                    subset: r.subset.clone(),
                    mse: r.mse,
                    rmse: r.rmse,
                    p_value: r.p_value,
                    significant: r.significant(cfg.erasure.alpha),
                    rank_removed: r.erasers.iter().map(|e| e.rank_removed).collect(),
                })
                .collect(),
        },
    )?;

    let freqs: Vec<u32> = cfg
        .signal
        .band()
        .step_by(cfg.erasure.io_frequency_step as usize)
        .collect();
    let none: [ErasureRecord; 0] = [];
    let curve = spectral::input_output_curve(
        &ErasedForecaster {
            model: &model,
            erasers: &none,
        },
        &cfg.signal,
        &freqs,
        cfg.erasure.io_windows,
        derive_seed(cfg.seed, "io-curve"),
    )?;
    let mut io = String::from("f,mean_fhat,std_fhat\n");
    for p in &curve {
        writeln!(io, "{},{:.6},{:.6}", p.f, p.mean_fhat, p.std_fhat).expect("writing to a string");
    }
    write_text(&layout.io_curve(), &io)?;
    Ok(rows)
}
