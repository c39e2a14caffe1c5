use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use freqprobe::experiment::SUMMARY_SCHEMA;
use serde_json::{json, Value};

fn freqprobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_freqprobe"))
        .args(args)
        .env("FREQPROBE_WORKERS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn tiny_config() -> Value {
    json!({
        "signal": { "cap": 2 },
        "model": { "d_model": 16, "d_ff": 32, "n_enc": 1, "n_heads": 2 },
        "training": { "n_windows": 16, "epochs": 1, "batch_size": 8 },
        "probe": { "steps_per_batch": 2, "batch_size": 64 },
        "erasure": {
            "dataset": { "n_phases": 2, "frequency_step": 8 },
            "io_windows": 1,
            "io_frequency_step": 40
        },
        "tasks": ["Mid", "HH"],
        "taps": ["dec0", "out"],
        "tap_subsets": [[0], [0, 1, 2, 3, 4]]
    })
}

fn write_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn run_stage(stage: &str, config: &Path, out: &Path) -> Output {
    let out = freqprobe(&[
        stage,
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "7",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{stage} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Checks `value` against the subset of JSON Schema used by the summary schema.
fn conforms(schema: &Value, value: &Value, at: &str) -> Result<(), String> {
    if let Some(t) = schema.get("type") {
        let types: Vec<&str> = match t {
            Value::String(s) => vec![s.as_str()],
            Value::Array(a) => a.iter().map(|v| v.as_str().unwrap()).collect(),
            _ => return Err(format!("{at}: bad type keyword")),
        };
        let ok = types.iter().any(|t| match *t {
            "null" => value.is_null(),
            "boolean" => value.is_boolean(),
            "object" => value.is_object(),
            "array" => value.is_array(),
            "string" => value.is_string(),
            "number" => value.is_number(),
            "integer" => value.is_i64() || value.is_u64(),
            _ => false,
        });
        if !ok {
            return Err(format!("{at}: expected {types:?}, found {value}"));
        }
    }
    if let Some(allowed) = schema.get("enum").and_then(Value::as_array) {
        if !allowed.contains(value) {
            return Err(format!("{at}: {value} not in enum"));
        }
    }
    if let Some(obj) = value.as_object() {
        for key in schema.get("required").and_then(Value::as_array).into_iter().flatten() {
            let key = key.as_str().unwrap();
            if !obj.contains_key(key) {
                return Err(format!("{at}: missing `{key}`"));
            }
        }
        if let Some(props) = schema.get("properties").and_then(Value::as_object) {
            for (key, sub) in props {
                if let Some(v) = obj.get(key) {
                    conforms(sub, v, &format!("{at}.{key}"))?;
                }
            }
        }
    }
    if let (Some(items), Some(arr)) = (schema.get("items"), value.as_array()) {
        for (i, v) in arr.iter().enumerate() {
            conforms(items, v, &format!("{at}[{i}]"))?;
        }
    }
    Ok(())
}

#[test]
fn full_pipeline_writes_every_output_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "cfg.json", &tiny_config());
    let out = dir.path().join("run");

    let gen = run_stage("gen", &config, &out);
    assert!(String::from_utf8_lossy(&gen.stdout).contains("Mid"));
    let first_dataset = fs::read(out.join("datasets/Mid.fqpb")).unwrap();
    run_stage("train", &config, &out);
    let first_weights = fs::read(out.join("model/weights.fqpb")).unwrap();
    for stage in ["tap", "probe", "erase", "report"] {
        run_stage(stage, &config, &out);
    }

    for file in [
        "config.resolved.json",
        "datasets/erasure.fqpb",
        "datasets/summary.json",
        "model/train_report.json",
        "activations/Mid/dec0.fqpb",
        "activations/HH/out.fqpb",
        "sv_by_layer_task.csv",
        "accuracy_by_frequency.csv",
        "probe_reports.json",
        "erasure_rmse.csv",
        "erasure.json",
        "erasers/0/dec0.fqpb",
        "erasers/01234/out.fqpb",
        "io_curve.csv",
        "summary.json",
    ] {
        assert!(out.join(file).is_file(), "{file} missing");
    }

    let sv = fs::read_to_string(out.join("sv_by_layer_task.csv")).unwrap();
    assert_eq!(sv.lines().count(), 1 + 2 * 2);
    let rmse = fs::read_to_string(out.join("erasure_rmse.csv")).unwrap();
    let subsets: Vec<&str> = rmse.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(subsets, ["baseline", "0", "01234"]);

    let schema: Value = serde_json::from_str(SUMMARY_SCHEMA).unwrap();
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    conforms(&schema, &summary, "summary").unwrap();
    assert_eq!(summary["warnings"], json!([]));
    assert_eq!(summary["config"]["seed"], json!(7));

    // Same config and seed reproduce the same bytes.
    run_stage("gen", &config, &out);
    run_stage("train", &config, &out);
    assert_eq!(fs::read(out.join("datasets/Mid.fqpb")).unwrap(), first_dataset);
    assert_eq!(fs::read(out.join("model/weights.fqpb")).unwrap(), first_weights);
}

#[test]
fn report_without_inputs_warns_and_still_validates() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "cfg.json", &tiny_config());
    let out = dir.path().join("empty");
    run_stage("report", &config, &out);
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    conforms(&serde_json::from_str(SUMMARY_SCHEMA).unwrap(), &summary, "summary").unwrap();
    assert!(summary["probe"].is_null());
    assert!(summary["warnings"].as_array().unwrap().len() >= 4);
    assert_eq!(summary["aliasing"]["harmonics"], json!([32, 64, 96, 128, 160, 192, 224]));
}

#[test]
fn schema_validator_catches_violations() {
    let schema: Value = serde_json::from_str(SUMMARY_SCHEMA).unwrap();
    assert!(conforms(&schema, &json!({}), "summary").is_err());
    assert!(conforms(&schema, &json!({"schema_version": "one"}), "summary").is_err());
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();

    let missing = dir.path().join("nope.json");
    assert_eq!(code(&freqprobe(&["gen", "--config", missing.to_str().unwrap()])), 2);

    let mut bad = tiny_config();
    bad["probe"]["ema_decay"] = json!(2.0);
    let bad = write_config(dir.path(), "bad.json", &bad);
    let failed = freqprobe(&["gen", "--config", bad.to_str().unwrap(), "--out", out_s]);
    assert_eq!(code(&failed), 2);
    assert!(String::from_utf8_lossy(&failed.stderr).contains("probe.ema_decay"));

    let unknown = write_config(dir.path(), "unknown.json", &json!({"signal": {"fz": 3}}));
    assert_eq!(code(&freqprobe(&["gen", "--config", unknown.to_str().unwrap()])), 2);

    let config = write_config(dir.path(), "cfg.json", &tiny_config());
    let cfg_s = config.to_str().unwrap();
    assert_eq!(code(&freqprobe(&["tap", "--config", cfg_s, "--out", out_s])), 3);
    assert_eq!(code(&freqprobe(&["erase", "--config", cfg_s, "--out", out_s])), 3);

    let mut wild = tiny_config();
    wild["probe"]["lr"] = json!(1e300);
    let wild = write_config(dir.path(), "wild.json", &wild);
    let wild_s = wild.to_str().unwrap();
    for stage in ["gen", "train", "tap"] {
        assert_eq!(code(&freqprobe(&[stage, "--config", wild_s, "--out", out_s])), 0, "{stage}");
    }
    assert_eq!(code(&freqprobe(&["probe", "--config", wild_s, "--out", out_s])), 4);

    assert_ne!(code(&freqprobe(&["frobnicate"])), 0);
}
