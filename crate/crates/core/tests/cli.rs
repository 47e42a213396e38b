use std::fs;
use std::path::Path;
use std::process::Command;

use fedpia::cli::{
    cmd_gen_data, cmd_run, cmd_verify, config_hash, parse_config, parse_config_str, run_config,
    sweep_config, MANIFEST_FILE, METRICS_FILE,
};
use fedpia::data::{load_tabular, TabularSchema, TaskKind};
use fedpia::fedsim::ExperimentConfig;
use fedpia::pia::AlignmentFault;
use fedpia::verify::VerifyOptions;
use fedpia::Error;

const SMOKE: &str = r#"
clients = 2
rounds = 2
local_steps = 5
base_lr = 0.001
seeds = [3]

[data]
samples_per_client = 40
"#;

fn smoke() -> ExperimentConfig {
    parse_config_str(SMOKE).unwrap()
}

fn lines(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn smoke_run_writes_two_rounds_per_method() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("smoke.toml");
    fs::write(&cfg_path, SMOKE).unwrap();
    let out = dir.path().join("out");
    let manifest = cmd_run(&cfg_path, &out, None).unwrap();

    let records = lines(&out.join(METRICS_FILE));
    for method in ["fedpia", "fedavg_adapters"] {
        let rounds: Vec<_> = records
            .iter()
            .filter(|r| r["type"] == "round" && r["method"] == method)
            .collect();
        assert_eq!(rounds.len(), 2, "{method}");
        assert_eq!(rounds[0]["round"], 1);
        assert_eq!(rounds[1]["round"], 2);
        for r in rounds {
            for c in r["clients"].as_array().unwrap() {
                assert!(c["loss_at_round_start"].as_f64().unwrap().is_finite());
                assert!(c["loss_at_round_end"].as_f64().unwrap().is_finite());
            }
        }
        assert_eq!(
            records
                .iter()
                .filter(|r| r["type"] == "summary" && r["method"] == method)
                .count(),
            1
        );
    }

    let on_disk: fedpia::cli::RunManifest =
        serde_json::from_str(&fs::read_to_string(out.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk, manifest);
    assert_eq!(manifest.seeds, vec![3]);
    assert_eq!(manifest.checkpoints.len(), 2 * 2);
    for c in &manifest.checkpoints {
        let bytes = fs::read(out.join(c)).unwrap();
        fedpia::model::decode_checkpoint(&bytes).unwrap();
    }
    assert_eq!(manifest.config_hash, config_hash(&smoke()));
}

#[test]
fn seed_flag_replaces_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_config(&smoke(), dir.path(), Some(11)).unwrap();
    assert_eq!(m.seeds, vec![11]);
    let records = lines(&dir.path().join(METRICS_FILE));
    assert!(records.iter().all(|r| r["seed"] == 11));
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_config(&smoke(), &a, None).unwrap();
    run_config(&smoke(), &b, None).unwrap();
    assert_eq!(fs::read(a.join(METRICS_FILE)).unwrap(), fs::read(b.join(METRICS_FILE)).unwrap());
    // Rerunning into the same directory replaces, not appends.
    run_config(&smoke(), &a, None).unwrap();
    assert_eq!(fs::read(a.join(METRICS_FILE)).unwrap(), fs::read(b.join(METRICS_FILE)).unwrap());
}

#[test]
fn unwritable_output_leaves_no_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("blocker");
    fs::write(&blocker, "not a directory").unwrap();
    let out = blocker.join("out");
    let err = run_config(&smoke(), &out, None).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
    assert!(!out.join(MANIFEST_FILE).exists());

    let bin = env!("CARGO_BIN_EXE_fedpia");
    let cfg_path = dir.path().join("smoke.toml");
    fs::write(&cfg_path, SMOKE).unwrap();
    let status = Command::new(bin)
        .args(["run", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(!status.status.success());
    assert!(String::from_utf8_lossy(&status.stderr).contains("error"));
}

#[test]
fn config_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "[fusion]\ngamna = 1.0\n").unwrap();
    let err = parse_config(&p).unwrap_err();
    assert!(err.to_string().contains("gamna"));
    assert!(matches!(parse_config(dir.path().join("missing.toml")), Err(Error::Io { .. })));
}

#[test]
fn verify_passes_and_is_deterministic() {
    let mut first = Vec::new();
    assert!(cmd_verify(&mut first, &VerifyOptions::default()).unwrap());
    let mut second = Vec::new();
    assert!(cmd_verify(&mut second, &VerifyOptions::default()).unwrap());
    assert_eq!(first, second);
    let text = String::from_utf8(first).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn verify_catches_sign_error_in_alignment() {
    let mut out = Vec::new();
    let opts = VerifyOptions {
        seed: 0,
        alignment_fault: AlignmentFault::NegateAligned,
    };
    assert!(!cmd_verify(&mut out, &opts).unwrap());
    let text = String::from_utf8(out).unwrap();
    let line = text.lines().find(|l| l.contains("planted_permutation")).unwrap();
    assert!(line.starts_with("FAIL") && line.contains("perms="), "{line}");
}

#[test]
fn verify_binary_exit_status() {
    let out = Command::new(env!("CARGO_BIN_EXE_fedpia")).arg("verify").output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 4);
}

#[test]
fn sweep_server_pia_gives_a_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    let values = vec!["true".to_string(), "false".to_string()];
    let rows = sweep_config(&smoke(), "server_pia_on", &values, dir.path()).unwrap();
    assert_eq!(rows.len(), 2 * 2);
    for v in &values {
        assert!(dir.path().join(format!("server_pia_on={v}")).join(METRICS_FILE).exists());
    }
    let table = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + rows.len());
}

#[test]
fn sweep_dataset_fraction_runs_five_times() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke();
    cfg.methods = vec![fedpia::fedsim::Method::Fedpia];
    let values: Vec<String> = ["1.0", "0.8", "0.6", "0.4", "0.2"].iter().map(|s| s.to_string()).collect();
    let rows = sweep_config(&cfg, "dataset_fraction", &values, dir.path()).unwrap();
    assert_eq!(rows.len(), 5);
    let sizes: Vec<u64> = values
        .iter()
        .map(|v| {
            let recs = lines(&dir.path().join(format!("dataset_fraction={v}")).join(METRICS_FILE));
            recs[0]["clients"][0]["train_size"].as_u64().unwrap()
        })
        .collect();
    assert!(sizes.windows(2).all(|w| w[0] > w[1]), "{sizes:?}");
}

#[test]
fn sweep_gamma_zero_is_plain_mean() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke();
    cfg.clients = 3;
    cfg.methods = vec![fedpia::fedsim::Method::Fedpia];
    let values = vec!["0".to_string(), "1".to_string()];
    sweep_config(&cfg, "gamma", &values, dir.path()).unwrap();

    // With unit weights, dividing by K and by the weight sum coincide.
    let mut plain = cfg.clone();
    plain.fusion.gamma = 0.0;
    plain.fusion.normalize_weights = true;
    let other = dir.path().join("plain");
    run_config(&plain, &other, None).unwrap();
    assert_eq!(
        fs::read(dir.path().join("gamma=0").join(METRICS_FILE)).unwrap(),
        fs::read(other.join(METRICS_FILE)).unwrap()
    );
}

#[test]
fn unknown_sweep_param_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = sweep_config(&smoke(), "learning_rate", &["1".into()], dir.path()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn gen_data_writes_loadable_csv() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, "seed = 4\nn_samples = 30\ndim = 3\nnum_classes = 3\n").unwrap();
    let out = dir.path().join("data.csv");
    assert_eq!(cmd_gen_data(&spec, &out).unwrap(), 30);
    let schema = TabularSchema {
        feature_columns: vec!["x0".into(), "x1".into(), "x2".into()],
        label_columns: vec!["label".into()],
        kind: TaskKind::Single,
        num_classes: 3,
    };
    assert_eq!(load_tabular(&out, &schema).unwrap().len(), 30);

    let status = Command::new(env!("CARGO_BIN_EXE_fedpia"))
        .args(["gen-data", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(dir.path().join("bin.csv"))
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(fs::read(&out).unwrap(), fs::read(dir.path().join("bin.csv")).unwrap());
}

#[test]
fn tabular_scenario_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, "seed = 1\nn_samples = 200\ndim = 4\nnum_classes = 3\n").unwrap();
    let csv = dir.path().join("data.csv");
    cmd_gen_data(&spec, &csv).unwrap();
    let cfg_text = format!(
        r#"
clients = 2
rounds = 2
local_steps = 3
seeds = [0]
[data]
scenario = "tabular"
input_dim = 4
class_masks = false
tabular_path = "{}"
[data.tabular_schema]
feature_columns = ["x0", "x1", "x2", "x3"]
label_columns = ["label"]
num_classes = 3
"#,
        csv.display()
    );
    let cfg = parse_config_str(&cfg_text).unwrap();
    let m = run_config(&cfg, &dir.path().join("out"), None).unwrap();
    assert_eq!(m.checkpoints.len(), 2 * 2);
}
