//! Subcommand implementations behind the `fedpia` binary.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{gen_synthetic, write_tabular, SyntheticSpec};
use crate::error::{Error, Result};
use crate::fedsim::{run_experiment_with, ExperimentConfig, Method, RoundMetrics, RunSummary};
use crate::model::{encode_checkpoint, Checkpoint};
use crate::pia::CostMode;
use crate::verify::{run_all, OracleReport, VerifyOptions};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Reads a TOML experiment config. Missing keys take their defaults;
/// unknown keys are rejected.
pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// SHA-256 of the config's canonical JSON form (object keys sorted), so
/// two files that differ only in key order hash the same.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let value = serde_json::to_value(cfg).expect("config serializes");
    let canonical = serde_json::to_string(&value).expect("value serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: u64,
    pub metrics_file: String,
    pub checkpoints: Vec<String>,
    pub code_version: String,
}

/// One line of the metrics file.
#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Record<'a> {
    Round {
        method: Method,
        seed: u64,
        #[serde(flatten)]
        metrics: &'a RoundMetrics,
    },
    Summary(&'a RunSummary),
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn write_line(out: &mut impl Write, path: &Path, record: &Record<'_>) -> Result<()> {
    let line = serde_json::to_string(record).expect("records serialize");
    writeln!(out, "{line}").map_err(|e| Error::io(path, e))
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Runs every configured method under every seed, streaming metrics to
/// `out_dir/metrics.jsonl`, then writes per-client checkpoints and, last,
/// the manifest. `seed` replaces the configured seed list.
pub fn run_config(cfg: &ExperimentConfig, out_dir: &Path, seed: Option<u64>) -> Result<RunManifest> {
    let mut cfg = cfg.clone();
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    let started_at = unix_now();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    }
    let metrics_path = out_dir.join(METRICS_FILE);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut out = BufWriter::new(file);
    let ckpt_dir = out_dir.join("checkpoints");
    let mut checkpoints = Vec::new();

    for &method in &cfg.methods {
        for &seed in &cfg.seeds {
            let outcome = run_experiment_with(&cfg, method, seed, |m| {
                write_line(
                    &mut out,
                    &metrics_path,
                    &Record::Round {
                        method,
                        seed,
                        metrics: m,
                    },
                )
            })?;
            write_line(&mut out, &metrics_path, &Record::Summary(&outcome.summary))?;
            fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
            let step = (cfg.rounds * cfg.local_steps) as u64;
            for (k, (adapters, head)) in outcome.final_clients.into_iter().enumerate() {
                let name = format!("{}-seed{seed}-client{k}.ckpt", method.name());
                let bytes = encode_checkpoint(&Checkpoint {
                    seed,
                    step,
                    adapters,
                    head,
                })?;
                let path = ckpt_dir.join(&name);
                write_atomic(&path, &bytes)?;
                checkpoints.push(format!("checkpoints/{name}"));
            }
        }
    }
    let file = out.into_inner().map_err(|e| Error::io(&metrics_path, e.into_error()))?;
    file.sync_all().map_err(|e| Error::io(&metrics_path, e))?;

    let manifest = RunManifest {
        config_hash: config_hash(&cfg),
        methods: cfg.methods.clone(),
        seeds: cfg.seeds.clone(),
        started_at,
        finished_at: unix_now(),
        metrics_file: METRICS_FILE.into(),
        checkpoints,
        code_version: env!("CARGO_PKG_VERSION").into(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&manifest_path, json.as_bytes())?;
    Ok(manifest)
}

pub fn cmd_run(config_path: &Path, out_dir: &Path, seed: Option<u64>) -> Result<RunManifest> {
    let cfg = parse_config(config_path)?;
    run_config(&cfg, out_dir, seed)
}

/// Runs every oracle, writing one line per oracle. Returns whether all
/// passed.
pub fn cmd_verify(out: &mut impl Write, opts: &VerifyOptions) -> Result<bool> {
    let reports = run_all(opts)?;
    for r in &reports {
        write_report(out, r);
    }
    Ok(reports.iter().all(|r| r.passed))
}

fn write_report(out: &mut impl Write, r: &OracleReport) {
    let status = if r.passed { "PASS" } else { "FAIL" };
    // Report output is best effort; a closed pipe must not mask the verdict.
    let _ = writeln!(out, "{status} {} ({} cases): {}", r.name, r.cases, r.detail);
}

pub const SWEEP_PARAMS: [&str; 7] = [
    "gamma",
    "lambda_merge",
    "concentration",
    "client_cost_mode",
    "server_pia_on",
    "client_pia_on",
    "dataset_fraction",
];

fn parse_value<T: std::str::FromStr>(param: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::Config(format!("value {raw:?} is not valid for {param}")))
}

/// Sets one sweepable parameter from its textual value.
pub fn apply_param(cfg: &mut ExperimentConfig, param: &str, raw: &str) -> Result<()> {
    match param {
        "gamma" => cfg.fusion.gamma = parse_value(param, raw)?,
        "lambda_merge" => cfg.fusion.lambda_merge = parse_value(param, raw)?,
        "concentration" => cfg.data.concentration = parse_value(param, raw)?,
        "client_cost_mode" => {
            cfg.fusion.client_cost_mode = match raw.trim() {
                "weight" => CostMode::Weight,
                "activation" => CostMode::Activation,
                other => {
                    return Err(Error::Config(format!(
                        "client_cost_mode must be weight or activation, got {other:?}"
                    )))
                }
            }
        }
        "server_pia_on" => cfg.server_pia_on = parse_value(param, raw)?,
        "client_pia_on" => cfg.client_pia_on = parse_value(param, raw)?,
        "dataset_fraction" => cfg.dataset_fraction = parse_value(param, raw)?,
        other => {
            return Err(Error::Config(format!(
                "unknown sweep parameter {other:?}; expected one of {}",
                SWEEP_PARAMS.join(", ")
            )))
        }
    }
    cfg.validate()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub method: Method,
    pub seeds: usize,
    pub mean_final_accuracy: f64,
    pub mean_final_macro_f1: f64,
    pub mean_spike_score: f64,
}

fn read_summaries(path: &Path) -> Result<Vec<RunSummary>> {
    #[derive(Deserialize)]
    struct Tagged {
        #[serde(rename = "type")]
        kind: String,
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let bad = |e: serde_json::Error| Error::Parse {
            line: i as u64 + 1,
            msg: e.to_string(),
        };
        let tag: Tagged = serde_json::from_str(line).map_err(bad)?;
        if tag.kind == "summary" {
            out.push(serde_json::from_str(line).map_err(bad)?);
        }
    }
    Ok(out)
}

/// One full run per value, each in `out_dir/<param>=<value>/`, plus a
/// comparison table in `out_dir/sweep.csv`.
pub fn sweep_config(
    cfg: &ExperimentConfig,
    param: &str,
    values: &[String],
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| {
            let mut c = cfg.clone();
            apply_param(&mut c, param, v)?;
            Ok((v.trim().to_string(), c))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (value, c) in configs {
        let dir = out_dir.join(format!("{param}={value}"));
        run_config(&c, &dir, None)?;
        let summaries = read_summaries(&dir.join(METRICS_FILE))?;
        for &method in &c.methods {
            let runs: Vec<&RunSummary> = summaries.iter().filter(|s| s.method == method).collect();
            let mean = |f: fn(&RunSummary) -> f64| runs.iter().map(|s| f(s)).sum::<f64>() / runs.len() as f64;
            rows.push(SweepRow {
                param: param.to_string(),
                value: value.clone(),
                method,
                seeds: runs.len(),
                mean_final_accuracy: mean(|s| s.final_mean_accuracy),
                mean_final_macro_f1: mean(|s| s.final_mean_macro_f1),
                mean_spike_score: mean(|s| s.spike_score),
            });
        }
    }
    let table = out_dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&table).map_err(|e| Error::Config(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Config(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&table, e))?;
    Ok(rows)
}

pub fn cmd_sweep(config_path: &Path, param: &str, values: &[String], out_dir: &Path) -> Result<Vec<SweepRow>> {
    let cfg = parse_config(config_path)?;
    sweep_config(&cfg, param, values, out_dir)
}

/// Generates a synthetic dataset from a TOML [`SyntheticSpec`] and writes
/// it as CSV.
pub fn cmd_gen_data(spec_path: &Path, out: &Path) -> Result<usize> {
    let text = fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let spec: SyntheticSpec =
        toml::from_str(&text).map_err(|e| Error::Config(e.message().to_string()))?;
    let ds = gen_synthetic(&spec)?;
    write_tabular(&ds, out)?;
    Ok(ds.len())
}

/// Human-readable sweep table.
pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut s = format!(
        "{:<18} {:<10} {:<16} {:>9} {:>9} {:>9}\n",
        "param", "value", "method", "accuracy", "macro_f1", "spike"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<18} {:<10} {:<16} {:>9.4} {:>9.4} {:>9.5}\n",
            r.param,
            r.value,
            r.method.name(),
            r.mean_final_accuracy,
            r.mean_final_macro_f1,
            r.mean_spike_score
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        assert_eq!(parse_config_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn override_keeps_other_defaults() {
        let cfg = parse_config_str("rounds = 5\n").unwrap();
        assert_eq!(cfg.rounds, 5);
        assert_eq!(
            ExperimentConfig { rounds: 30, ..cfg },
            ExperimentConfig::default()
        );
    }

    #[test]
    fn unknown_and_mistyped_keys() {
        let err = parse_config_str("[fusion]\ngamna = 2.0\n").unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("gamna")), "{err}");
        let err = parse_config_str("rounds = \"many\"\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = parse_config_str("rounds = 4\nbatch_size = 8\n[fusion]\ngamma = 0.5\n").unwrap();
        let b = parse_config_str("batch_size = 8\n[fusion]\ngamma = 0.5\n[data]\n").unwrap();
        let b = ExperimentConfig { rounds: 4, ..b };
        assert_eq!(config_hash(&a), config_hash(&b));
        let c = ExperimentConfig { rounds: 5, ..a.clone() };
        assert_ne!(config_hash(&a), config_hash(&c));
        assert_eq!(config_hash(&a).len(), 64);
    }

    #[test]
    fn sweep_params_apply() {
        let mut cfg = ExperimentConfig::default();
        apply_param(&mut cfg, "client_cost_mode", "weight").unwrap();
        assert_eq!(cfg.fusion.client_cost_mode, CostMode::Weight);
        apply_param(&mut cfg, "server_pia_on", "false").unwrap();
        assert!(!cfg.server_pia_on);
        apply_param(&mut cfg, "dataset_fraction", "0.4").unwrap();
        assert_eq!(cfg.dataset_fraction, 0.4);
        assert!(matches!(apply_param(&mut cfg, "gamna", "1"), Err(Error::Config(_))));
        assert!(matches!(apply_param(&mut cfg, "lambda_merge", "2"), Err(Error::Config(_))));
    }
}
