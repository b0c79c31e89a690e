use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, RunResult, StepRecord};
use crate::models::ModelKind;
use crate::{Error, Result};

pub const RESULTS_HEADER: &str = "dataset,model,strategy,seed,step,acquired_node,macro_f1,step_seconds";
pub const AGGREGATE_HEADER: &str = "dataset,model,strategy,step,mean_f1,std_f1,n_seeds";
/// What `step_seconds` covers.
pub const TIMING_SCOPE: &str = "posterior+scoring+selection+retraining";

/// Six significant digits, shortest representation.
fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

#[derive(Serialize, Deserialize)]
struct RawRow {
    dataset: String,
    model: String,
    strategy: String,
    seed: u64,
    step: usize,
    acquired_node: i64,
    macro_f1: String,
    step_seconds: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub dataset: String,
    pub model: String,
    pub strategy: String,
    pub step: usize,
    pub mean_f1: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std_f1: f64,
    pub n_seeds: usize,
}

/// Per-step mean and spread of macro-F1 for every (dataset, model,
/// strategy), in order of first appearance.
pub fn aggregate(runs: &[RunResult]) -> Vec<AggregateRow> {
    let mut order: Vec<(String, String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String, String), BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for run in runs {
        let key = (run.dataset.clone(), run.model.to_string(), run.strategy.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        let steps = groups.entry(key).or_default();
        for r in &run.records {
            steps.entry(r.step).or_default().push(r.macro_f1);
        }
    }
    let mut rows = Vec::new();
    for key in order {
        for (&step, values) in &groups[&key] {
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            rows.push(AggregateRow {
                dataset: key.0.clone(),
                model: key.1.clone(),
                strategy: key.2.clone(),
                step,
                mean_f1: mean,
                std_f1: std,
                n_seeds: n,
            });
        }
    }
    rows
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        if let csv::ErrorKind::Io(source) = e.into_kind() {
            return Error::io(path, source);
        }
        unreachable!("checked io error");
    }
    malformed(path, e.to_string())
}

fn malformed(path: &Path, message: impl Into<String>) -> Error {
    Error::Results {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn check_header(path: &Path, reader: &mut csv::Reader<File>, expected: &str) -> Result<()> {
    let header = reader.headers().map_err(|e| csv_error(path, e))?;
    let got = header.iter().collect::<Vec<_>>().join(",");
    if got != expected {
        return Err(malformed(path, format!("unexpected header '{got}'")));
    }
    Ok(())
}

/// Writes one row per step per run.
pub fn persist_results(runs: &[RunResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    if runs.is_empty() {
        w.write_record(RESULTS_HEADER.split(',')).map_err(|e| csv_error(path, e))?;
    }
    for run in runs {
        for r in &run.records {
            w.serialize(RawRow {
                dataset: run.dataset.clone(),
                model: run.model.to_string(),
                strategy: run.strategy.clone(),
                seed: run.seed,
                step: r.step,
                acquired_node: r.acquired_node.map_or(-1, |n| n as i64),
                macro_f1: sig6(r.macro_f1),
                step_seconds: sig6(r.step_seconds),
            })
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse_float(path: &Path, line: u64, field: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| malformed(path, format!("line {line}: {field} '{value}' is not a number")))
}

/// Reads a raw results file back into runs, grouped by consecutive
/// (dataset, model, strategy, seed).
pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<RunResult>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    check_header(path, &mut reader, RESULTS_HEADER)?;
    let mut runs: Vec<RunResult> = Vec::new();
    for (i, row) in reader.deserialize::<RawRow>().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| csv_error(path, e))?;
        let model: ModelKind = row
            .model
            .parse()
            .map_err(|_| malformed(path, format!("line {line}: unknown model '{}'", row.model)))?;
        let record = StepRecord {
            step: row.step,
            acquired_node: match row.acquired_node {
                -1 => None,
                n if n >= 0 => Some(n as usize),
                n => return Err(malformed(path, format!("line {line}: acquired_node {n}"))),
            },
            macro_f1: parse_float(path, line, "macro_f1", &row.macro_f1)?,
            step_seconds: parse_float(path, line, "step_seconds", &row.step_seconds)?,
        };
        let same_run = runs.last().is_some_and(|r| {
            r.dataset == row.dataset && r.model == model && r.strategy == row.strategy && r.seed == row.seed
        });
        if same_run && record.step != 0 {
            let run = runs.last_mut().expect("checked above");
            if record.step != run.records.len() {
                return Err(malformed(path, format!("line {line}: step {} out of sequence", record.step)));
            }
            run.records.push(record);
        } else {
            if record.step != 0 {
                return Err(malformed(path, format!("line {line}: run does not start at step 0")));
            }
            runs.push(RunResult {
                dataset: row.dataset,
                model,
                strategy: row.strategy,
                seed: row.seed,
                records: vec![record],
            });
        }
    }
    Ok(runs)
}

pub fn persist_aggregate(rows: &[AggregateRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(AGGREGATE_HEADER.split(',')).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.model.clone(),
            r.strategy.clone(),
            r.step.to_string(),
            sig6(r.mean_f1),
            sig6(r.std_f1),
            r.n_seeds.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_aggregate(path: impl AsRef<Path>) -> Result<Vec<AggregateRow>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    check_header(path, &mut reader, AGGREGATE_HEADER)?;
    reader
        .deserialize::<AggregateRow>()
        .map(|r| r.map_err(|e| csv_error(path, e)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub dataset: String,
    pub strategy: String,
    /// Mean over seeds of the summed step times of one run.
    pub mean_seconds: f64,
    pub runs: usize,
}

/// Mean total run time per (dataset, strategy), in order of first appearance.
pub fn timing_summary(runs: &[RunResult]) -> Result<Vec<TimingRow>> {
    if runs.is_empty() {
        return Err(Error::Empty("timing_summary"));
    }
    let mut rows: Vec<TimingRow> = Vec::new();
    for run in runs {
        let total = run.total_seconds();
        match rows
            .iter_mut()
            .find(|r| r.dataset == run.dataset && r.strategy == run.strategy)
        {
            Some(row) => {
                row.mean_seconds += total;
                row.runs += 1;
            }
            None => rows.push(TimingRow {
                dataset: run.dataset.clone(),
                strategy: run.strategy.clone(),
                mean_seconds: total,
                runs: 1,
            }),
        }
    }
    for row in &mut rows {
        row.mean_seconds /= row.runs as f64;
    }
    Ok(rows)
}

/// JSON sidecar describing how a results file was produced.
pub fn write_metadata(config: &ExperimentConfig, dataset: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let meta = serde_json::json!({
        "dataset": dataset,
        "model": config.model.to_string(),
        "hidden": config.model_config.hidden,
        "sgc_k": config.model_config.sgc_k,
        "strategies": config.strategies.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "budget": config.budget,
        "seeds": config.seed_list(),
        "mc_passes": config.mc_passes,
        "learning_rate": config.train.learning_rate,
        "retrain_steps": config.train.steps,
        "initial_steps": config.train.initial_steps,
        "weight_decay": config.train.weight_decay,
        "dropout": config.train.dropout_rate,
        "inner_steps": config.meta.inner_steps,
        "inner_lr": config.meta.inner_lr,
        "inner_momentum": config.meta.inner_momentum,
        "entropy_fraction": config.meta.entropy_fraction,
        "gamma": format!("{:?}", config.meta.gamma),
        "timing_scope": TIMING_SCOPE,
    });
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut file, &meta)
        .map_err(|e| malformed(path, e.to_string()))?;
    writeln!(file).map_err(|e| Error::io(path, e))
}
