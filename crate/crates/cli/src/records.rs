//! Line-delimited JSON records and the aggregate comparison table.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use safeal::baselines::RunResult;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Wall-clock measurements, kept apart from the reproducible payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub query_seconds: Vec<f64>,
    pub mean_query_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub method: String,
    pub problem: String,
    /// Everything in the result except timing; a pure function of
    /// `(config_hash, seed, method, problem)`.
    pub payload: Value,
    pub timing: Timing,
}

impl RunRecord {
    pub fn new(config_hash: &str, result: &RunResult) -> Self {
        let mut payload = serde_json::to_value(result).expect("results serialize");
        if let Value::Object(m) = &mut payload {
            m.remove("query_seconds");
        }
        let n = result.query_seconds.len().max(1) as f64;
        Self {
            kind: "run".into(),
            config_hash: config_hash.into(),
            seed: result.seed,
            method: result.method.name().into(),
            problem: result.problem.clone(),
            payload,
            timing: Timing {
                query_seconds: result.query_seconds.clone(),
                mean_query_seconds: result.query_seconds.iter().sum::<f64>() / n,
            },
        }
    }

    pub fn rmse(&self) -> f64 {
        self.payload["rmse"].as_f64().unwrap_or(f64::NAN)
    }

    pub fn safe_fraction(&self) -> Option<f64> {
        self.payload["safe_fraction"].as_f64()
    }
}

/// Serializing appender for one output file.
pub struct Appender {
    out: BufWriter<File>,
}

impl Appender {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
        }
        let f = File::create(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        Ok(Self { out: BufWriter::new(f) })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<(), CliError> {
        let line = serde_json::to_string(record).map_err(|e| CliError::Runtime(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| CliError::Runtime(e.to_string()))
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.out.flush().map_err(|e| CliError::Runtime(e.to_string()))
    }
}

/// Reads every `"kind": "run"` record of a JSONL file.
pub fn read_runs(path: &Path) -> Result<Vec<RunRecord>, CliError> {
    let f = File::open(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::Runtime(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line)
            .map_err(|e| CliError::Validation(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if v["kind"] == "run" {
            out.push(
                serde_json::from_value(v)
                    .map_err(|e| CliError::Validation(format!("{}:{}: {e}", path.display(), i + 1)))?,
            );
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub kind: String,
    pub problem: String,
    pub method: String,
    pub n_seeds: usize,
    pub rmse_mean: f64,
    /// Absent for a single seed.
    pub rmse_se: Option<f64>,
    pub safe_fraction: Option<f64>,
    pub mean_query_seconds: f64,
    /// Mean query time over the reference method's on the same problem.
    pub time_ratio: Option<f64>,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean with the `n − 1` variance.
pub fn standard_error(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    Some((var / xs.len() as f64).sqrt())
}

/// Groups runs by (problem, method) in first-appearance order.
pub fn aggregate(runs: &[RunRecord], reference: Option<&str>) -> Vec<AggregateRow> {
    let mut groups: Vec<((String, String), Vec<&RunRecord>)> = Vec::new();
    for r in runs {
        let key = (r.problem.clone(), r.method.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    let mut rows: Vec<AggregateRow> = groups
        .iter()
        .map(|((problem, method), g)| {
            let rmse: Vec<f64> = g.iter().map(|r| r.rmse()).collect();
            let safe: Vec<f64> = g.iter().filter_map(|r| r.safe_fraction()).collect();
            let times: Vec<f64> = g.iter().map(|r| r.timing.mean_query_seconds).collect();
            AggregateRow {
                kind: "aggregate".into(),
                problem: problem.clone(),
                method: method.clone(),
                n_seeds: g.len(),
                rmse_mean: mean(&rmse),
                rmse_se: standard_error(&rmse),
                safe_fraction: (safe.len() == g.len()).then(|| mean(&safe)),
                mean_query_seconds: mean(&times),
                time_ratio: None,
            }
        })
        .collect();
    if let Some(reference) = reference {
        let base: Vec<(String, f64)> = rows
            .iter()
            .filter(|r| r.method == reference)
            .map(|r| (r.problem.clone(), r.mean_query_seconds))
            .collect();
        for row in &mut rows {
            if let Some((_, t)) = base.iter().find(|(p, _)| *p == row.problem) {
                row.time_ratio = Some(row.mean_query_seconds / t);
            }
        }
    }
    rows
}

pub fn render_table(rows: &[AggregateRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:<16} {:>5} {:>22} {:>9} {:>13} {:>10}",
        "problem", "method", "seeds", "rmse", "safe", "s/query", "time ratio"
    );
    for r in rows {
        let rmse = match r.rmse_se {
            Some(se) => format!("{:.4} ± {:.4}", r.rmse_mean, se),
            None => format!("{:.4}", r.rmse_mean),
        };
        let safe = r.safe_fraction.map_or("-".into(), |f| format!("{f:.3}"));
        let ratio = r.time_ratio.map_or("-".into(), |t| format!("{t:.4}"));
        let _ = writeln!(
            s,
            "{:<12} {:<16} {:>5} {:>22} {:>9} {:>13.3e} {:>10}",
            r.problem, r.method, r.n_seeds, rmse, safe, r.mean_query_seconds, ratio
        );
    }
    s
}
