//! Run outputs on disk and readers for each of them.
//!
//! A run directory holds `metrics.json`, `requests.csv`, `timeseries.csv`,
//! the resolved `config.toml`, and `decisions.csv` when the decision log is
//! enabled.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{
    Action, Decision, MetricsReport, RequestOutcome, RunResult, TimeseriesRow, SCHEMA_VERSION,
};
use crate::us_to_ms;

pub const METRICS_FILE: &str = "metrics.json";
pub const REQUESTS_FILE: &str = "requests.csv";
pub const TIMESERIES_FILE: &str = "timeseries.csv";
pub const DECISIONS_FILE: &str = "decisions.csv";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: unsupported schema version {found} (expected {SCHEMA_VERSION})")]
    Schema { path: PathBuf, found: u32 },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> ReportError + '_ {
    move |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// One line of `requests.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRow {
    pub request_id: u64,
    pub arrival_ms: f64,
    pub adapter_id: u32,
    pub cold_start: bool,
    pub ttft_ms: f64,
    pub tpot_ms: f64,
    pub queue_ms: f64,
}

impl From<&RequestOutcome> for RequestRow {
    fn from(o: &RequestOutcome) -> Self {
        Self {
            request_id: o.request.id,
            arrival_ms: us_to_ms(o.request.arrival_us),
            adapter_id: o.request.adapter.0,
            cold_start: o.cold_start,
            ttft_ms: us_to_ms(o.ttft_us),
            tpot_ms: o.tpot_ms,
            queue_ms: us_to_ms(o.queue_us),
        }
    }
}

/// One line of `decisions.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRow {
    pub time_ms: f64,
    pub action: String,
    pub adapter_id: Option<u32>,
    pub probability: f64,
    pub score: f64,
}

impl From<&Decision> for DecisionRow {
    fn from(d: &Decision) -> Self {
        Self {
            time_ms: us_to_ms(d.time_us),
            action: d.action.as_str().to_string(),
            adapter_id: d.adapter.map(|a| a.0),
            probability: d.probability,
            score: d.score,
        }
    }
}

fn write_csv<T: Serialize>(
    path: &Path,
    rows: impl IntoIterator<Item = T>,
) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for row in rows {
        w.serialize(row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ReportError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(csv_err(path))
}

pub fn write_metrics(path: &Path, metrics: &MetricsReport) -> Result<(), ReportError> {
    let mut text = serde_json::to_string_pretty(metrics).map_err(|source| ReportError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_metrics(path: &Path) -> Result<MetricsReport, ReportError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let m: MetricsReport = serde_json::from_str(&text).map_err(|source| ReportError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(ReportError::Schema {
            path: path.to_path_buf(),
            found: m.schema_version,
        });
    }
    Ok(m)
}

pub fn write_requests(path: &Path, outcomes: &[RequestOutcome]) -> Result<(), ReportError> {
    // an empty run still gets a header
    if outcomes.is_empty() {
        let header = "request_id,arrival_ms,adapter_id,cold_start,ttft_ms,tpot_ms,queue_ms\n";
        return fs::write(path, header).map_err(io_err(path));
    }
    write_csv(path, outcomes.iter().map(RequestRow::from))
}

pub fn read_requests(path: &Path) -> Result<Vec<RequestRow>, ReportError> {
    read_csv(path)
}

pub fn write_timeseries(path: &Path, rows: &[TimeseriesRow]) -> Result<(), ReportError> {
    if rows.is_empty() {
        let header = "time_ms,utilization,external_frag,internal_frag,resident_adapters,pending\n";
        return fs::write(path, header).map_err(io_err(path));
    }
    write_csv(path, rows)
}

pub fn read_timeseries(path: &Path) -> Result<Vec<TimeseriesRow>, ReportError> {
    read_csv(path)
}

pub fn write_decisions(path: &Path, decisions: &[Decision]) -> Result<(), ReportError> {
    if decisions.is_empty() {
        let header = "time_ms,action,adapter_id,probability,score\n";
        return fs::write(path, header).map_err(io_err(path));
    }
    write_csv(path, decisions.iter().map(DecisionRow::from))
}

pub fn read_decisions(path: &Path) -> Result<Vec<DecisionRow>, ReportError> {
    let rows: Vec<DecisionRow> = read_csv(path)?;
    for r in &rows {
        if Action::parse(&r.action).is_none() {
            return Err(ReportError::Invalid {
                path: path.to_path_buf(),
                message: format!("unknown action {:?}", r.action),
            });
        }
    }
    Ok(rows)
}

/// Paths of the files written for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFiles {
    pub metrics: PathBuf,
    pub requests: PathBuf,
    pub timeseries: PathBuf,
    pub config: PathBuf,
    pub decisions: Option<PathBuf>,
}

/// Writes every output of `result` under `dir`, creating it if needed.
pub fn write_run(
    dir: &Path,
    result: &RunResult,
    config_toml: &str,
    decisions: bool,
) -> Result<RunFiles, ReportError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let files = RunFiles {
        metrics: dir.join(METRICS_FILE),
        requests: dir.join(REQUESTS_FILE),
        timeseries: dir.join(TIMESERIES_FILE),
        config: dir.join(CONFIG_FILE),
        decisions: decisions.then(|| dir.join(DECISIONS_FILE)),
    };
    write_metrics(&files.metrics, &result.metrics)?;
    write_requests(&files.requests, &result.outcomes)?;
    write_timeseries(&files.timeseries, &result.timeseries)?;
    fs::write(&files.config, config_toml).map_err(io_err(&files.config))?;
    if let Some(p) = &files.decisions {
        write_decisions(p, &result.decisions)?;
    }
    Ok(files)
}

/// Generic table writer for comparison and sweep outputs.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a table written by [`write_table`] as header plus rows.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), ReportError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r
        .headers()
        .map_err(csv_err(path))?
        .iter()
        .map(String::from)
        .collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|x| x.iter().map(String::from).collect()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(csv_err(path))?;
    Ok((header, rows))
}
