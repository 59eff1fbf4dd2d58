//! Multi-run experiments: policy/allocator comparisons and parameter sweeps.
//! Every run in an experiment shares the seed and the request stream.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::adapter::Catalog;
use crate::config::{RunConfig, WorkloadSource};
use crate::engine::{self, EngineConfig, MetricsReport, PolicyKind, RunResult};
use crate::memory::AllocatorKind;
use crate::workload::Request;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown matrix or cell `{0}` (expected ablation, frag, policies, or cells like reactive+block)")]
    UnknownCell(String),
    #[error("a comparison needs at least two cells, got {0}")]
    TooFewCells(usize),
    #[error("unknown sweep parameter `{0}` (expected window, theta, rate or page_size)")]
    UnknownParam(String),
    #[error("sweep needs at least one value")]
    NoValues,
    #[error("invalid value {value} for {param}: {message}")]
    BadValue {
        param: SweepParam,
        value: f64,
        message: String,
    },
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub name: String,
    pub config: EngineConfig,
}

fn cell(
    name: &str,
    base: &EngineConfig,
    kind: PolicyKind,
    prefetch: bool,
    alloc: AllocatorKind,
) -> Cell {
    let mut config = base.clone();
    config.policy.kind = kind;
    config.policy.prefetch = prefetch;
    config.allocator.kind = alloc;
    Cell {
        name: name.to_string(),
        config,
    }
}

/// Parses `kind[+prefetch]+allocator`, e.g. `oracle+prefetch+paged`.
fn parse_cell(name: &str, base: &EngineConfig) -> Option<Cell> {
    let parts: Vec<&str> = name.split('+').map(str::trim).collect();
    let (kind, rest) = parts.split_first()?;
    let kind = match *kind {
        "reactive" => PolicyKind::Reactive,
        "predictive" => PolicyKind::Predictive,
        "oracle" => PolicyKind::Oracle,
        _ => return None,
    };
    let (prefetch, alloc) = match rest {
        [a] => (false, *a),
        ["prefetch", a] if kind != PolicyKind::Reactive => (true, *a),
        _ => return None,
    };
    let alloc = match alloc {
        "paged" => AllocatorKind::Paged,
        "block" => AllocatorKind::Block,
        _ => return None,
    };
    Some(cell(name, base, kind, prefetch, alloc))
}

/// Expands a matrix name or a comma-separated list of cells.
pub fn matrix(spec: &str, base: &EngineConfig) -> Result<Vec<Cell>, ExperimentError> {
    use AllocatorKind::*;
    use PolicyKind::*;
    let cells = match spec.trim() {
        "ablation" => vec![
            cell("baseline", base, Reactive, false, Block),
            cell("+prediction", base, Predictive, false, Block),
            cell("+prefetch", base, Predictive, true, Block),
            cell("+paging", base, Predictive, true, Paged),
        ],
        "frag" => {
            let (k, p) = (base.policy.kind, base.policy.prefetch);
            vec![
                cell("paged", base, k, p, Paged),
                cell("block", base, k, p, Block),
            ]
        }
        "policies" => {
            let a = base.allocator.kind;
            vec![
                cell("reactive", base, Reactive, false, a),
                cell("predictive", base, Predictive, true, a),
                cell("oracle", base, Oracle, true, a),
            ]
        }
        list => list
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                parse_cell(s.trim(), base)
                    .ok_or_else(|| ExperimentError::UnknownCell(s.trim().to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?,
    };
    if cells.len() < 2 {
        return Err(ExperimentError::TooFewCells(cells.len()));
    }
    Ok(cells)
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub runs: Vec<(String, RunResult)>,
}

/// One run per cell, sequentially (the simulator is single-threaded and
/// runs are independent).
pub fn compare_policies(
    cells: &[Cell],
    catalog: &Catalog,
    requests: &[Request],
) -> crate::Result<Comparison> {
    if cells.len() < 2 {
        return Err(crate::Error::Engine(engine::EngineError::InvalidConfig(
            ExperimentError::TooFewCells(cells.len()).to_string(),
        )));
    }
    let mut runs = Vec::with_capacity(cells.len());
    for c in cells {
        runs.push((c.name.clone(), engine::run(&c.config, catalog, requests)?));
    }
    Ok(Comparison { runs })
}

/// `1 - new/reference`, 0 when the reference is 0.
pub fn reduction(reference: f64, new: f64) -> f64 {
    if reference > 0.0 {
        1.0 - new / reference
    } else {
        0.0
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        0.0
    }
}

pub const COMPARISON_HEADER: &[&str] = &[
    "cell",
    "label",
    "completed",
    "throughput_rps",
    "ttft_mean_ms",
    "ttft_p50_ms",
    "ttft_p99_ms",
    "tpot_mean_ms",
    "cold_starts",
    "cold_start_p50_ms",
    "resident_hit_rate",
    "accuracy",
    "utilization",
    "external_frag",
    "fragmentation_failures",
    "throughput_vs_first",
    "cold_start_reduction_vs_first",
];

impl Comparison {
    pub fn metrics(&self, cell: &str) -> Option<&MetricsReport> {
        self.runs
            .iter()
            .find(|(n, _)| n == cell)
            .map(|(_, r)| &r.metrics)
    }

    pub fn rows(&self) -> Vec<Vec<String>> {
        let first = &self.runs[0].1.metrics;
        self.runs
            .iter()
            .map(|(name, r)| {
                let m = &r.metrics;
                vec![
                    name.clone(),
                    m.label.clone(),
                    m.completed.to_string(),
                    format!("{:.4}", m.throughput_rps),
                    format!("{:.3}", m.ttft.mean_ms),
                    format!("{:.3}", m.ttft.p50_ms),
                    format!("{:.3}", m.ttft.p99_ms),
                    format!("{:.3}", m.tpot_mean_ms),
                    m.cold_start.count.to_string(),
                    format!("{:.3}", m.cold_start_median_ms()),
                    format!("{:.4}", m.resident_hit_rate),
                    m.accuracy
                        .map_or(String::new(), |a| format!("{:.4}", a.accuracy)),
                    format!("{:.4}", m.memory.utilization_mean),
                    format!("{:.4}", m.memory.external_frag_mean),
                    m.memory.fragmentation_failures.to_string(),
                    format!("{:.4}", ratio(m.throughput_rps, first.throughput_rps)),
                    format!(
                        "{:.4}",
                        reduction(first.cold_start_median_ms(), m.cold_start_median_ms())
                    ),
                ]
            })
            .collect()
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cols = [0, 2, 3, 5, 6, 7, 8, 9, 10, 11, 12, 15, 16];
        let rows = self.rows();
        let widths: Vec<usize> = cols
            .iter()
            .map(|&c| {
                rows.iter()
                    .map(|r| r[c].len())
                    .chain([COMPARISON_HEADER[c].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        for (i, &c) in cols.iter().enumerate() {
            write!(f, "{:>w$} ", COMPARISON_HEADER[c], w = widths[i])?;
        }
        writeln!(f)?;
        for r in &rows {
            for (i, &c) in cols.iter().enumerate() {
                write!(f, "{:>w$} ", r[c], w = widths[i])?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    /// Predictor window, in seconds.
    Window,
    Theta,
    /// Synthetic base rate (req/s), or the trace rate scale.
    Rate,
    PageSize,
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::Window => "window",
            SweepParam::Theta => "theta",
            SweepParam::Rate => "rate",
            SweepParam::PageSize => "page_size",
        })
    }
}

impl FromStr for SweepParam {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "window" => SweepParam::Window,
            "theta" => SweepParam::Theta,
            "rate" => SweepParam::Rate,
            "page_size" => SweepParam::PageSize,
            _ => return Err(ExperimentError::UnknownParam(s.to_string())),
        })
    }
}

/// Sets `param` to `value` on a copy of `base`.
pub fn apply(
    base: &RunConfig,
    param: SweepParam,
    value: f64,
) -> Result<RunConfig, ExperimentError> {
    let bad = |m: &str| ExperimentError::BadValue {
        param,
        value,
        message: m.to_string(),
    };
    let mut c = base.clone();
    match param {
        SweepParam::Window => {
            let w = (value / c.predictor.interval_s).round();
            if !(w >= 1.0) {
                return Err(bad("window must cover at least one interval"));
            }
            c.predictor.window = w as usize;
        }
        SweepParam::Theta => {
            if !(value > 0.0 && value < 1.0) {
                return Err(bad("theta must lie in (0, 1)"));
            }
            c.policy.theta = value;
        }
        SweepParam::Rate => {
            if !(value > 0.0 && value.is_finite()) {
                return Err(bad("rate must be positive"));
            }
            match c.workload.source {
                WorkloadSource::Synthetic => c.workload.synthetic.base_rate = value,
                WorkloadSource::Trace => c.workload.rate_scale = value,
            }
        }
        SweepParam::PageSize => {
            if !(value >= 1.0 && value.fract() == 0.0) {
                return Err(bad("page size must be a whole number of bytes"));
            }
            c.allocator.page_size_bytes = value as u64;
        }
    }
    Ok(c)
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: f64,
    pub metrics: MetricsReport,
    /// Reactive run under the same value, for the reduction columns.
    pub reference: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct Sweep {
    pub param: SweepParam,
    pub points: Vec<SweepPoint>,
}

pub const SWEEP_HEADER: &[&str] = &[
    "value",
    "accuracy",
    "precision",
    "recall",
    "resident_hit_rate",
    "cold_starts",
    "cold_start_p50_ms",
    "reactive_cold_start_p50_ms",
    "cold_start_reduction",
    "throughput_rps",
    "ttft_mean_ms",
    "ttft_p50_ms",
    "tpot_mean_ms",
    "utilization",
];

impl Sweep {
    pub fn rows(&self) -> Vec<Vec<String>> {
        self.points
            .iter()
            .map(|p| {
                let m = &p.metrics;
                let acc = m.accuracy.unwrap_or_default();
                let has_acc = m.accuracy.is_some();
                let opt = |v: f64| {
                    if has_acc {
                        format!("{v:.4}")
                    } else {
                        String::new()
                    }
                };
                vec![
                    format!("{}", p.value),
                    opt(acc.accuracy),
                    opt(acc.precision),
                    opt(acc.recall),
                    format!("{:.4}", m.resident_hit_rate),
                    m.cold_start.count.to_string(),
                    format!("{:.3}", m.cold_start_median_ms()),
                    format!("{:.3}", p.reference.cold_start_median_ms()),
                    format!(
                        "{:.4}",
                        reduction(p.reference.cold_start_median_ms(), m.cold_start_median_ms())
                    ),
                    format!("{:.4}", m.throughput_rps),
                    format!("{:.3}", m.ttft.mean_ms),
                    format!("{:.3}", m.ttft.p50_ms),
                    format!("{:.3}", m.tpot_mean_ms),
                    format!("{:.4}", m.memory.utilization_mean),
                ]
            })
            .collect()
    }
}

/// One run per value plus reactive reference runs. Window and theta do not
/// affect the reactive policy, so a single reference serves every value.
pub fn sweep(base: &RunConfig, param: SweepParam, values: &[f64]) -> crate::Result<Sweep> {
    if values.is_empty() {
        return Err(crate::Error::Engine(engine::EngineError::InvalidConfig(
            ExperimentError::NoValues.to_string(),
        )));
    }
    let to_err = |e: ExperimentError| {
        crate::Error::Engine(engine::EngineError::InvalidConfig(e.to_string()))
    };
    let shared_reference = matches!(param, SweepParam::Window | SweepParam::Theta);
    let mut cached: Option<MetricsReport> = None;
    let mut points = Vec::with_capacity(values.len());
    for &v in values {
        let cfg = apply(base, param, v).map_err(to_err)?;
        let requests = cfg.build_workload()?;
        let catalog = cfg.build_catalog(&requests)?;
        let metrics = engine::run(&cfg.engine_config(), &catalog, &requests)?.metrics;
        let reference = match (&cached, shared_reference) {
            (Some(m), true) => m.clone(),
            _ => {
                let mut rc = cfg.engine_config();
                rc.policy.kind = PolicyKind::Reactive;
                rc.policy.prefetch = false;
                let m = if rc == cfg.engine_config() {
                    metrics.clone()
                } else {
                    engine::run(&rc, &catalog, &requests)?.metrics
                };
                cached = Some(m.clone());
                m
            }
        };
        points.push(SweepPoint {
            value: v,
            metrics,
            reference,
        });
    }
    Ok(Sweep { param, points })
}
