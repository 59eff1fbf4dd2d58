//! Trace-driven simulation of multi-LoRA serving with demand forecasting,
//! proactive prefetching and page-granular adapter memory.
//!
//! The crate is organised bottom-up:
//!
//! * [`adapter`] sizes adapters from their LoRA rank.
//! * [`workload`] builds request streams from traces or synthetic profiles.
//! * [`predictor`] is a small LSTM trained online on per-adapter access counts.
//! * [`memory`] holds the page pool and the contiguous block baseline.
//! * [`prefetch`] turns forecasts into prefetch and eviction decisions.
//! * [`engine`] is the discrete-event simulator tying everything together.
//! * [`config`] and [`experiment`] drive runs, comparisons and sweeps.
//!
//! Simulated time is kept in integer microseconds.

// `!(x > 0.0)` style checks are kept on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod config;
pub mod engine;
pub mod experiment;
pub mod memory;
pub mod predictor;
pub mod prefetch;
pub mod report;
pub mod workload;

use thiserror::Error;

/// Simulated time in microseconds.
pub type Micros = u64;

pub const US_PER_MS: u64 = 1_000;
pub const US_PER_S: u64 = 1_000_000;

/// Rounds a millisecond quantity to the microsecond grid.
pub fn ms_to_us(ms: f64) -> Micros {
    (ms * 1000.0).round().max(0.0) as Micros
}

pub fn us_to_ms(us: Micros) -> f64 {
    us as f64 / 1000.0
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Adapter(#[from] adapter::AdapterError),
    #[error(transparent)]
    Workload(#[from] workload::WorkloadError),
    #[error(transparent)]
    Predictor(#[from] predictor::PredictorError),
    #[error(transparent)]
    Memory(#[from] memory::MemoryError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Engine(#[from] engine::EngineError),
    #[error(transparent)]
    Report(#[from] report::ReportError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
