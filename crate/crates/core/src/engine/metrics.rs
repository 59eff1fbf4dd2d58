use serde::{Deserialize, Serialize};

use crate::adapter::AdapterId;
use crate::predictor::AccuracyReport;
use crate::workload::Request;
use crate::{us_to_ms, Micros};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestOutcome {
    pub request: Request,
    pub cold_start: bool,
    pub cold_start_us: Micros,
    pub queue_us: Micros,
    pub prefill_us: Micros,
    pub ttft_us: Micros,
    pub tpot_ms: f64,
    pub completion_us: Micros,
    /// Adapter resident (or fully staged) when the request arrived.
    pub resident_at_arrival: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeseriesRow {
    pub time_ms: f64,
    pub utilization: f64,
    pub external_frag: f64,
    pub internal_frag: f64,
    pub resident_adapters: u32,
    pub pending: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Prefetch,
    Promote,
    DemandLoad,
    Upgrade,
    Evict,
    Compact,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Prefetch => "prefetch",
            Action::Promote => "promote",
            Action::DemandLoad => "demand_load",
            Action::Upgrade => "upgrade",
            Action::Evict => "evict",
            Action::Compact => "compact",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "prefetch" => Action::Prefetch,
            "promote" => Action::Promote,
            "demand_load" => Action::DemandLoad,
            "upgrade" => Action::Upgrade,
            "evict" => Action::Evict,
            "compact" => Action::Compact,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub time_us: Micros,
    pub action: Action,
    pub adapter: Option<AdapterId>,
    pub probability: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: u64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
}

impl LatencySummary {
    pub fn from_ms(values: &mut [f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        values.sort_by(f64::total_cmp);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Self {
            count: values.len() as u64,
            mean_ms: mean,
            p50_ms: percentile(values, 0.50),
            p90_ms: percentile(values, 0.90),
            p99_ms: percentile(values, 0.99),
        }
    }
}

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ColdStartSummary {
    pub count: u64,
    /// Cold starts at or after the warmup cutoff.
    pub after_warmup: LatencySummary,
    pub all: LatencySummary,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OverheadBreakdown {
    pub prediction_rounds: u64,
    pub batches: u64,
    pub predictor_us: Micros,
    pub prefetch_scheduler_us: Micros,
    pub page_table_us: Micros,
    pub per_round_us: Micros,
    pub predictor_ms: f64,
    pub prefetch_scheduler_ms: f64,
    pub page_table_ms: f64,
    pub total_ms: f64,
    /// Predictor and scheduler cost per round plus page-table cost per batch.
    pub per_round_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MemorySummary {
    pub utilization_mean: f64,
    pub external_frag_mean: f64,
    pub internal_frag_mean: f64,
    pub fragmentation_failures: u64,
    pub compactions: u64,
    pub pages_relocated: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivitySummary {
    pub demand_loads: u64,
    pub prefetches: u64,
    pub prefetch_upgrades: u64,
    pub promotions: u64,
    pub evictions: u64,
    pub admission_failures: u64,
    pub train_steps: u64,
    pub final_train_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub label: String,
    pub seed: u64,
    pub requests: u64,
    pub completed: u64,
    pub duration_s: f64,
    pub throughput_rps: f64,
    pub ttft: LatencySummary,
    pub tpot_mean_ms: f64,
    pub queue_mean_ms: f64,
    pub cold_start: ColdStartSummary,
    pub resident_hit_rate: f64,
    pub accuracy: Option<AccuracyReport>,
    pub memory: MemorySummary,
    pub overhead: OverheadBreakdown,
    pub activity: ActivitySummary,
}

impl MetricsReport {
    pub fn cold_start_median_ms(&self) -> f64 {
        self.cold_start.after_warmup.p50_ms
    }
}

pub(crate) fn summarize_requests(
    report: &mut MetricsReport,
    outcomes: &[RequestOutcome],
    warmup_us: Micros,
) {
    let mut ttft: Vec<f64> = outcomes.iter().map(|o| us_to_ms(o.ttft_us)).collect();
    report.ttft = LatencySummary::from_ms(&mut ttft);
    let n = outcomes.len().max(1) as f64;
    report.tpot_mean_ms = outcomes.iter().map(|o| o.tpot_ms).sum::<f64>() / n;
    report.queue_mean_ms = outcomes.iter().map(|o| us_to_ms(o.queue_us)).sum::<f64>() / n;
    let cold = outcomes.iter().filter(|o| o.cold_start);
    let mut all: Vec<f64> = cold.clone().map(|o| us_to_ms(o.cold_start_us)).collect();
    let mut late: Vec<f64> = cold
        .filter(|o| o.request.arrival_us >= warmup_us)
        .map(|o| us_to_ms(o.cold_start_us))
        .collect();
    report.cold_start = ColdStartSummary {
        count: all.len() as u64,
        after_warmup: LatencySummary::from_ms(&mut late),
        all: LatencySummary::from_ms(&mut all),
    };
}
