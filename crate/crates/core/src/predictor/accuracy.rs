use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterId;

/// The forecast in force at the start of one interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalForecast {
    pub interval: u64,
    pub probabilities: Vec<(AdapterId, f64)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub intervals: u64,
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
    /// Correct decisions over all evaluated (interval, adapter) pairs.
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    /// Requests whose adapter was already in GPU memory at arrival.
    pub resident_hit_rate: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores forecasts against the adapters actually requested in each
/// interval. An adapter is predicted hot when `p > theta`. Evaluated pairs
/// are the adapters named in the forecast plus any accessed adapter the
/// forecast did not know about (counted as misses). Intervals before
/// `from_interval` are skipped. `resident_hits` is `(hits, requests)`.
pub fn evaluate_accuracy(
    forecasts: &[IntervalForecast],
    actual: &BTreeMap<u64, BTreeSet<AdapterId>>,
    theta: f64,
    from_interval: u64,
    resident_hits: (u64, u64),
) -> AccuracyReport {
    let empty = BTreeSet::new();
    let mut r = AccuracyReport::default();
    for f in forecasts.iter().filter(|f| f.interval >= from_interval) {
        let accessed = actual.get(&f.interval).unwrap_or(&empty);
        r.intervals += 1;
        let mut named = BTreeSet::new();
        for &(id, p) in &f.probabilities {
            named.insert(id);
            match (p > theta, accessed.contains(&id)) {
                (true, true) => r.true_pos += 1,
                (true, false) => r.false_pos += 1,
                (false, true) => r.false_neg += 1,
                (false, false) => r.true_neg += 1,
            }
        }
        r.false_neg += accessed.difference(&named).count() as u64;
    }
    let total = r.true_pos + r.false_pos + r.true_neg + r.false_neg;
    r.accuracy = ratio(r.true_pos + r.true_neg, total);
    r.precision = ratio(r.true_pos, r.true_pos + r.false_pos);
    r.recall = ratio(r.true_pos, r.true_pos + r.false_neg);
    r.resident_hit_rate = ratio(resident_hits.0, resident_hits.1);
    r
}
