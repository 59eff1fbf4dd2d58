use std::collections::BTreeMap;

use super::{Prediction, PROB_EPS};
use crate::adapter::AdapterId;
use crate::workload::Request;
use crate::Micros;

/// Perfect-knowledge forecaster: an adapter is hot at `t` iff it receives a
/// request in `[t, t + lookahead)`. Only adapters seen before `t + lookahead`
/// are reported.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    lookahead_us: Micros,
    arrivals: BTreeMap<AdapterId, Vec<Micros>>,
}

impl OraclePredictor {
    pub fn new(requests: &[Request], lookahead_us: Micros) -> Self {
        let mut arrivals: BTreeMap<AdapterId, Vec<Micros>> = BTreeMap::new();
        for r in requests {
            arrivals.entry(r.adapter).or_default().push(r.arrival_us);
        }
        for v in arrivals.values_mut() {
            v.sort_unstable();
        }
        Self {
            lookahead_us: lookahead_us.max(1),
            arrivals,
        }
    }

    pub fn lookahead_us(&self) -> Micros {
        self.lookahead_us
    }

    pub fn predict_all(&self, now: Micros) -> Vec<Prediction> {
        let end = now.saturating_add(self.lookahead_us);
        self.arrivals
            .iter()
            .filter(|(_, times)| times[0] < end)
            .map(|(&adapter_id, times)| {
                let i = times.partition_point(|&t| t < now);
                let hot = i < times.len() && times[i] < end;
                Prediction {
                    adapter_id,
                    probability: if hot { 1.0 - PROB_EPS } else { PROB_EPS },
                    issued_at_us: now,
                }
            })
            .collect()
    }
}
