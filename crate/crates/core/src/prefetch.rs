//! Prefetch and eviction decisions.
//!
//! Adapters whose forecast exceeds `theta` are loaded ahead of demand into a
//! bounded staging area and promoted to the active set between batches.
//! Eviction ranks resident adapters by a weighted sum of recency, decayed
//! frequency and forecast probability, lowest first.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::AdapterId;
use crate::predictor::Prediction;
use crate::{Micros, US_PER_S};

#[derive(Debug, Error, PartialEq)]
pub enum PrefetchError {
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("need {needed} bytes but only {reachable} can be freed")]
    AdmissionFailure { needed: u64, reachable: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefetchPolicy {
    pub theta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Recency time constant.
    pub tau_s: f64,
    pub freq_half_life_s: f64,
    pub staging_capacity_bytes: u64,
}

impl Default for PrefetchPolicy {
    fn default() -> Self {
        Self {
            theta: 0.5,
            alpha: 0.3,
            beta: 0.3,
            gamma: 0.4,
            tau_s: 60.0,
            freq_half_life_s: 120.0,
            staging_capacity_bytes: 0,
        }
    }
}

impl PrefetchPolicy {
    pub fn validate(&self) -> Result<(), PrefetchError> {
        let bad = |m: &str| Err(PrefetchError::InvalidPolicy(m.into()));
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return bad("theta must lie in (0, 1)");
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return bad("score weights must be nonnegative");
        }
        if !(self.alpha + self.beta + self.gamma > 0.0) {
            return bad("at least one score weight must be positive");
        }
        if !(self.tau_s > 0.0) || !(self.freq_half_life_s > 0.0) {
            return bad("tau_s and freq_half_life_s must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    NotResident,
    /// Demand transfer in flight.
    Loading,
    /// Prefetch transfer in flight (`complete == false`) or finished and
    /// awaiting promotion.
    Staging {
        complete: bool,
    },
    Resident,
}

impl Status {
    pub fn in_memory(self) -> bool {
        !matches!(self, Status::NotResident)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterResidency {
    pub status: Status,
    pub last_access_us: Option<Micros>,
    freq_value: f64,
    freq_at_us: Micros,
    pub prediction: f64,
}

impl Default for AdapterResidency {
    fn default() -> Self {
        Self {
            status: Status::NotResident,
            last_access_us: None,
            freq_value: 0.0,
            freq_at_us: 0,
            prediction: 0.0,
        }
    }
}

impl AdapterResidency {
    /// Access count with exponential decay, evaluated at `now`.
    pub fn decayed_freq(&self, now: Micros, half_life_s: f64) -> f64 {
        let dt = now.saturating_sub(self.freq_at_us) as f64 / US_PER_S as f64;
        self.freq_value * (-dt / half_life_s).exp2()
    }

    /// `exp(-(now - last_access)/tau)`, 0 for never-accessed adapters.
    pub fn recency(&self, now: Micros, tau_s: f64) -> f64 {
        match self.last_access_us {
            Some(t) => (-(now.saturating_sub(t) as f64 / US_PER_S as f64) / tau_s).exp(),
            None => 0.0,
        }
    }
}

/// Per-adapter residency, indexed by adapter id.
#[derive(Debug, Clone, Default)]
pub struct ResidencyState {
    adapters: Vec<AdapterResidency>,
}

impl ResidencyState {
    pub fn new(n: usize) -> Self {
        Self {
            adapters: vec![AdapterResidency::default(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn get(&self, id: AdapterId) -> &AdapterResidency {
        &self.adapters[id.index()]
    }

    pub fn get_mut(&mut self, id: AdapterId) -> &mut AdapterResidency {
        &mut self.adapters[id.index()]
    }

    pub fn status(&self, id: AdapterId) -> Status {
        self.adapters[id.index()].status
    }

    pub fn set_status(&mut self, id: AdapterId, status: Status) {
        self.adapters[id.index()].status = status;
    }

    pub fn iter(&self) -> impl Iterator<Item = (AdapterId, &AdapterResidency)> {
        self.adapters
            .iter()
            .enumerate()
            .map(|(i, a)| (AdapterId(i as u32), a))
    }

    pub fn record_access(&mut self, id: AdapterId, now: Micros, half_life_s: f64) {
        let a = &mut self.adapters[id.index()];
        a.freq_value = a.decayed_freq(now, half_life_s) + 1.0;
        a.freq_at_us = now;
        a.last_access_us = Some(now);
    }

    /// Stores the latest forecast. Adapters absent from `predictions` get 0.
    pub fn set_predictions(&mut self, predictions: &[Prediction]) {
        for a in &mut self.adapters {
            a.prediction = 0.0;
        }
        for p in predictions {
            if let Some(a) = self.adapters.get_mut(p.adapter_id.index()) {
                a.prediction = p.probability;
            }
        }
    }

    pub fn clear_predictions(&mut self) {
        for a in &mut self.adapters {
            a.prediction = 0.0;
        }
    }

    pub fn count(&self, pred: impl Fn(Status) -> bool) -> usize {
        self.adapters.iter().filter(|a| pred(a.status)).count()
    }

    /// Largest decayed frequency over resident adapters.
    pub fn max_resident_freq(&self, now: Micros, half_life_s: f64) -> f64 {
        self.adapters
            .iter()
            .filter(|a| a.status == Status::Resident)
            .map(|a| a.decayed_freq(now, half_life_s))
            .fold(0.0, f64::max)
    }
}

/// Adapters to prefetch, most probable first: not in memory and `p > theta`,
/// cut at the first candidate that would overflow the staging budget.
/// `footprint` gives the memory an adapter would occupy; `staged_bytes` is
/// the budget already in use.
pub fn select_prefetch(
    predictions: &[Prediction],
    residency: &ResidencyState,
    policy: &PrefetchPolicy,
    staged_bytes: u64,
    footprint: impl Fn(AdapterId) -> u64,
) -> Vec<AdapterId> {
    let mut cands: Vec<&Prediction> = predictions
        .iter()
        .filter(|p| p.probability > policy.theta)
        .filter(|p| {
            p.adapter_id.index() < residency.len()
                && residency.status(p.adapter_id) == Status::NotResident
        })
        .collect();
    cands.sort_by(|a, b| {
        b.probability
            .total_cmp(&a.probability)
            .then(a.adapter_id.cmp(&b.adapter_id))
    });
    let mut used = staged_bytes;
    let mut out = Vec::new();
    for c in cands {
        let need = footprint(c.adapter_id);
        if used + need > policy.staging_capacity_bytes {
            break;
        }
        used += need;
        out.push(c.adapter_id);
    }
    out
}

/// The weighted score from its three normalized terms.
pub fn combine_score(policy: &PrefetchPolicy, recency: f64, freq: f64, prediction: f64) -> f64 {
    policy.alpha * recency + policy.beta * freq + policy.gamma * prediction
}

/// Score of a resident adapter; `max_freq` is the normalizer over residents.
pub fn eviction_score(
    state: &AdapterResidency,
    policy: &PrefetchPolicy,
    now: Micros,
    max_freq: f64,
) -> f64 {
    let freq = if max_freq > 0.0 {
        (state.decayed_freq(now, policy.freq_half_life_s) / max_freq).min(1.0)
    } else {
        0.0
    };
    combine_score(
        policy,
        state.recency(now, policy.tau_s),
        freq,
        state.prediction,
    )
}

/// Resident adapters for which `eligible` holds, lowest score first. Ties
/// break on adapter id.
pub fn eviction_order(
    residency: &ResidencyState,
    policy: &PrefetchPolicy,
    now: Micros,
    eligible: impl Fn(AdapterId) -> bool,
) -> Vec<(AdapterId, f64)> {
    let max_freq = residency.max_resident_freq(now, policy.freq_half_life_s);
    let mut order: Vec<(AdapterId, f64)> = residency
        .iter()
        .filter(|(id, a)| a.status == Status::Resident && eligible(*id))
        .map(|(id, a)| (id, eviction_score(a, policy, now, max_freq)))
        .collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    order
}

/// Shortest prefix of `order` whose footprints bring `free_bytes` up to
/// `bytes_needed`.
pub fn evict_until(
    bytes_needed: u64,
    free_bytes: u64,
    order: &[(AdapterId, f64)],
    footprint: impl Fn(AdapterId) -> u64,
) -> Result<Vec<AdapterId>, PrefetchError> {
    let mut free = free_bytes;
    let mut out = Vec::new();
    for &(id, _) in order {
        if free >= bytes_needed {
            break;
        }
        free += footprint(id);
        out.push(id);
    }
    if free >= bytes_needed {
        Ok(out)
    } else {
        Err(PrefetchError::AdmissionFailure {
            needed: bytes_needed,
            reachable: free,
        })
    }
}

/// Marks every completed staging adapter resident. Returns the ids promoted.
pub fn promote_staged(residency: &mut ResidencyState) -> Vec<AdapterId> {
    let mut out = Vec::new();
    for (i, a) in residency.adapters.iter_mut().enumerate() {
        if a.status == (Status::Staging { complete: true }) {
            a.status = Status::Resident;
            out.push(AdapterId(i as u32));
        }
    }
    out
}
