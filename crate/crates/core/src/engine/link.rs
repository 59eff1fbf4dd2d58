//! Host-to-device link shared by all in-flight adapter transfers.
//!
//! Transfers progress under processor sharing with two priority classes:
//! while any demand transfer is moving bytes, demand transfers split the
//! bandwidth equally and prefetch transfers stall; otherwise prefetch
//! transfers split it. A fixed setup latency is added after the last byte.

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterId;
use crate::Micros;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Priority {
    Demand,
    Prefetch,
}

#[derive(Debug, Clone)]
struct Transfer {
    adapter: AdapterId,
    remaining: f64,
    priority: Priority,
}

#[derive(Debug, Clone)]
pub struct Link {
    bytes_per_us: f64,
    base_latency_us: Micros,
    active: Vec<Transfer>,
    last: Micros,
}

impl Link {
    pub fn new(bandwidth_bytes_per_s: f64, base_latency_us: Micros) -> Self {
        Self {
            bytes_per_us: bandwidth_bytes_per_s / 1e6,
            base_latency_us,
            active: Vec::new(),
            last: 0,
        }
    }

    pub fn base_latency_us(&self) -> Micros {
        self.base_latency_us
    }

    pub fn in_flight(&self) -> usize {
        self.active.len()
    }

    pub fn contains(&self, adapter: AdapterId) -> bool {
        self.active.iter().any(|t| t.adapter == adapter)
    }

    fn serving(&self) -> Option<Priority> {
        if self.active.iter().any(|t| t.priority == Priority::Demand) {
            Some(Priority::Demand)
        } else if self.active.is_empty() {
            None
        } else {
            Some(Priority::Prefetch)
        }
    }

    fn rate(&self) -> (Option<Priority>, f64) {
        match self.serving() {
            None => (None, 0.0),
            Some(p) => {
                let n = self.active.iter().filter(|t| t.priority == p).count();
                (Some(p), self.bytes_per_us / n as f64)
            }
        }
    }

    /// Moves bytes up to `now`.
    pub fn advance(&mut self, now: Micros) {
        let dt = now.saturating_sub(self.last) as f64;
        self.last = self.last.max(now);
        if dt == 0.0 {
            return;
        }
        let (class, rate) = self.rate();
        for t in &mut self.active {
            if Some(t.priority) == class {
                t.remaining -= rate * dt;
            }
        }
    }

    pub fn start(&mut self, now: Micros, adapter: AdapterId, bytes: u64, priority: Priority) {
        self.advance(now);
        debug_assert!(!self.contains(adapter));
        self.active.push(Transfer {
            adapter,
            remaining: bytes as f64,
            priority,
        });
    }

    /// Raises a prefetch to demand priority. Returns false if the adapter has
    /// no bytes left to move.
    pub fn upgrade(&mut self, now: Micros, adapter: AdapterId) -> bool {
        self.advance(now);
        match self.active.iter_mut().find(|t| t.adapter == adapter) {
            Some(t) => {
                t.priority = Priority::Demand;
                true
            }
            None => false,
        }
    }

    /// Removes transfers whose bytes have all moved by `now`.
    pub fn finish(&mut self, now: Micros) -> Vec<AdapterId> {
        self.advance(now);
        let mut done = Vec::new();
        self.active.retain(|t| {
            if t.remaining <= 0.5 {
                done.push(t.adapter);
                false
            } else {
                true
            }
        });
        done
    }

    /// Earliest time at which some transfer moves its last byte.
    pub fn next_completion(&self) -> Option<Micros> {
        let (class, rate) = self.rate();
        let class = class?;
        let min = self
            .active
            .iter()
            .filter(|t| t.priority == class)
            .map(|t| t.remaining.max(0.0))
            .fold(f64::INFINITY, f64::min);
        Some(self.last + (min / rate).ceil() as Micros)
    }
}
