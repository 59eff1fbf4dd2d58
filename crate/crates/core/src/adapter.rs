//! Adapter identities and LoRA sizing.
//!
//! A LoRA adapter adds `B·A` to a frozen `d × k` weight, with `B: d × r` and
//! `A: r × k`, so each adapted matrix carries `r·(d + k)` trainable
//! parameters. The simulator never materializes tensors; it only needs the
//! byte footprint of each adapter to drive transfers and allocation.
//!
//! Sizes are expressed in bytes and "MB" is read as MiB (2^20 bytes).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIB: u64 = 1 << 20;

/// Size of a rank-8 adapter on the 7B reference model.
pub const RANK8_ANCHOR_BYTES: u64 = 13 * MIB;

pub const DEFAULT_RANKS: [u32; 4] = [8, 16, 32, 64];

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("invalid LoRA dimensions: {0}")]
    InvalidDims(String),
    #[error("no size configured for rank {0} and linear fallback is disabled")]
    UnknownRank(u32),
    #[error("adapter catalog: {0}")]
    Catalog(String),
    #[error("reading catalog {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Dense adapter identifier. Workload sources map their own identifiers onto
/// these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AdapterId(pub u32);

impl AdapterId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for AdapterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraDims {
    /// Rows of the adapted weight.
    pub d: u64,
    /// Columns of the adapted weight.
    pub k: u64,
    pub rank: u32,
    /// Number of weight matrices that receive a low-rank delta.
    pub adapted_matrices: u32,
    pub bytes_per_param: u8,
}

impl LoraDims {
    /// q and v projections of all 32 layers of a 4096-wide model, fp16.
    pub fn llama2_7b_qv(rank: u32) -> Self {
        Self {
            d: 4096,
            k: 4096,
            rank,
            adapted_matrices: 64,
            bytes_per_param: 2,
        }
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.rank < 1 {
            return Err(AdapterError::InvalidDims("rank must be at least 1".into()));
        }
        if u64::from(self.rank) >= self.d.min(self.k) {
            return Err(AdapterError::InvalidDims(format!(
                "rank {} must be below min(d, k) = {}",
                self.rank,
                self.d.min(self.k)
            )));
        }
        if self.adapted_matrices < 1 {
            return Err(AdapterError::InvalidDims(
                "at least one matrix must be adapted".into(),
            ));
        }
        if !matches!(self.bytes_per_param, 1 | 2 | 4) {
            return Err(AdapterError::InvalidDims(format!(
                "bytes_per_param must be 1, 2 or 4, got {}",
                self.bytes_per_param
            )));
        }
        Ok(())
    }
}

/// Trainable parameters across all adapted matrices: `m · r · (d + k)`.
pub fn param_count(dims: &LoraDims) -> Result<u64, AdapterError> {
    dims.validate()?;
    Ok(u64::from(dims.adapted_matrices) * u64::from(dims.rank) * (dims.d + dims.k))
}

/// Rank → byte size lookup with an optional linear-in-rank fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeTable {
    pub entries: BTreeMap<u32, u64>,
    /// `(anchor_rank, anchor_bytes)`; unknown ranks scale linearly from it.
    pub linear_fallback: Option<(u32, u64)>,
}

impl Default for SizeTable {
    fn default() -> Self {
        Self::linear(8, RANK8_ANCHOR_BYTES)
    }
}

impl SizeTable {
    /// Table for the default ranks, scaled linearly from one anchor, with the
    /// same rule used as fallback.
    pub fn linear(anchor_rank: u32, anchor_bytes: u64) -> Self {
        let entries = DEFAULT_RANKS
            .iter()
            .map(|&r| (r, scale(anchor_rank, anchor_bytes, r)))
            .collect();
        Self {
            entries,
            linear_fallback: Some((anchor_rank, anchor_bytes)),
        }
    }

    pub fn without_fallback(mut self) -> Self {
        self.linear_fallback = None;
        self
    }
}

fn scale(anchor_rank: u32, anchor_bytes: u64, rank: u32) -> u64 {
    // exact when rank is a multiple of the anchor; otherwise round up
    (anchor_bytes * u64::from(rank)).div_ceil(u64::from(anchor_rank))
}

pub fn adapter_size_bytes(rank: u32, table: &SizeTable) -> Result<u64, AdapterError> {
    if let Some(&bytes) = table.entries.get(&rank) {
        return Ok(bytes);
    }
    match table.linear_fallback {
        Some((anchor_rank, anchor_bytes)) if rank >= 1 => {
            Ok(scale(anchor_rank, anchor_bytes, rank))
        }
        _ => Err(AdapterError::UnknownRank(rank)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub id: AdapterId,
    pub dims: LoraDims,
    pub weight_bytes: u64,
    pub nominal_size_override: Option<u64>,
}

impl AdapterSpec {
    /// Size derived from the parameter count.
    pub fn from_dims(id: AdapterId, dims: LoraDims) -> Result<Self, AdapterError> {
        let weight_bytes = param_count(&dims)? * u64::from(dims.bytes_per_param);
        Ok(Self {
            id,
            dims,
            weight_bytes,
            nominal_size_override: None,
        })
    }

    /// Size taken from a calibration table or an explicit override.
    pub fn with_size(id: AdapterId, dims: LoraDims, bytes: u64) -> Result<Self, AdapterError> {
        dims.validate()?;
        if bytes == 0 {
            return Err(AdapterError::Catalog(format!("adapter {id} has zero size")));
        }
        Ok(Self {
            id,
            dims,
            weight_bytes: bytes,
            nominal_size_override: Some(bytes),
        })
    }

    pub fn rank(&self) -> u32 {
        self.dims.rank
    }
}

/// Adapter catalog indexed by dense id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    adapters: Vec<AdapterSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CatalogEntry {
    id: u32,
    rank: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    size_bytes: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankAssignment {
    /// Adapter `i` gets `ranks[i % ranks.len()]`; weights are ignored.
    RoundRobin,
    /// Seeded draw from the weighted rank mix.
    Random,
}

impl Catalog {
    pub fn new(mut adapters: Vec<AdapterSpec>) -> Result<Self, AdapterError> {
        adapters.sort_by_key(|a| a.id);
        for (i, a) in adapters.iter().enumerate() {
            if a.id.index() != i {
                return Err(AdapterError::Catalog(format!(
                    "adapter ids must be dense from 0; expected {i}, found {}",
                    a.id
                )));
            }
        }
        Ok(Self { adapters })
    }

    /// Every adapter has the same rank.
    pub fn uniform(count: usize, rank: u32, table: &SizeTable) -> Result<Self, AdapterError> {
        Self::generate(count, &[rank], &[1.0], RankAssignment::RoundRobin, 0, table)
    }

    pub fn generate(
        count: usize,
        ranks: &[u32],
        weights: &[f64],
        assignment: RankAssignment,
        seed: u64,
        table: &SizeTable,
    ) -> Result<Self, AdapterError> {
        if ranks.is_empty() {
            return Err(AdapterError::Catalog("rank mix is empty".into()));
        }
        if assignment == RankAssignment::Random
            && (weights.len() != ranks.len()
                || weights.iter().any(|w| *w < 0.0)
                || weights.iter().sum::<f64>() <= 0.0)
        {
            return Err(AdapterError::Catalog(
                "rank weights must match ranks, be nonnegative and sum above zero".into(),
            ));
        }
        let mut rng = Pcg64::seed_from_u64(seed);
        let total: f64 = weights.iter().sum();
        let mut adapters = Vec::with_capacity(count);
        for i in 0..count {
            let rank = match assignment {
                RankAssignment::RoundRobin => ranks[i % ranks.len()],
                RankAssignment::Random => {
                    let mut u = rng.random::<f64>() * total;
                    let mut chosen = ranks[ranks.len() - 1];
                    for (r, w) in ranks.iter().zip(weights) {
                        if u < *w {
                            chosen = *r;
                            break;
                        }
                        u -= w;
                    }
                    chosen
                }
            };
            let bytes = adapter_size_bytes(rank, table)?;
            adapters.push(AdapterSpec::with_size(
                AdapterId(i as u32),
                LoraDims::llama2_7b_qv(rank),
                bytes,
            )?);
        }
        Ok(Self { adapters })
    }

    /// JSON array of `{id, rank, size_bytes?}`; missing sizes come from the
    /// table.
    pub fn from_json(text: &str, table: &SizeTable) -> Result<Self, AdapterError> {
        let entries: Vec<CatalogEntry> =
            serde_json::from_str(text).map_err(|e| AdapterError::Catalog(e.to_string()))?;
        let adapters = entries
            .into_iter()
            .map(|e| {
                let bytes = match e.size_bytes {
                    Some(b) => b,
                    None => adapter_size_bytes(e.rank, table)?,
                };
                AdapterSpec::with_size(AdapterId(e.id), LoraDims::llama2_7b_qv(e.rank), bytes)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(adapters)
    }

    pub fn load(path: &Path, table: &SizeTable) -> Result<Self, AdapterError> {
        let text = std::fs::read_to_string(path).map_err(|source| AdapterError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, table)
    }

    pub fn to_json(&self) -> String {
        let entries: Vec<CatalogEntry> = self
            .adapters
            .iter()
            .map(|a| CatalogEntry {
                id: a.id.0,
                rank: a.rank(),
                size_bytes: Some(a.weight_bytes),
            })
            .collect();
        serde_json::to_string_pretty(&entries).expect("catalog entries serialize")
    }

    pub fn get(&self, id: AdapterId) -> Option<&AdapterSpec> {
        self.adapters.get(id.index())
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &AdapterSpec> {
        self.adapters.iter()
    }

    pub fn max_weight_bytes(&self) -> u64 {
        self.adapters
            .iter()
            .map(|a| a.weight_bytes)
            .max()
            .unwrap_or(0)
    }
}
