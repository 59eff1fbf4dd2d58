//! Adapter weight memory: a page pool with per-adapter page tables, and a
//! contiguous first-fit arena kept as the fragmentation baseline.

mod block;
mod paged;

pub use block::{BlockArena, BlockRegion};
pub use paged::{pages_for, PagePool, PagePoolDump, PageTable, DEFAULT_PAGE_SIZE};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterId, AdapterSpec};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemoryError {
    #[error("out of memory: need {needed} bytes, {free} free")]
    OutOfMemory { needed: u64, free: u64 },
    #[error("external fragmentation: need {needed} contiguous bytes, {free} free but largest hole is {largest}")]
    Fragmented {
        needed: u64,
        free: u64,
        largest: u64,
    },
    #[error("adapter {0} already holds memory")]
    AlreadyAllocated(AdapterId),
    #[error("adapter {0} holds no memory (double free?)")]
    NotAllocated(AdapterId),
    #[error("page table for adapter {0} is stale")]
    StaleTable(AdapterId),
    #[error("logical page {index} out of range for a {len}-page table")]
    LogicalOutOfRange { index: usize, len: usize },
    #[error("invalid allocator configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FragmentationReport {
    /// `1 − largest_free / total_free`, or 0 with nothing free.
    pub external_frag: f64,
    /// Rounding waste inside allocated units.
    pub internal_frag: f64,
    /// Adapter bytes over total capacity.
    pub utilization: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocatorKind {
    Paged,
    Block,
}

/// The allocator the engine drives, either paged or contiguous.
#[derive(Debug, Clone)]
pub enum AdapterMemory {
    Paged(PagePool),
    Block(BlockArena),
}

impl AdapterMemory {
    pub fn new(
        kind: AllocatorKind,
        capacity_bytes: u64,
        page_size: u64,
    ) -> Result<Self, MemoryError> {
        Ok(match kind {
            AllocatorKind::Paged => {
                AdapterMemory::Paged(PagePool::with_capacity(page_size, capacity_bytes)?)
            }
            AllocatorKind::Block => AdapterMemory::Block(BlockArena::new(capacity_bytes)),
        })
    }

    pub fn kind(&self) -> AllocatorKind {
        match self {
            AdapterMemory::Paged(_) => AllocatorKind::Paged,
            AdapterMemory::Block(_) => AllocatorKind::Block,
        }
    }

    pub fn alloc(&mut self, adapter: &AdapterSpec) -> Result<(), MemoryError> {
        match self {
            AdapterMemory::Paged(p) => p.alloc(adapter).map(drop),
            AdapterMemory::Block(b) => b.alloc(adapter.id, adapter.weight_bytes).map(drop),
        }
    }

    pub fn release(&mut self, adapter: AdapterId) -> Result<(), MemoryError> {
        match self {
            AdapterMemory::Paged(p) => p.release(adapter),
            AdapterMemory::Block(b) => b.free(adapter),
        }
    }

    /// Bytes an adapter occupies once placed (page-rounded for the pool).
    pub fn footprint(&self, adapter: &AdapterSpec) -> u64 {
        match self {
            AdapterMemory::Paged(p) => {
                pages_for(adapter.weight_bytes, p.page_size()) * p.page_size()
            }
            AdapterMemory::Block(_) => adapter.weight_bytes,
        }
    }

    /// Free bytes in the same units as [`footprint`](Self::footprint).
    pub fn free_bytes(&self) -> u64 {
        match self {
            AdapterMemory::Paged(p) => u64::from(p.free_pages()) * p.page_size(),
            AdapterMemory::Block(b) => b.free_bytes(),
        }
    }

    pub fn capacity_bytes(&self) -> u64 {
        match self {
            AdapterMemory::Paged(p) => u64::from(p.total_pages()) * p.page_size(),
            AdapterMemory::Block(b) => b.capacity(),
        }
    }

    pub fn used_bytes(&self) -> u64 {
        match self {
            AdapterMemory::Paged(p) => p.used_bytes(),
            AdapterMemory::Block(b) => b.used_bytes(),
        }
    }

    pub fn report(&self) -> FragmentationReport {
        match self {
            AdapterMemory::Paged(p) => p.report(),
            AdapterMemory::Block(b) => b.report(),
        }
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        match self {
            AdapterMemory::Paged(p) => p.check_invariants(),
            AdapterMemory::Block(b) => b.check_invariants(),
        }
    }
}
