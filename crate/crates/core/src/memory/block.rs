use serde::{Deserialize, Serialize};

use super::{FragmentationReport, MemoryError};
use crate::adapter::AdapterId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRegion {
    pub offset: u64,
    pub length: u64,
    /// `None` marks a free region.
    pub owner: Option<AdapterId>,
}

impl BlockRegion {
    fn end(&self) -> u64 {
        self.offset + self.length
    }
}

/// Contiguous first-fit arena. Regions tile `[0, capacity)` in offset order,
/// free space included, and adjacent free regions are always merged.
#[derive(Debug, Clone)]
pub struct BlockArena {
    capacity: u64,
    regions: Vec<BlockRegion>,
    used_bytes: u64,
    fragmentation_failures: u64,
}

impl BlockArena {
    pub fn new(capacity: u64) -> Self {
        let regions = if capacity == 0 {
            Vec::new()
        } else {
            vec![BlockRegion {
                offset: 0,
                length: capacity,
                owner: None,
            }]
        };
        Self {
            capacity,
            regions,
            used_bytes: 0,
            fragmentation_failures: 0,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn used_bytes(&self) -> u64 {
        self.used_bytes
    }

    pub fn free_bytes(&self) -> u64 {
        self.capacity - self.used_bytes
    }

    pub fn largest_free(&self) -> u64 {
        self.regions
            .iter()
            .filter(|r| r.owner.is_none())
            .map(|r| r.length)
            .max()
            .unwrap_or(0)
    }

    pub fn regions(&self) -> &[BlockRegion] {
        &self.regions
    }

    /// Allocations refused although enough total space was free.
    pub fn fragmentation_failures(&self) -> u64 {
        self.fragmentation_failures
    }

    pub fn region_of(&self, adapter: AdapterId) -> Option<&BlockRegion> {
        self.regions.iter().find(|r| r.owner == Some(adapter))
    }

    pub fn alloc(&mut self, adapter: AdapterId, bytes: u64) -> Result<BlockRegion, MemoryError> {
        if bytes == 0 {
            return Err(MemoryError::InvalidConfig("zero-byte allocation".into()));
        }
        if self.region_of(adapter).is_some() {
            return Err(MemoryError::AlreadyAllocated(adapter));
        }
        let Some(i) = self
            .regions
            .iter()
            .position(|r| r.owner.is_none() && r.length >= bytes)
        else {
            let free = self.free_bytes();
            if free >= bytes {
                self.fragmentation_failures += 1;
                return Err(MemoryError::Fragmented {
                    needed: bytes,
                    free,
                    largest: self.largest_free(),
                });
            }
            return Err(MemoryError::OutOfMemory {
                needed: bytes,
                free,
            });
        };
        let hole = self.regions[i];
        let taken = BlockRegion {
            offset: hole.offset,
            length: bytes,
            owner: Some(adapter),
        };
        self.regions[i] = taken;
        if hole.length > bytes {
            self.regions.insert(
                i + 1,
                BlockRegion {
                    offset: hole.offset + bytes,
                    length: hole.length - bytes,
                    owner: None,
                },
            );
        }
        self.used_bytes += bytes;
        Ok(taken)
    }

    pub fn free(&mut self, adapter: AdapterId) -> Result<(), MemoryError> {
        let i = self
            .regions
            .iter()
            .position(|r| r.owner == Some(adapter))
            .ok_or(MemoryError::NotAllocated(adapter))?;
        self.used_bytes -= self.regions[i].length;
        self.regions[i].owner = None;
        // merge with the right neighbour, then the left
        if i + 1 < self.regions.len() && self.regions[i + 1].owner.is_none() {
            self.regions[i].length += self.regions[i + 1].length;
            self.regions.remove(i + 1);
        }
        if i > 0 && self.regions[i - 1].owner.is_none() {
            self.regions[i - 1].length += self.regions[i].length;
            self.regions.remove(i);
        }
        Ok(())
    }

    pub fn report(&self) -> FragmentationReport {
        let free = self.free_bytes();
        FragmentationReport {
            external_frag: if free == 0 {
                0.0
            } else {
                1.0 - self.largest_free() as f64 / free as f64
            },
            internal_frag: 0.0,
            utilization: if self.capacity == 0 {
                0.0
            } else {
                self.used_bytes as f64 / self.capacity as f64
            },
        }
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        let mut cursor = 0;
        let mut used = 0;
        for (i, r) in self.regions.iter().enumerate() {
            if r.offset != cursor || r.length == 0 {
                return Err(format!(
                    "region {i} breaks the tiling at offset {}",
                    r.offset
                ));
            }
            if i > 0 && r.owner.is_none() && self.regions[i - 1].owner.is_none() {
                return Err(format!("free regions {} and {i} not coalesced", i - 1));
            }
            if r.owner.is_some() {
                used += r.length;
            }
            cursor = r.end();
        }
        if cursor != self.capacity {
            return Err("regions do not cover the arena".into());
        }
        if used != self.used_bytes {
            return Err("used byte count drifted".into());
        }
        Ok(())
    }
}
