use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{FragmentationReport, MemoryError};
use crate::adapter::{AdapterId, AdapterSpec, MIB};

pub const DEFAULT_PAGE_SIZE: u64 = 2 * MIB;

/// Logical → physical page map of one adapter. Index `i` of `entries` holds
/// the physical page backing logical page `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageTable {
    pub adapter: AdapterId,
    pub weight_bytes: u64,
    pub entries: Vec<u32>,
}

impl PageTable {
    pub fn translate(&self, logical: usize) -> Result<u32, MemoryError> {
        self.entries
            .get(logical)
            .copied()
            .ok_or(MemoryError::LogicalOutOfRange {
                index: logical,
                len: self.entries.len(),
            })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Pages needed for `bytes`: ⌈bytes / page_size⌉.
pub fn pages_for(bytes: u64, page_size: u64) -> u64 {
    bytes.div_ceil(page_size)
}

/// Fixed-size page pool. Free pages are handed out lowest index first.
#[derive(Debug, Clone)]
pub struct PagePool {
    page_size: u64,
    free: BTreeSet<u32>,
    owner: Vec<Option<AdapterId>>,
    tables: BTreeMap<AdapterId, PageTable>,
    used_bytes: u64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct PagePoolDump {
    pub page_size: u64,
    pub owners: Vec<Option<AdapterId>>,
    pub tables: BTreeMap<AdapterId, Vec<u32>>,
}

impl PagePool {
    pub fn new(page_size: u64, total_pages: u32) -> Result<Self, MemoryError> {
        if page_size == 0 {
            return Err(MemoryError::InvalidConfig(
                "page size must be positive".into(),
            ));
        }
        Ok(Self {
            page_size,
            free: (0..total_pages).collect(),
            owner: vec![None; total_pages as usize],
            tables: BTreeMap::new(),
            used_bytes: 0,
        })
    }

    /// Pool spanning `capacity_bytes`, rounded down to whole pages.
    pub fn with_capacity(page_size: u64, capacity_bytes: u64) -> Result<Self, MemoryError> {
        if page_size == 0 {
            return Err(MemoryError::InvalidConfig(
                "page size must be positive".into(),
            ));
        }
        let pages = u32::try_from(capacity_bytes / page_size)
            .map_err(|_| MemoryError::InvalidConfig("too many pages".into()))?;
        Self::new(page_size, pages)
    }

    pub fn page_size(&self) -> u64 {
        self.page_size
    }

    pub fn total_pages(&self) -> u32 {
        self.owner.len() as u32
    }

    pub fn free_pages(&self) -> u32 {
        self.free.len() as u32
    }

    pub fn allocated_pages(&self) -> u32 {
        self.total_pages() - self.free_pages()
    }

    pub fn used_bytes(&self) -> u64 {
        self.used_bytes
    }

    pub fn owner_of(&self, page: u32) -> Option<AdapterId> {
        self.owner.get(page as usize).copied().flatten()
    }

    pub fn table(&self, adapter: AdapterId) -> Option<&PageTable> {
        self.tables.get(&adapter)
    }

    pub fn tables(&self) -> impl Iterator<Item = &PageTable> {
        self.tables.values()
    }

    pub fn alloc(&mut self, adapter: &AdapterSpec) -> Result<PageTable, MemoryError> {
        if self.tables.contains_key(&adapter.id) {
            return Err(MemoryError::AlreadyAllocated(adapter.id));
        }
        let needed = pages_for(adapter.weight_bytes, self.page_size);
        if needed > self.free.len() as u64 {
            return Err(MemoryError::OutOfMemory {
                needed: needed * self.page_size,
                free: self.free.len() as u64 * self.page_size,
            });
        }
        let mut entries = Vec::with_capacity(needed as usize);
        for _ in 0..needed {
            let page = self.free.pop_first().expect("checked free count");
            self.owner[page as usize] = Some(adapter.id);
            entries.push(page);
        }
        let table = PageTable {
            adapter: adapter.id,
            weight_bytes: adapter.weight_bytes,
            entries,
        };
        self.used_bytes += adapter.weight_bytes;
        self.tables.insert(adapter.id, table.clone());
        Ok(table)
    }

    /// Returns the pages of `table`. The table must match the pool's current
    /// mapping; freeing a stale or already-freed table is an error.
    pub fn free(&mut self, table: &PageTable) -> Result<(), MemoryError> {
        match self.tables.get(&table.adapter) {
            Some(current) if current == table => {}
            Some(_) => return Err(MemoryError::StaleTable(table.adapter)),
            None => return Err(MemoryError::NotAllocated(table.adapter)),
        }
        for &page in &table.entries {
            if self.owner[page as usize] != Some(table.adapter) {
                return Err(MemoryError::StaleTable(table.adapter));
            }
        }
        for &page in &table.entries {
            self.owner[page as usize] = None;
            self.free.insert(page);
        }
        self.used_bytes -= table.weight_bytes;
        self.tables.remove(&table.adapter);
        Ok(())
    }

    pub fn release(&mut self, adapter: AdapterId) -> Result<(), MemoryError> {
        let table = self
            .tables
            .get(&adapter)
            .cloned()
            .ok_or(MemoryError::NotAllocated(adapter))?;
        self.free(&table)
    }

    /// Fraction of allocated pages lying outside the allocated-prefix region.
    pub fn scatter(&self) -> f64 {
        let allocated = self.allocated_pages();
        if allocated == 0 {
            return 0.0;
        }
        let outside = self
            .owner
            .iter()
            .enumerate()
            .skip(allocated as usize)
            .filter(|(_, o)| o.is_some())
            .count();
        outside as f64 / allocated as f64
    }

    /// Moves allocated pages into a contiguous prefix, rewriting page tables.
    /// Returns the number of relocated pages.
    pub fn compact(&mut self) -> u32 {
        let allocated = self.allocated_pages();
        let mut moved = 0;
        let high: Vec<u32> = (allocated..self.total_pages())
            .filter(|&p| self.owner[p as usize].is_some())
            .collect();
        for src in high {
            let dst = *self
                .free
                .first()
                .expect("a hole below the prefix exists for every page above it");
            debug_assert!(dst < allocated);
            let adapter = self.owner[src as usize]
                .take()
                .expect("filtered on ownership");
            self.free.remove(&dst);
            self.free.insert(src);
            self.owner[dst as usize] = Some(adapter);
            let table = self.tables.get_mut(&adapter).expect("owner has a table");
            let slot = table
                .entries
                .iter_mut()
                .find(|e| **e == src)
                .expect("table maps the owned page");
            *slot = dst;
            moved += 1;
        }
        moved
    }

    pub fn report(&self) -> FragmentationReport {
        let total = self.total_pages() as u64 * self.page_size;
        let allocated = self.allocated_pages() as u64 * self.page_size;
        FragmentationReport {
            // any free page can back any logical page
            external_frag: 0.0,
            internal_frag: if allocated == 0 {
                0.0
            } else {
                (allocated - self.used_bytes) as f64 / allocated as f64
            },
            utilization: if total == 0 {
                0.0
            } else {
                self.used_bytes as f64 / total as f64
            },
        }
    }

    pub fn dump(&self) -> PagePoolDump {
        PagePoolDump {
            page_size: self.page_size,
            owners: self.owner.clone(),
            tables: self
                .tables
                .iter()
                .map(|(id, t)| (*id, t.entries.clone()))
                .collect(),
        }
    }

    /// Checks conservation and bijectivity; returns a description of the
    /// first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let owned = self.owner.iter().filter(|o| o.is_some()).count();
        if owned + self.free.len() != self.owner.len() {
            return Err(format!(
                "conservation: {owned} owned + {} free != {}",
                self.free.len(),
                self.owner.len()
            ));
        }
        for &p in &self.free {
            if self.owner[p as usize].is_some() {
                return Err(format!("page {p} is both free and owned"));
            }
        }
        let mut seen = BTreeSet::new();
        let mut used = 0;
        for t in self.tables.values() {
            if t.entries.len() as u64 != pages_for(t.weight_bytes, self.page_size) {
                return Err(format!(
                    "adapter {} has {} pages",
                    t.adapter,
                    t.entries.len()
                ));
            }
            used += t.weight_bytes;
            for &p in &t.entries {
                if !seen.insert(p) {
                    return Err(format!("page {p} mapped twice"));
                }
                if self.owner[p as usize] != Some(t.adapter) {
                    return Err(format!("page {p} not owned by adapter {}", t.adapter));
                }
            }
        }
        if seen.len() != owned {
            return Err("owned pages missing from page tables".into());
        }
        if used != self.used_bytes {
            return Err("used byte count drifted".into());
        }
        Ok(())
    }
}
