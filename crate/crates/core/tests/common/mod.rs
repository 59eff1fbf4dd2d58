//! Allocator harnesses shared by the memory suite and the acceptance run.
#![allow(dead_code)]

use std::collections::BTreeMap;

use plora_core::adapter::{AdapterId, AdapterSpec, LoraDims, MIB};
use plora_core::memory::{pages_for, BlockArena, MemoryError, PagePool, DEFAULT_PAGE_SIZE};
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;

pub const RANK_SIZES: [(u32, u64); 5] = [(8, 13), (16, 26), (32, 52), (64, 104), (128, 208)];

pub fn spec(id: u32, rank: u32, bytes: u64) -> AdapterSpec {
    AdapterSpec::with_size(AdapterId(id), LoraDims::llama2_7b_qv(rank), bytes).unwrap()
}

#[derive(Debug, Default)]
pub struct ChurnReport {
    pub ops: u64,
    pub allocs: u64,
    pub frees: u64,
    pub violations: Vec<String>,
}

impl ChurnReport {
    fn violate(&mut self, op: u64, what: String) {
        if self.violations.len() < 20 {
            self.violations.push(format!("op {op}: {what}"));
        } else {
            self.violations.push(String::new());
        }
    }
}

/// Drives a page pool with random allocs, frees, double frees, stale frees
/// and compactions, checking every step against a plain map of who holds how
/// many pages.
pub fn paged_churn(ops: u64, total_pages: u32, num_adapters: u32, seed: u64) -> ChurnReport {
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut pool = PagePool::new(DEFAULT_PAGE_SIZE, total_pages).unwrap();
    // oracle: adapter -> (bytes, pages)
    let mut held: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
    let mut stale = Vec::new();
    let mut rep = ChurnReport::default();
    for op in 0..ops {
        rep.ops += 1;
        let before = pool.dump();
        let roll = rng.random_range(0..100u32);
        if roll < 55 {
            let id = rng.random_range(0..num_adapters);
            let (rank, mib) = RANK_SIZES[rng.random_range(0..RANK_SIZES.len())];
            // odd sizes exercise the last partial page
            let bytes = mib * MIB - rng.random_range(0..DEFAULT_PAGE_SIZE);
            let need = pages_for(bytes, DEFAULT_PAGE_SIZE);
            let free: u64 = total_pages as u64 - held.values().map(|h| h.1).sum::<u64>();
            let res = pool.alloc(&spec(id, rank, bytes));
            match (held.contains_key(&id), res) {
                (true, Err(MemoryError::AlreadyAllocated(_))) => {}
                (false, Ok(table)) => {
                    if need > free {
                        rep.violate(
                            op,
                            format!("alloc of {need} pages succeeded with {free} free"),
                        );
                    }
                    if table.len() as u64 != need {
                        rep.violate(op, format!("table has {} pages, want {need}", table.len()));
                    }
                    held.insert(id, (bytes, need));
                    rep.allocs += 1;
                }
                (false, Err(MemoryError::OutOfMemory { .. })) if need > free => {}
                (false, Err(e)) => rep.violate(
                    op,
                    format!("paged-sufficiency: {need} of {free} pages refused: {e}"),
                ),
                (true, Ok(_)) => rep.violate(op, format!("adapter {id} allocated twice")),
                (true, Err(e)) => rep.violate(op, format!("wrong error for duplicate alloc: {e}")),
            }
        } else if roll < 90 {
            let Some(&id) = held.keys().nth(rng.random_range(0..held.len().max(1))) else {
                continue;
            };
            let table = pool.table(AdapterId(id)).cloned();
            match table {
                Some(t) => {
                    if let Err(e) = pool.free(&t) {
                        rep.violate(op, format!("free of a live table failed: {e}"));
                    }
                    held.remove(&id);
                    stale.push(t);
                    rep.frees += 1;
                }
                None => rep.violate(op, format!("oracle holds {id} but the pool has no table")),
            }
        } else if roll < 97 {
            // double free or stale table: must fail and change nothing
            if stale.is_empty() {
                continue;
            }
            let t = stale.swap_remove(rng.random_range(0..stale.len()));
            if pool.free(&t).is_ok() {
                rep.violate(op, format!("stale table for {} accepted", t.adapter));
            }
        } else {
            pool.compact();
            if pool.scatter() != 0.0 {
                rep.violate(op, "compaction left pages outside the prefix".into());
            }
        }
        check_pool(&pool, &held, total_pages, op, &mut rep);
        if (90..97).contains(&roll) && pool.dump() != before {
            rep.violate(op, "rejected free modified the pool".into());
        }
    }
    rep
}

/// Atomicity is checked separately from churn: a refused alloc must leave
/// the pool byte-for-byte unchanged.
pub fn refused_allocs_are_atomic(seed: u64) -> Vec<String> {
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut pool = PagePool::new(DEFAULT_PAGE_SIZE, 64).unwrap();
    let mut out = Vec::new();
    let mut next = 0;
    for _ in 0..2000 {
        let (rank, mib) = RANK_SIZES[rng.random_range(0..RANK_SIZES.len())];
        let before = pool.dump();
        match pool.alloc(&spec(next, rank, mib * MIB)) {
            Ok(_) => next += 1,
            Err(_) => {
                if pool.dump() != before {
                    out.push(format!("refused rank-{rank} alloc changed the pool"));
                }
                // make room and keep going
                let victims: Vec<AdapterId> = pool.tables().map(|t| t.adapter).collect();
                if let Some(&v) = victims.get(rng.random_range(0..victims.len().max(1))) {
                    pool.release(v).unwrap();
                }
            }
        }
    }
    out
}

fn check_pool(
    pool: &PagePool,
    held: &BTreeMap<u32, (u64, u64)>,
    total: u32,
    op: u64,
    rep: &mut ChurnReport,
) {
    if let Err(e) = pool.check_invariants() {
        rep.violate(op, e);
    }
    let dump = pool.dump();
    // conservation
    let owned = dump.owners.iter().filter(|o| o.is_some()).count() as u64;
    let expected: u64 = held.values().map(|h| h.1).sum();
    if owned != expected || pool.free_pages() as u64 != total as u64 - expected {
        rep.violate(
            op,
            format!("conservation: {owned} owned, oracle says {expected}"),
        );
    }
    // bijectivity: every mapped page owned by its table's adapter, no page twice
    let mut seen = vec![false; dump.owners.len()];
    for (id, pages) in &dump.tables {
        if held.get(&id.0).map(|h| h.1) != Some(pages.len() as u64) {
            rep.violate(op, format!("adapter {id} maps {} pages", pages.len()));
        }
        for &p in pages {
            if std::mem::replace(&mut seen[p as usize], true) {
                rep.violate(op, format!("page {p} mapped twice"));
            }
            if dump.owners[p as usize] != Some(*id) {
                rep.violate(op, format!("page {p} owner mismatch"));
            }
        }
    }
    if dump.tables.len() != held.len() {
        rep.violate(
            op,
            format!("{} tables, oracle holds {}", dump.tables.len(), held.len()),
        );
    }
    if pool.used_bytes() != held.values().map(|h| h.0).sum::<u64>() {
        rep.violate(op, "used bytes drifted".into());
    }
}

/// Random churn on the contiguous arena, checked against a byte-count oracle.
/// External-fragmentation refusals are legal here and counted by the arena.
pub fn block_churn(ops: u64, capacity: u64, num_adapters: u32, seed: u64) -> ChurnReport {
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut arena = BlockArena::new(capacity);
    let mut held: BTreeMap<u32, u64> = BTreeMap::new();
    let mut rep = ChurnReport::default();
    for op in 0..ops {
        rep.ops += 1;
        if rng.random_bool(0.55) {
            let id = rng.random_range(0..num_adapters);
            let bytes = RANK_SIZES[rng.random_range(0..RANK_SIZES.len())].1 * MIB;
            let largest = arena.largest_free();
            let before = arena.regions().to_vec();
            match (held.contains_key(&id), arena.alloc(AdapterId(id), bytes)) {
                (false, Ok(r)) => {
                    if r.length != bytes {
                        rep.violate(op, "region length differs from request".into());
                    }
                    held.insert(id, bytes);
                    rep.allocs += 1;
                }
                (false, Err(_)) if bytes > largest => {
                    if arena.regions() != before {
                        rep.violate(op, "refused alloc changed the arena".into());
                    }
                }
                (false, Err(e)) => {
                    rep.violate(op, format!("hole of {largest} refused {bytes}: {e}"))
                }
                (true, Err(MemoryError::AlreadyAllocated(_))) => {}
                (true, r) => rep.violate(op, format!("duplicate alloc gave {r:?}")),
            }
        } else if let Some(&id) = held.keys().nth(rng.random_range(0..held.len().max(1))) {
            arena.free(AdapterId(id)).unwrap();
            held.remove(&id);
            rep.frees += 1;
            if arena.free(AdapterId(id)).is_ok() {
                rep.violate(op, "double free accepted".into());
            }
        }
        if let Err(e) = arena.check_invariants() {
            rep.violate(op, e);
        }
        if arena.used_bytes() != held.values().sum::<u64>() {
            rep.violate(op, "conservation: used bytes drifted".into());
        }
    }
    rep
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct AdversarialOutcome {
    pub block_frag_failures: u64,
    pub paged_frag_failures: u64,
    pub large_requests: u64,
}

/// Fill the pool with a seeded mix of page-aligned adapters, free
/// every other one, then ask for large adapters that fit in the total free
/// space but not in any single hole.
pub fn adversarial(seed: u64) -> AdversarialOutcome {
    let mut rng = Pcg64::seed_from_u64(seed);
    let capacity = 1024 * MIB;
    let mut arena = BlockArena::new(capacity);
    let mut pool = PagePool::with_capacity(DEFAULT_PAGE_SIZE, capacity).unwrap();
    let mut ids = Vec::new();
    let mut next = 0u32;
    loop {
        let (rank, mib) = RANK_SIZES[rng.random_range(1..4)];
        let s = spec(next, rank, mib * MIB);
        if arena.alloc(s.id, s.weight_bytes).is_err() {
            break;
        }
        pool.alloc(&s).unwrap();
        ids.push(s.id);
        next += 1;
    }
    for id in ids.iter().step_by(2) {
        arena.free(*id).unwrap();
        pool.release(*id).unwrap();
    }
    let mut out = AdversarialOutcome::default();
    for _ in 0..4 {
        let s = spec(next, 128, 208 * MIB);
        next += 1;
        let paged_free = pool.free_pages() as u64 * pool.page_size();
        if s.weight_bytes > arena.free_bytes() || s.weight_bytes > paged_free {
            break;
        }
        out.large_requests += 1;
        // the arena counts its own fragmentation refusals
        let _ = arena.alloc(s.id, s.weight_bytes);
        if pool.alloc(&s).is_err() {
            out.paged_frag_failures += 1;
        }
    }
    out.block_frag_failures = arena.fragmentation_failures();
    out
}
