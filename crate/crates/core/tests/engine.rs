use plora_core::adapter::{AdapterId, Catalog, SizeTable, MIB};
use plora_core::config::RunConfig;
use plora_core::engine::metrics::{percentile, LatencySummary};
use plora_core::engine::{self, EngineConfig, Link, PolicyKind, Priority, RequestOutcome};
use plora_core::memory::AllocatorKind;
use plora_core::report;
use plora_core::workload::{generate_synthetic, LengthDistribution, Request, SyntheticProfile};

fn req(id: u64, at_ms: u64, adapter: u32) -> Request {
    Request {
        id,
        arrival_us: at_ms * 1000,
        adapter: AdapterId(adapter),
        input_tokens: 100,
        output_tokens: 4,
    }
}

fn cfg(kind: PolicyKind, alloc: AllocatorKind) -> EngineConfig {
    let mut c = EngineConfig::default();
    c.policy.kind = kind;
    c.allocator.kind = alloc;
    c.allocator.pool_bytes = 1 << 30;
    c.options.warmup_s = 0.0;
    c
}

/// Transfer time in µs for `bytes` at 4 GB/s shared by `n`, plus 2 ms.
fn closed_form(bytes: u64, n: u64) -> u64 {
    (bytes as f64 * n as f64 / 4000.0).ceil() as u64 + 2000
}

fn outcome(run: &engine::RunResult, id: u64) -> &RequestOutcome {
    run.outcomes.iter().find(|o| o.request.id == id).unwrap()
}

#[test]
fn single_rank64_cold_start_matches_closed_form() {
    let cat = Catalog::uniform(2, 64, &SizeTable::default()).unwrap();
    let run = engine::run(
        &cfg(PolicyKind::Reactive, AllocatorKind::Paged),
        &cat,
        &[req(0, 0, 0)],
    )
    .unwrap();
    let o = outcome(&run, 0);
    assert!(o.cold_start);
    assert_eq!(o.cold_start_us, closed_form(104 * MIB, 1));
    // 2 ms + 104 MiB at 4 GB/s
    assert!((o.cold_start_us as f64 / 1000.0 - 29.263).abs() < 0.001);
}

#[test]
fn rank8_cold_start() {
    let cat = Catalog::uniform(1, 8, &SizeTable::default()).unwrap();
    let run = engine::run(
        &cfg(PolicyKind::Reactive, AllocatorKind::Block),
        &cat,
        &[req(0, 5, 0)],
    )
    .unwrap();
    let o = outcome(&run, 0);
    assert_eq!(o.cold_start_us, closed_form(13 * MIB, 1));
    assert!((o.cold_start_us as f64 / 1000.0 - 5.408).abs() < 0.001);
}

#[test]
fn concurrent_loads_share_bandwidth() {
    let cat = Catalog::uniform(2, 64, &SizeTable::default()).unwrap();
    let run = engine::run(
        &cfg(PolicyKind::Reactive, AllocatorKind::Paged),
        &cat,
        &[req(0, 0, 0), req(1, 0, 1)],
    )
    .unwrap();
    let a = outcome(&run, 0);
    let b = outcome(&run, 1);
    assert!(a.cold_start && b.cold_start);
    // with both admitted at t=0 the loads overlap fully
    assert_eq!(a.cold_start_us, closed_form(104 * MIB, 2));
    assert_eq!(b.cold_start_us, closed_form(104 * MIB, 2));
    assert!((a.cold_start_us as f64 / 1000.0 - 56.526).abs() < 0.001);
}

#[test]
fn resident_adapter_is_warm() {
    let cat = Catalog::uniform(1, 16, &SizeTable::default()).unwrap();
    let run = engine::run(
        &cfg(PolicyKind::Reactive, AllocatorKind::Paged),
        &cat,
        &[req(0, 0, 0), req(1, 2000, 0)],
    )
    .unwrap();
    let o = outcome(&run, 1);
    assert!(!o.cold_start);
    assert_eq!(o.cold_start_us, 0);
    assert!(o.resident_at_arrival);
}

#[test]
fn ttft_decomposes_exactly() {
    let cat = Catalog::uniform(3, 32, &SizeTable::default()).unwrap();
    let reqs = vec![
        req(0, 0, 0),
        req(1, 1, 1),
        req(2, 3, 2),
        req(3, 40, 0),
        req(4, 41, 1),
    ];
    let run = engine::run(
        &cfg(PolicyKind::Reactive, AllocatorKind::Paged),
        &cat,
        &reqs,
    )
    .unwrap();
    assert_eq!(run.outcomes.len(), 5);
    for o in &run.outcomes {
        assert_eq!(o.ttft_us, o.queue_us + o.cold_start_us + o.prefill_us);
        assert_eq!(o.prefill_us, 15_000);
        assert!(o.ttft_us >= o.queue_us);
        assert_eq!(o.cold_start, o.cold_start_us > 0);
    }
}

#[test]
fn prefetch_mid_transfer_waits_for_remainder() {
    let cat = Catalog::uniform(2, 64, &SizeTable::default()).unwrap();
    let mut c = cfg(PolicyKind::Oracle, AllocatorKind::Paged);
    c.policy.staging_fraction = 0.5;
    c.options.verbose = true;
    // oracle sees the arrival at 10 ms and prefetches at the round at t=0
    let run = engine::run(&c, &cat, &[req(0, 10, 0)]).unwrap();
    let o = outcome(&run, 0);
    assert!(o.cold_start);
    assert_eq!(o.cold_start_us, closed_form(104 * MIB, 1) - 10_000);
    assert_eq!(run.metrics.activity.prefetch_upgrades, 1);
}

#[test]
fn completed_prefetch_makes_arrival_warm() {
    let cat = Catalog::uniform(2, 64, &SizeTable::default()).unwrap();
    let mut c = cfg(PolicyKind::Oracle, AllocatorKind::Paged);
    c.policy.staging_fraction = 0.5;
    // the round at 300 ms looks 1 s ahead; the transfer lands at ~329 ms
    let run = engine::run(&c, &cat, &[req(0, 1200, 1)]).unwrap();
    let o = outcome(&run, 0);
    assert!(!o.cold_start);
    assert!(o.resident_at_arrival);
    assert_eq!(run.metrics.activity.prefetches, 1);
    assert_eq!(run.metrics.activity.demand_loads, 0);
}

#[test]
fn empty_workload() {
    let cat = Catalog::uniform(2, 8, &SizeTable::default()).unwrap();
    let run = engine::run(
        &cfg(PolicyKind::Predictive, AllocatorKind::Paged),
        &cat,
        &[],
    )
    .unwrap();
    assert_eq!(run.metrics.completed, 0);
    assert_eq!(run.metrics.throughput_rps, 0.0);
    assert_eq!(run.metrics.cold_start.count, 0);
}

#[test]
fn pool_smaller_than_adapter_is_rejected() {
    let cat = Catalog::uniform(1, 64, &SizeTable::default()).unwrap();
    let mut c = cfg(PolicyKind::Reactive, AllocatorKind::Paged);
    c.allocator.pool_bytes = 100 * MIB;
    let err = engine::run(&c, &cat, &[req(0, 0, 0)]).unwrap_err();
    assert!(err.to_string().contains("pool_bytes"), "{err}");
}

#[test]
fn unknown_adapter_is_rejected() {
    let cat = Catalog::uniform(1, 8, &SizeTable::default()).unwrap();
    assert!(engine::run(
        &cfg(PolicyKind::Reactive, AllocatorKind::Paged),
        &cat,
        &[req(0, 0, 3)]
    )
    .is_err());
}

fn synthetic_run(kind: PolicyKind, alloc: AllocatorKind, seed: u64) -> engine::RunResult {
    let profile = SyntheticProfile {
        base_rate: 15.0,
        output_tokens: LengthDistribution::Fixed { tokens: 8 },
        ..SyntheticProfile::default()
    };
    let reqs = generate_synthetic(&profile, 40.0, seed).unwrap();
    let cat = Catalog::generate(
        20,
        &[8, 16, 32, 64],
        &[1.0; 4],
        plora_core::adapter::RankAssignment::RoundRobin,
        seed,
        &SizeTable::default(),
    )
    .unwrap();
    let mut c = cfg(kind, alloc);
    c.seed = seed;
    c.allocator.pool_bytes = 300 * MIB;
    c.policy.staging_fraction = 0.3;
    c.predictor.hidden = 16;
    c.options.verbose = true;
    engine::run(&c, &cat, &reqs).unwrap()
}

#[test]
fn synthetic_runs_close_their_books() {
    for kind in [
        PolicyKind::Reactive,
        PolicyKind::Predictive,
        PolicyKind::Oracle,
    ] {
        for alloc in [AllocatorKind::Paged, AllocatorKind::Block] {
            let run = synthetic_run(kind, alloc, 3);
            let m = &run.metrics;
            assert_eq!(m.completed, m.requests, "{}", m.label);
            assert!((m.throughput_rps * m.duration_s - m.completed as f64).abs() < 1e-6);
            for o in &run.outcomes {
                assert_eq!(o.ttft_us, o.queue_us + o.cold_start_us + o.prefill_us);
            }
            let o = &m.overhead;
            let rounds = o.prediction_rounds;
            assert_eq!(o.predictor_us, 2300 * rounds);
            assert!((o.predictor_ms - 2.3 * rounds as f64).abs() < 1e-9);
            if kind == PolicyKind::Reactive {
                assert_eq!(rounds, 0);
            } else {
                assert!(rounds > 0);
                assert_eq!(o.prefetch_scheduler_us, 800 * rounds);
            }
            if alloc == AllocatorKind::Paged {
                assert_eq!(o.page_table_us, 400 * o.batches);
                if kind != PolicyKind::Reactive {
                    assert_eq!(o.per_round_us, 3500);
                    assert_eq!(o.per_round_ms, 3.5);
                }
            }
        }
    }
}

#[test]
fn prediction_rounds_stay_on_the_grid() {
    let run = synthetic_run(PolicyKind::Oracle, AllocatorKind::Paged, 4);
    let rounds = run.metrics.overhead.prediction_rounds;
    // rounds at 0, 100 ms, ... up to the last completion
    let expected = run.metrics.duration_s * 10.0;
    assert!(
        (rounds as f64 - expected).abs() <= 1.0,
        "{rounds} vs {expected}"
    );
    let prefetch_times: Vec<u64> = run
        .decisions
        .iter()
        .filter(|d| d.action == engine::Action::Prefetch)
        .map(|d| d.time_us)
        .collect();
    assert!(!prefetch_times.is_empty());
}

#[test]
fn oracle_has_fewest_cold_starts() {
    for seed in [1, 2] {
        let oracle = synthetic_run(PolicyKind::Oracle, AllocatorKind::Paged, seed)
            .metrics
            .cold_start
            .count;
        for kind in [PolicyKind::Reactive, PolicyKind::Predictive] {
            let other = synthetic_run(kind, AllocatorKind::Paged, seed)
                .metrics
                .cold_start
                .count;
            assert!(oracle <= other, "oracle {oracle} vs {kind:?} {other}");
        }
    }
}

#[test]
fn runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for i in 0..2 {
        let run = synthetic_run(PolicyKind::Predictive, AllocatorKind::Paged, 9);
        let out = dir.path().join(format!("r{i}"));
        files.push(report::write_run(&out, &run, "seed = 9\n", true).unwrap());
    }
    for (a, b) in [
        (&files[0].metrics, &files[1].metrics),
        (&files[0].requests, &files[1].requests),
        (&files[0].timeseries, &files[1].timeseries),
    ] {
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
    assert_eq!(
        std::fs::read(files[0].decisions.as_ref().unwrap()).unwrap(),
        std::fs::read(files[1].decisions.as_ref().unwrap()).unwrap()
    );
}

#[test]
fn outputs_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = synthetic_run(PolicyKind::Oracle, AllocatorKind::Block, 5);
    let cfg_text = RunConfig::default().to_toml();
    let f = report::write_run(dir.path(), &run, &cfg_text, true).unwrap();
    assert_eq!(report::read_metrics(&f.metrics).unwrap(), run.metrics);
    let rows = report::read_requests(&f.requests).unwrap();
    assert_eq!(rows.len(), run.outcomes.len());
    for (r, o) in rows.iter().zip(&run.outcomes) {
        assert_eq!(*r, report::RequestRow::from(o));
    }
    assert_eq!(
        report::read_timeseries(&f.timeseries).unwrap(),
        run.timeseries
    );
    assert_eq!(
        report::read_decisions(f.decisions.as_ref().unwrap())
            .unwrap()
            .len(),
        run.decisions.len()
    );
    let header = std::fs::read_to_string(&f.requests).unwrap();
    assert!(header
        .starts_with("request_id,arrival_ms,adapter_id,cold_start,ttft_ms,tpot_ms,queue_ms\n"));
    let back =
        RunConfig::from_toml_str(&std::fs::read_to_string(&f.config).unwrap(), dir.path()).unwrap();
    assert_eq!(back, RunConfig::default());
}

#[test]
fn horizon_caps_the_run() {
    let profile = SyntheticProfile {
        base_rate: 200.0,
        ..SyntheticProfile::default()
    };
    let reqs = generate_synthetic(&profile, 30.0, 1).unwrap();
    let cat = Catalog::uniform(20, 8, &SizeTable::default()).unwrap();
    let mut c = cfg(PolicyKind::Reactive, AllocatorKind::Paged);
    c.options.horizon_s = Some(10.0);
    let run = engine::run(&c, &cat, &reqs).unwrap();
    assert_eq!(run.metrics.duration_s, 10.0);
    assert!(run.metrics.completed < run.metrics.requests);
    assert!(run.outcomes.iter().all(|o| o.completion_us <= 10_000_000));
}

#[test]
fn single_transfer_takes_bytes_over_bandwidth() {
    let mut l = Link::new(4e9, 2000);
    l.start(0, AdapterId(0), 4_000_000, Priority::Demand);
    assert_eq!(l.next_completion(), Some(1000));
    assert_eq!(l.finish(1000), vec![AdapterId(0)]);
    assert_eq!(l.next_completion(), None);
}

#[test]
fn demand_preempts_prefetch() {
    let mut l = Link::new(1e6, 0);
    l.start(0, AdapterId(0), 100, Priority::Prefetch);
    l.start(50, AdapterId(1), 100, Priority::Demand);
    // prefetch has 50 bytes left and stalls while the demand runs
    assert_eq!(l.next_completion(), Some(150));
    assert_eq!(l.finish(150), vec![AdapterId(1)]);
    assert_eq!(l.next_completion(), Some(200));
}

#[test]
fn equal_sharing_and_upgrade() {
    let mut l = Link::new(1e6, 0);
    l.start(0, AdapterId(0), 100, Priority::Demand);
    l.start(0, AdapterId(1), 100, Priority::Demand);
    assert_eq!(l.next_completion(), Some(200));
    let mut l = Link::new(1e6, 0);
    l.start(0, AdapterId(0), 100, Priority::Prefetch);
    l.start(0, AdapterId(1), 100, Priority::Prefetch);
    assert!(l.upgrade(20, AdapterId(0)));
    // 90 bytes left, now alone in the demand class
    assert_eq!(l.next_completion(), Some(110));
}

#[test]
fn nearest_rank() {
    let v = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(percentile(&v, 0.5), 2.0);
    assert_eq!(percentile(&v, 0.99), 4.0);
    assert_eq!(percentile(&[], 0.5), 0.0);
    let mut w = vec![3.0, 1.0, 2.0];
    let s = LatencySummary::from_ms(&mut w);
    assert_eq!((s.count, s.p50_ms, s.mean_ms), (3, 2.0, 2.0));
}

#[test]
fn queued_requests_are_staged_ahead_of_admission() {
    let cat = Catalog::uniform(2, 64, &SizeTable::default()).unwrap();
    let reqs = [req(0, 0, 0), req(1, 0, 1)];
    let run_with = |queued: bool| {
        let mut c = cfg(PolicyKind::Predictive, AllocatorKind::Paged);
        c.cost.batch_slots = 1;
        c.policy.staging_fraction = 0.5;
        // keep forecast picks out of the way
        c.policy.theta = 0.999;
        c.policy.prefetch_queued = queued;
        c.options.verbose = true;
        engine::run(&c, &cat, &reqs).unwrap()
    };
    let plain = run_with(false);
    let queued = run_with(true);
    // without lookahead the second adapter loads only once its request gets the slot
    assert_eq!(outcome(&plain, 1).cold_start_us, closed_form(104 * MIB, 1));
    assert!(outcome(&queued, 1).cold_start_us < outcome(&plain, 1).cold_start_us);
    let staged = queued
        .decisions
        .iter()
        .find(|d| d.action == engine::Action::Prefetch)
        .expect("queued adapter prefetched");
    assert_eq!(staged.adapter, Some(AdapterId(1)));
    assert_eq!(staged.probability, 1.0);
    // the first request still sees the full demand load
    assert_eq!(outcome(&queued, 0).cold_start_us, closed_form(104 * MIB, 1));
}
