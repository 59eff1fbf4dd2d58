use plora_core::adapter::AdapterId;
use plora_core::workload::{
    generate_synthetic, parse_trace, FunctionMapping, Request, SyntheticProfile, TraceOptions,
    WorkloadError,
};

fn parse(text: &str, scale: f64) -> Result<Vec<Request>, WorkloadError> {
    parse_trace(
        text,
        &TraceOptions {
            rate_scale: scale,
            ..TraceOptions::default()
        },
    )
}

#[test]
fn rate_scale_divides_gaps() {
    let reqs = parse(
        "timestamp_ms,function_id,input_tokens,output_tokens\n1000,f,10,5\n1100,f,10,5\n",
        2.0,
    )
    .unwrap();
    assert_eq!(reqs[0].arrival_us, 0);
    assert_eq!(reqs[1].arrival_us - reqs[0].arrival_us, 50_000);
    assert_eq!(reqs[1].input_tokens, 10);
}

#[test]
fn distinct_functions_get_distinct_adapters() {
    let reqs = parse("timestamp_ms,function_id\n0,a\n1,b\n2,c\n3,a\n", 1.0).unwrap();
    let ids: Vec<u32> = reqs.iter().map(|r| r.adapter.0).collect();
    assert_eq!(ids, vec![0, 1, 2, 0]);
    // token columns absent: fallback lengths apply
    assert!(reqs
        .iter()
        .all(|r| r.input_tokens >= 1 && r.output_tokens >= 1));
}

#[test]
fn negative_timestamp_names_the_line() {
    let err = parse("timestamp_ms,function_id\n0,a\n-5,b\n", 1.0).unwrap_err();
    match err {
        WorkloadError::Parse { line, .. } => assert_eq!(line, 3),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn malformed_and_empty_traces() {
    assert!(matches!(
        parse("timestamp_ms,function_id\nabc,a\n", 1.0),
        Err(WorkloadError::Parse { line: 2, .. })
    ));
    assert!(matches!(
        parse("timestamp_ms,function_id\n", 1.0),
        Err(WorkloadError::Invalid(_))
    ));
    assert!(parse("timestamp_ms,function_id\n0,a\n", 0.0).is_err());
}

#[test]
fn unsorted_rows_are_ordered() {
    let reqs = parse("timestamp_ms,function_id\n30,a\n10,b\n20,c\n", 1.0).unwrap();
    let t: Vec<u64> = reqs.iter().map(|r| r.arrival_us).collect();
    assert_eq!(t, vec![0, 10_000, 20_000]);
    assert_eq!(reqs[0].adapter, AdapterId(0));
}

#[test]
fn top_n_and_hash_mod() {
    let text = "timestamp_ms,function_id\n0,a\n1,b\n2,b\n3,c\n4,b\n5,c\n";
    let top = parse_trace(
        text,
        &TraceOptions {
            mapping: FunctionMapping::TopN { adapters: 2 },
            ..TraceOptions::default()
        },
    )
    .unwrap();
    // b (3 rows) -> 0, c (2 rows) -> 1, a dropped
    assert_eq!(top.len(), 5);
    assert_eq!(top[0].adapter, AdapterId(0));
    assert_eq!(top[2].adapter, AdapterId(1));

    let hashed = parse_trace(
        text,
        &TraceOptions {
            mapping: FunctionMapping::HashMod { adapters: 3 },
            ..TraceOptions::default()
        },
    )
    .unwrap();
    assert!(hashed.iter().all(|r| r.adapter.0 < 3));
    assert_eq!(hashed[1].adapter, hashed[2].adapter);
}

fn flat_profile() -> SyntheticProfile {
    SyntheticProfile {
        num_adapters: 20,
        base_rate: 50.0,
        hot_set_size: 20,
        hot_set_rotation_period_s: 0.0,
        ..SyntheticProfile::default()
    }
}

#[test]
fn flat_rate_matches_base_rate() {
    let p = flat_profile();
    let reqs = generate_synthetic(&p, 300.0, 11).unwrap();
    let empirical = reqs.len() as f64 / 300.0;
    assert!(
        (empirical / p.base_rate - 1.0).abs() < 0.05,
        "rate {empirical}"
    );
}

#[test]
fn diurnal_rate_follows_sine() {
    let p = SyntheticProfile {
        diurnal_amplitude: 0.8,
        period_s: 100.0,
        ..flat_profile()
    };
    let reqs = generate_synthetic(&p, 1000.0, 5).unwrap();
    // first quarter of each period runs hot, third quarter runs cold
    let (mut high, mut low) = (0usize, 0usize);
    for r in &reqs {
        let phase = (r.arrival_ms() / 1000.0) % 100.0;
        if (0.0..50.0).contains(&phase) {
            high += 1;
        } else {
            low += 1;
        }
    }
    // expected ratio (1 + 2a/pi) / (1 - 2a/pi) ~ 3.0
    let ratio = high as f64 / low as f64;
    assert!((2.6..3.4).contains(&ratio), "ratio {ratio}");
}

#[test]
fn same_seed_same_stream() {
    let p = SyntheticProfile::default();
    assert_eq!(
        generate_synthetic(&p, 30.0, 3).unwrap(),
        generate_synthetic(&p, 30.0, 3).unwrap()
    );
    assert_ne!(
        generate_synthetic(&p, 30.0, 3).unwrap(),
        generate_synthetic(&p, 30.0, 4).unwrap()
    );
}

#[test]
fn full_hot_set_is_uniform() {
    let p = flat_profile();
    let reqs = generate_synthetic(&p, 400.0, 21).unwrap();
    let mut counts = [0f64; 20];
    for r in &reqs {
        counts[r.adapter.index()] += 1.0;
    }
    let expected = reqs.len() as f64 / 20.0;
    let chi2: f64 = counts
        .iter()
        .map(|c| (c - expected).powi(2) / expected)
        .sum();
    // 99.9th percentile of chi-square with 19 degrees of freedom
    assert!(chi2 < 43.82, "chi2 {chi2}");
}

#[test]
fn hot_set_gets_its_share() {
    let p = SyntheticProfile {
        num_adapters: 20,
        base_rate: 40.0,
        hot_set_size: 4,
        hot_share: 0.9,
        hot_set_rotation_period_s: 5.0,
        ..SyntheticProfile::default()
    };
    let reqs = generate_synthetic(&p, 200.0, 8).unwrap();
    let hot = reqs
        .iter()
        .filter(|r| p.hot_set_at(r.arrival_ms() / 1000.0).contains(&r.adapter))
        .count();
    let share = hot as f64 / reqs.len() as f64;
    assert!((share - 0.9).abs() < 0.02, "share {share}");
    // rotation walks through all five groups
    assert_eq!(
        p.hot_set_at(0.0),
        vec![AdapterId(0), AdapterId(1), AdapterId(2), AdapterId(3)]
    );
    assert_eq!(p.hot_set_at(5.0)[0], AdapterId(4));
    assert_eq!(p.hot_set_at(25.0)[0], AdapterId(0));
}

#[test]
fn bursty_arrivals_are_overdispersed() {
    let p = SyntheticProfile {
        burstiness: 3.0,
        ..flat_profile()
    };
    let reqs = generate_synthetic(&p, 600.0, 2).unwrap();
    let gaps: Vec<f64> = reqs
        .windows(2)
        .map(|w| (w[1].arrival_us - w[0].arrival_us) as f64)
        .collect();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / gaps.len() as f64;
    let cv = var.sqrt() / mean;
    assert!(cv > 2.0, "cv {cv}");
}

#[test]
fn sustains_high_rates() {
    let p = SyntheticProfile {
        base_rate: 500.0,
        ..SyntheticProfile::default()
    };
    let reqs = generate_synthetic(&p, 120.0, 1).unwrap();
    assert!(reqs.len() > 55_000);
}

#[test]
fn invalid_profiles() {
    let p = SyntheticProfile {
        hot_set_size: 30,
        ..SyntheticProfile::default()
    };
    assert!(generate_synthetic(&p, 10.0, 0).is_err());
    assert!(generate_synthetic(&SyntheticProfile::default(), 0.0, 0).is_err());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn streams_sorted_and_conserved(seed in 0u64..1000, amp in 0.0f64..1.0, cv in 0.2f64..3.0) {
            let p = SyntheticProfile { diurnal_amplitude: amp, period_s: 20.0, burstiness: cv, ..SyntheticProfile::default() };
            let reqs = generate_synthetic(&p, 30.0, seed).unwrap();
            prop_assert!(reqs.windows(2).all(|w| w[0].arrival_us <= w[1].arrival_us));
            let mut per = vec![0usize; p.num_adapters as usize];
            for r in &reqs { per[r.adapter.index()] += 1; }
            prop_assert_eq!(per.iter().sum::<usize>(), reqs.len());
            prop_assert!(reqs.iter().all(|r| r.input_tokens >= 1 && r.output_tokens >= 1));
        }
    }
}

fn reshuffled(period: f64) -> SyntheticProfile {
    SyntheticProfile {
        num_adapters: 20,
        base_rate: 50.0,
        hot_set_size: 4,
        hot_share: 1.0,
        hot_set_rotation_period_s: 6.0,
        reshuffle_period_s: period,
        ..SyntheticProfile::default()
    }
}

#[test]
fn reshuffle_keeps_groups_disjoint_within_an_epoch() {
    let p = reshuffled(150.0);
    for epoch in 0..4 {
        let start = epoch as f64 * 150.0;
        // one full rotation cycle covers every adapter exactly once
        let mut seen: Vec<AdapterId> = (0..5)
            .flat_map(|k| p.hot_set_at(start + 6.0 * k as f64 + 1.0))
            .collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 20, "epoch {epoch}");
        // the grouping is fixed inside the epoch
        assert_eq!(p.hot_set_at(start + 1.0), p.hot_set_at(start + 31.0));
    }
}

#[test]
fn reshuffle_changes_groups_across_epochs() {
    let p = reshuffled(150.0);
    let groups = |t0: f64| -> Vec<Vec<AdapterId>> {
        (0..5)
            .map(|k| {
                let mut g = p.hot_set_at(t0 + 6.0 * k as f64 + 1.0);
                g.sort();
                g
            })
            .collect()
    };
    assert_ne!(groups(0.0), groups(150.0));
    // without reshuffling the groups are fixed runs of ids
    let fixed = reshuffled(0.0);
    assert_eq!(fixed.hot_set_at(1.0), fixed.hot_set_at(151.0));
    assert_eq!(
        fixed.hot_set_at(1.0),
        vec![AdapterId(0), AdapterId(1), AdapterId(2), AdapterId(3)]
    );
}

#[test]
fn reshuffled_requests_follow_the_hot_set() {
    let p = reshuffled(150.0);
    let reqs = generate_synthetic(&p, 400.0, 3).unwrap();
    assert!(reqs
        .iter()
        .all(|r| p.hot_set_at(r.arrival_ms() / 1000.0).contains(&r.adapter)));
    assert!(generate_synthetic(&reshuffled(-1.0), 10.0, 0).is_err());
}
