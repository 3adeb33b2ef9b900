//! End-to-end engine runs on the in-memory network, checked against the
//! reference nested-loop join and, in deterministic mode, the trace checker.

use std::time::Duration;

use shardjoin_core::config::{ClusterConfig, JoinMode, Predicate, ResultFormat, TABLE_R, TABLE_S};
use shardjoin_core::model::result::EntryCodec;
use shardjoin_core::model::tuple::Partition;
use shardjoin_core::oracle::{multiset_diff, nested_loop_join};
use shardjoin_core::sim::{run_sim, SimMode, SimOutcome, SimSpec};
use shardjoin_core::trace::check_trace;
use shardjoin_core::workload::{generate_partition, GenSpec, KeyDist};

fn small_cfg(n: u32, tuples: u64, domain: u64) -> ClusterConfig {
    let mut cfg = ClusterConfig::localhost(n, 7000);
    cfg.partition_size_r = tuples;
    cfg.partition_size_s = tuples;
    cfg.domain = domain;
    cfg.tuple_size = 16;
    cfg.num_buckets = 64;
    cfg.pool_capacity = cfg.default_pool_capacity();
    cfg
}

fn gen_parts(cfg: &ClusterConfig, seed: u64) -> (Vec<Partition>, Vec<Partition>) {
    let spec = GenSpec {
        seed,
        tuples_per_partition: cfg.partition_size_r,
        domain: cfg.domain,
        tuple_size: cfg.tuple_size,
        distribution: KeyDist::Uniform,
    };
    let r = (0..cfg.num_nodes()).map(|i| generate_partition(&spec, TABLE_R, i)).collect();
    let s = (0..cfg.num_nodes()).map(|i| generate_partition(&spec, TABLE_S, i)).collect();
    (r, s)
}

fn check_against_reference(cfg: &ClusterConfig, out: &SimOutcome, r: &[Partition], s: &[Partition]) {
    let expected = nested_loop_join(r, s, &cfg.predicate, cfg.result_format);
    let codec = EntryCodec::new(cfg.result_format, cfg.tuple_size);
    let mut got = Vec::new();
    for b in &out.sink_blocks {
        got.extend(b.decode(&codec).expect("decodable sink blocks"));
    }
    assert_eq!(out.sink_entries as usize, got.len(), "sink count vs decoded entries");
    if let Some(diff) = multiset_diff("engine", got, "reference", expected) {
        panic!("result mismatch: {diff}");
    }
}

#[test]
fn two_node_broadcast_equality_matches_reference() {
    let cfg = small_cfg(2, 300, 500);
    let (r, s) = gen_parts(&cfg, 11);
    let out = run_sim(&SimSpec::free(cfg.clone()), &r, &s).expect("sim runs");
    check_against_reference(&cfg, &out, &r, &s);
}

#[test]
fn single_node_runs_and_matches() {
    let cfg = small_cfg(1, 200, 300);
    let (r, s) = gen_parts(&cfg, 3);
    let out = run_sim(&SimSpec::free(cfg.clone()), &r, &s).expect("sim runs");
    check_against_reference(&cfg, &out, &r, &s);
}

#[test]
fn three_node_hash_distributed_matches() {
    let mut cfg = small_cfg(3, 250, 400);
    cfg.join_mode = JoinMode::HashDistributed;
    let (r, s) = gen_parts(&cfg, 7);
    let out = run_sim(&SimSpec::free(cfg.clone()), &r, &s).expect("sim runs");
    check_against_reference(&cfg, &out, &r, &s);
}

#[test]
fn band_join_broadcast_matches() {
    let mut cfg = small_cfg(2, 120, 900);
    cfg.predicate = Predicate::Band { width: 2 };
    let (r, s) = gen_parts(&cfg, 19);
    let out = run_sim(&SimSpec::free(cfg.clone()), &r, &s).expect("sim runs");
    check_against_reference(&cfg, &out, &r, &s);
}

#[test]
fn full_payload_round_trip() {
    let mut cfg = small_cfg(2, 80, 100);
    cfg.result_format = ResultFormat::FullPayloads;
    cfg.tuple_size = 24;
    let (r, s) = gen_parts(&cfg, 23);
    let out = run_sim(&SimSpec::free(cfg.clone()), &r, &s).expect("sim runs");
    check_against_reference(&cfg, &out, &r, &s);
}

#[test]
fn det_mode_trace_is_clean() {
    let mut cfg = small_cfg(2, 60, 100);
    cfg.n_compute = 2;
    let (r, s) = gen_parts(&cfg, 5);
    let out = run_sim(&SimSpec::det(cfg.clone(), 42), &r, &s).expect("det sim runs");
    check_against_reference(&cfg, &out, &r, &s);
    assert!(!out.trace.is_empty(), "deterministic runs record a trace");
    let violations = check_trace(&out.trace, &cfg);
    assert!(violations.is_empty(), "trace violations: {violations:#?}");
}

#[test]
fn det_mode_same_seed_same_trace() {
    let cfg = small_cfg(2, 40, 80);
    let (r, s) = gen_parts(&cfg, 9);
    let a = run_sim(&SimSpec::det(cfg.clone(), 7), &r, &s).expect("first run");
    let b = run_sim(&SimSpec::det(cfg.clone(), 7), &r, &s).expect("second run");
    let ja = shardjoin_core::trace::to_jsonl(&a.trace);
    let jb = shardjoin_core::trace::to_jsonl(&b.trace);
    assert_eq!(ja, jb, "same seed must replay the identical schedule");
}

#[test]
fn det_mode_hash_distributed_trace_is_clean() {
    let mut cfg = small_cfg(3, 50, 90);
    cfg.join_mode = JoinMode::HashDistributed;
    let (r, s) = gen_parts(&cfg, 13);
    let out = run_sim(&SimSpec::det(cfg.clone(), 1), &r, &s).expect("det sim runs");
    check_against_reference(&cfg, &out, &r, &s);
    let violations = check_trace(&out.trace, &cfg);
    assert!(violations.is_empty(), "trace violations: {violations:#?}");
}

#[test]
fn shuffle_volume_is_replication_exact() {
    // Every node ships its whole build side to each of the other n-1 peers.
    let cfg = small_cfg(3, 100, 200);
    let (r, s) = gen_parts(&cfg, 31);
    let out = run_sim(&SimSpec::free(cfg.clone()), &r, &s).expect("sim runs");
    for (i, rep) in out.reports.iter().enumerate() {
        let r_bytes = r[i].tuples.byte_len() as u64;
        assert_eq!(
            rep.payload_bytes_sent,
            r_bytes * u64::from(cfg.num_nodes() - 1),
            "node {i} shuffle payload"
        );
    }
}

#[test]
fn watchdog_reports_deadlock_for_stuck_cluster() {
    // A pool smaller than one bucket cannot ever admit it; the node aborts
    // with a protocol error rather than deadlocking.
    let mut cfg = small_cfg(2, 200, 50);
    cfg.pool_capacity = 8;
    let (r, s) = gen_parts(&cfg, 17);
    let mut spec = SimSpec::free(cfg);
    spec.mode = SimMode::Free { watchdog: Duration::from_secs(20) };
    let err = match run_sim(&spec, &r, &s) {
        Ok(_) => panic!("tiny pool must fail"),
        Err(e) => e,
    };
    let msg = err.to_string();
    assert!(
        msg.contains("never fit") || msg.contains("watchdog") || msg.contains("abort"),
        "unexpected error: {msg}"
    );
}

#[test]
fn bounded_pool_backpressure_completes() {
    // Pool sized for roughly two build buckets, probes slowed down: admission
    // has to wait for frees, yet the run must still finish and the waiting
    // must show up on the clock.
    let mut cfg = small_cfg(2, 600, 200);
    cfg.num_buckets = 8;
    let (r, s) = gen_parts(&cfg, 37);
    let max_bucket = r
        .iter()
        .map(|p| {
            let t = shardjoin_core::model::tuple::build_hash_table(p, cfg.num_buckets);
            t.buckets.iter().map(|b| b.byte_len()).max().unwrap_or(0)
        })
        .max()
        .expect("two build partitions");
    assert!(max_bucket > 0, "generator produced empty buckets only");
    cfg.pool_capacity = 2 * max_bucket;
    let mut spec = SimSpec::free(cfg.clone());
    spec.delays.join_delay = Duration::from_millis(3);
    let out = run_sim(&spec, &r, &s).expect("bounded pool run finishes");
    check_against_reference(&cfg, &out, &r, &s);
    let blocked: u64 = out.reports.iter().map(|rep| rep.pool_block_ns).sum();
    assert!(blocked > 0, "a pool this small must make someone wait");
}

#[test]
fn uneven_partition_sizes_match() {
    let mut cfg = small_cfg(2, 100, 150);
    cfg.partition_size_s = 37;
    let spec_r = GenSpec {
        seed: 41,
        tuples_per_partition: cfg.partition_size_r,
        domain: cfg.domain,
        tuple_size: cfg.tuple_size,
        distribution: KeyDist::Uniform,
    };
    let spec_s = GenSpec { tuples_per_partition: cfg.partition_size_s, ..spec_r.clone() };
    let r: Vec<_> = (0..2).map(|i| generate_partition(&spec_r, TABLE_R, i)).collect();
    let s: Vec<_> = (0..2).map(|i| generate_partition(&spec_s, TABLE_S, i)).collect();
    let out = run_sim(&SimSpec::free(cfg.clone()), &r, &s).expect("sim runs");
    check_against_reference(&cfg, &out, &r, &s);
}

#[test]
fn less_than_join_matches() {
    let mut cfg = small_cfg(2, 60, 70);
    cfg.predicate = Predicate::LessThan;
    let (r, s) = gen_parts(&cfg, 29);
    let out = run_sim(&SimSpec::free(cfg.clone()), &r, &s).expect("sim runs");
    check_against_reference(&cfg, &out, &r, &s);
}

#[test]
fn empty_probe_side_yields_empty_result() {
    let cfg = small_cfg(2, 50, 60);
    let (r, _) = gen_parts(&cfg, 2);
    let s: Vec<Partition> = (0..2)
        .map(|i| Partition {
            table_id: TABLE_S,
            node_id: i,
            domain: cfg.domain,
            tuples: shardjoin_core::model::tuple::TupleBuf::new(cfg.tuple_size),
        })
        .collect();
    let out = run_sim(&SimSpec::free(cfg.clone()), &r, &s).expect("sim runs");
    assert_eq!(out.sink_entries, 0);
}
