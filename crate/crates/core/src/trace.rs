//! Execution tracing and the offline safety checker.
//!
//! When enabled, every scheduling-relevant action (queue push/pop, barrier,
//! bucket free, stream completion, flag transition) is recorded with the
//! node, thread, and a structured event string. `check_trace` replays a
//! recorded run against the queue-discipline, lifecycle, ordering, and
//! routing rules the engine is supposed to obey, returning one message per
//! violation.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;

use crate::config::{ClusterConfig, JoinMode};
use crate::error::{Error, Result};
use crate::sync::{Clock, DetSched, Monitor, SchedHandle};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub node: u32,
    pub thread: String,
    pub role: String,
    pub event: String,
    pub t_ns: u64,
}

// Event string builders, shared by the recorder's callers and the checker so
// the vocabulary cannot drift.

pub const Q_COMPUTE: &str = "Qc";
pub const Q_SEND: &str = "Qs";
pub const Q_RECV: &str = "Qr";

pub fn ev_push(queue: &str, kind: &str, detail: &str) -> String {
    if detail.is_empty() {
        format!("push:{queue}:{kind}")
    } else {
        format!("push:{queue}:{kind}:{detail}")
    }
}

pub fn ev_pop(queue: &str, kind: &str, detail: &str) -> String {
    if detail.is_empty() {
        format!("pop:{queue}:{kind}")
    } else {
        format!("pop:{queue}:{kind}:{detail}")
    }
}

pub fn detail_join(source: u32, table: u32, bucket: u32) -> String {
    format!("src{source}:t{table}:b{bucket}")
}

pub fn detail_dst(node: u32) -> String {
    format!("dst{node}")
}

pub fn ev_free(source: u32, table: u32, bucket: u32) -> String {
    format!("free:{}", detail_join(source, table, bucket))
}

pub fn ev_stream_done(kind: &str, source: u32) -> String {
    format!("stream:{kind}:done:src{source}")
}

pub const EV_SPAN_START: &str = "span:start";
pub const EV_SPAN_END: &str = "span:end";
pub const EV_BARRIER_ENTER: &str = "barrier:enter";
pub const EV_BARRIER_RELEASE: &str = "barrier:release";
pub const EV_SHUFFLE_DONE: &str = "flag:shuffle_done";
pub const EV_RESULTS_DONE: &str = "flag:results_done";

pub fn ev_print(entries: u64) -> String {
    format!("result:print:{entries}")
}

/// Cheap clone-everywhere handle. Disabled recorders are free.
#[derive(Clone)]
pub struct TraceRecorder {
    sink: Option<Arc<Monitor<Vec<TraceEvent>>>>,
    clock: Clock,
    det: Option<Arc<DetSched>>,
}

impl TraceRecorder {
    pub fn disabled(clock: Clock) -> Self {
        TraceRecorder { sink: None, clock, det: None }
    }

    pub fn enabled(clock: Clock, sched: SchedHandle) -> Self {
        TraceRecorder {
            sink: Some(Arc::new(Monitor::new("trace", Vec::new(), sched.clone()))),
            clock,
            det: sched,
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.sink.is_some()
    }

    pub fn rec(&self, node: u32, thread: &str, role: &str, event: String) {
        let Some(sink) = &self.sink else { return };
        // Deterministic runs tick virtual time per record so every event has
        // a distinct, strictly increasing stamp.
        if let Some(sched) = &self.det {
            sched.advance(1);
        }
        // The stamp is taken under the sink lock so recording order and
        // timestamp order agree even with concurrent recorders.
        sink.with(|v| {
            let t_ns = self.clock.now_ns();
            v.push(TraceEvent {
                node,
                thread: thread.to_string(),
                role: role.to_string(),
                event,
                t_ns,
            });
        });
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        match &self.sink {
            Some(sink) => sink.with(|v| v.clone()),
            None => Vec::new(),
        }
    }
}

pub fn to_jsonl(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("trace event serializes"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl(text: &str) -> Result<Vec<TraceEvent>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("bad trace line: {e}: {l}")))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Checker

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct QueueKey {
    node: u32,
    queue: String,
    kind: String,
    detail: String,
}

struct Parsed<'a> {
    idx: usize,
    ev: &'a TraceEvent,
    parts: Vec<&'a str>,
}

/// Replay a trace against the engine's rules. Returns one human-readable
/// message per violation; an empty vector means the run was clean.
pub fn check_trace(events: &[TraceEvent], config: &ClusterConfig) -> Vec<String> {
    let mut bad = Vec::new();
    let n = config.num_nodes() as u32;
    let parsed: Vec<Parsed> = events
        .iter()
        .enumerate()
        .map(|(idx, ev)| Parsed { idx, ev, parts: ev.event.split(':').collect() })
        .collect();

    // Timestamps never move backwards in recording order.
    for w in events.windows(2) {
        if w[1].t_ns < w[0].t_ns {
            bad.push(format!(
                "time moved backwards: {} ns after {} ns ({})",
                w[1].t_ns, w[0].t_ns, w[1].event
            ));
        }
    }

    // Queue discipline: a record is popped only after it was pushed, pushed
    // at most... (JOIN exactly once), and nothing is left behind except the
    // single self-sustaining EXIT on Qs and Qr.
    let mut pushes: HashMap<QueueKey, Vec<usize>> = HashMap::new();
    let mut pops: HashMap<QueueKey, Vec<usize>> = HashMap::new();
    let mut live: HashMap<QueueKey, i64> = HashMap::new();
    for p in &parsed {
        if p.parts.len() >= 3 && (p.parts[0] == "push" || p.parts[0] == "pop") {
            let key = QueueKey {
                node: p.ev.node,
                queue: p.parts[1].to_string(),
                kind: p.parts[2].to_string(),
                detail: p.parts[3..].join(":"),
            };
            if p.parts[0] == "push" {
                pushes.entry(key.clone()).or_default().push(p.idx);
                *live.entry(key).or_default() += 1;
            } else {
                pops.entry(key.clone()).or_default().push(p.idx);
                let c = live.entry(key.clone()).or_default();
                *c -= 1;
                if *c < 0 {
                    bad.push(format!(
                        "node {}: pop of {}:{}:{} without a prior push",
                        key.node, key.queue, key.kind, key.detail
                    ));
                }
            }
        }
    }
    for (key, count) in &live {
        let expect_residue = key.kind == "EXIT" && (key.queue == Q_SEND || key.queue == Q_RECV);
        let expected = if expect_residue { 1 } else { 0 };
        if *count != expected {
            bad.push(format!(
                "node {}: {}:{}:{} left {} records in the queue (expected {})",
                key.node, key.queue, key.kind, key.detail, count, expected
            ));
        }
    }

    // A join unit is scheduled exactly once.
    for (key, idxs) in &pushes {
        if key.kind == "JOIN" && idxs.len() != 1 {
            bad.push(format!(
                "node {}: join unit {} pushed {} times",
                key.node, key.detail, idxs.len()
            ));
        }
    }

    // Per-node orderings.
    for node in 0..n {
        let node_evs: Vec<&Parsed> = parsed.iter().filter(|p| p.ev.node == node).collect();
        let find_all = |what: &str| -> Vec<usize> {
            node_evs.iter().filter(|p| p.ev.event == what).map(|p| p.idx).collect()
        };
        let prefix_all = |what: &str| -> Vec<usize> {
            node_evs
                .iter()
                .filter(|p| p.ev.event.starts_with(what))
                .map(|p| p.idx)
                .collect()
        };

        // Barrier: every compute thread enters once, releases once, and all
        // entries precede all releases of the single generation.
        let enters = find_all(EV_BARRIER_ENTER);
        let releases = find_all(EV_BARRIER_RELEASE);
        if enters.len() != config.n_compute || releases.len() != config.n_compute {
            bad.push(format!(
                "node {node}: barrier saw {} entries / {} releases for {} compute threads",
                enters.len(),
                releases.len(),
                config.n_compute
            ));
        }
        if let (Some(&last_enter), Some(&first_release)) = (enters.last(), releases.first()) {
            if first_release < last_enter {
                bad.push(format!("node {node}: barrier released before all threads entered"));
            }
        }

        // All join pops precede the barrier.
        if let Some(&first_release) = releases.first() {
            for p in &node_evs {
                if p.parts.len() >= 3
                    && p.parts[0] == "pop"
                    && p.parts[1] == Q_COMPUTE
                    && p.parts[2] == "JOIN"
                    && p.idx > first_release
                {
                    bad.push(format!(
                        "node {node}: join {} ran after the barrier released",
                        p.parts[3..].join(":")
                    ));
                }
            }
        }

        // The join phase drains completely before any thread winds down: no
        // join may be taken after the first join-exit record was.
        let join_pops: Vec<usize> = node_evs
            .iter()
            .filter(|p| {
                p.parts.len() >= 3
                    && p.parts[0] == "pop"
                    && p.parts[1] == Q_COMPUTE
                    && p.parts[2] == "JOIN"
            })
            .map(|p| p.idx)
            .collect();
        let je_pops = find_all(&ev_pop(Q_COMPUTE, "JOIN_EXIT", ""));
        if let (Some(&last_join), Some(&first_je)) = (join_pops.last(), je_pops.first()) {
            if last_join > first_je {
                bad.push(format!(
                    "node {node}: join popped after the first join-exit was taken"
                ));
            }
        }

        // Final exit record: the sink's compute queue sees exactly one EXIT,
        // as its last record; other nodes never see one.
        let qc_exit_push = find_all(&ev_push(Q_COMPUTE, "EXIT", ""));
        let qc_exit_pop = find_all(&ev_pop(Q_COMPUTE, "EXIT", ""));
        if config.is_sink(node) {
            if qc_exit_push.is_empty() || qc_exit_pop.is_empty() {
                bad.push(format!("sink {node}: compute EXIT absent"));
            } else if qc_exit_push.len() != 1 || qc_exit_pop.len() != 1 {
                bad.push(format!(
                    "sink {node}: compute EXIT pushed {} times / popped {} times",
                    qc_exit_push.len(),
                    qc_exit_pop.len()
                ));
            } else {
                let last_qc_pop = node_evs
                    .iter()
                    .filter(|p| p.parts.len() >= 2 && p.parts[0] == "pop" && p.parts[1] == Q_COMPUTE)
                    .map(|p| p.idx)
                    .next_back();
                if last_qc_pop != Some(qc_exit_pop[0]) {
                    bad.push(format!(
                        "sink {node}: compute EXIT was not the final compute-queue record"
                    ));
                }
            }
        } else if !qc_exit_push.is_empty() || !qc_exit_pop.is_empty() {
            bad.push(format!("node {node}: non-sink saw a compute EXIT"));
        }

        // Result hand-off happens once, after the barrier.
        let rr_push = prefix_all(&format!("push:{Q_SEND}:RESULT_READY"));
        if rr_push.len() != 1 {
            bad.push(format!(
                "node {node}: {} result-ready hand-offs (expected 1)",
                rr_push.len()
            ));
        }
        if let (Some(&rr), Some(&rel)) = (rr_push.first(), releases.first()) {
            if rr < rel {
                bad.push(format!("node {node}: result-ready pushed before the barrier released"));
            }
        }

        // Exit choreography.
        let rr_pop = prefix_all(&format!("pop:{Q_SEND}:RESULT_READY"));
        let qs_exit_push = find_all(&ev_push(Q_SEND, "EXIT", ""));
        let qr_exit_push = find_all(&ev_push(Q_RECV, "EXIT", ""));
        if let (Some(&first_exit), Some(&rr)) = (qs_exit_push.first(), rr_pop.first()) {
            if first_exit < rr {
                bad.push(format!(
                    "node {node}: send queue exit issued before the result hand-off completed"
                ));
            }
        }
        let shuffle_done = find_all(EV_SHUFFLE_DONE);
        let results_done = find_all(EV_RESULTS_DONE);
        if config.is_sink(node) {
            if let Some(&qr_exit) = qr_exit_push.first() {
                let after_flags = shuffle_done.first().is_some_and(|&s| qr_exit > s)
                    && results_done.first().is_some_and(|&r| qr_exit > r);
                if n > 1 && !after_flags {
                    bad.push(format!(
                        "node {node}: sink receive-exit issued before both completion flags"
                    ));
                }
            }
        } else if let (Some(&qr_exit), Some(&rr)) = (qr_exit_push.first(), rr_pop.first()) {
            if qr_exit < rr {
                bad.push(format!(
                    "node {node}: receive-exit issued before the result hand-off completed"
                ));
            }
        }

        // Shuffle completion: one flag, raised only after every peer's
        // partition stream finished, then exactly one join-exit per compute
        // thread after it.
        let part_done = prefix_all("stream:partition:done");
        if part_done.len() != (n - 1) as usize {
            bad.push(format!(
                "node {node}: {} partition streams completed (expected {})",
                part_done.len(),
                n - 1
            ));
        }
        if shuffle_done.len() != 1 {
            bad.push(format!(
                "node {node}: shuffle-done flagged {} times",
                shuffle_done.len()
            ));
        }
        if let Some(&flag) = shuffle_done.first() {
            if part_done.iter().any(|&p| p > flag) {
                bad.push(format!(
                    "node {node}: a partition stream completed after shuffle-done was flagged"
                ));
            }
        }
        let je_push = find_all(&ev_push(Q_COMPUTE, "JOIN_EXIT", ""));
        if je_push.len() != config.n_compute {
            bad.push(format!(
                "node {node}: {} join-exit records for {} compute threads",
                je_push.len(),
                config.n_compute
            ));
        }
        if let Some(&flag) = shuffle_done.first() {
            if je_push.iter().any(|&j| j < flag) {
                bad.push(format!("node {node}: join-exit issued before the shuffle completed"));
            }
        }

        // Result collection is the sink's business only.
        let res_done = prefix_all("stream:result:done");
        if config.is_sink(node) {
            if res_done.len() != (n - 1) as usize {
                bad.push(format!(
                    "sink {node}: {} result streams completed (expected {})",
                    res_done.len(),
                    n - 1
                ));
            }
            if results_done.len() != 1 {
                bad.push(format!(
                    "sink {node}: results-done flagged {} times",
                    results_done.len()
                ));
            }
            if let Some(&flag) = results_done.first() {
                if res_done.iter().any(|&p| p > flag) {
                    bad.push(format!(
                        "sink {node}: a result stream completed after results-done was flagged"
                    ));
                }
            }
            let prints = prefix_all("result:print");
            if prints.len() != 1 {
                bad.push(format!("sink {node}: printed results {} times", prints.len()));
            } else if let Some(&flag) = results_done.first() {
                if prints[0] < flag {
                    bad.push(format!("sink {node}: printed results before collection finished"));
                }
            }
        } else {
            if !res_done.is_empty() {
                bad.push(format!("node {node}: non-sink completed a result stream"));
            }
            if !results_done.is_empty() {
                bad.push(format!("node {node}: non-sink flagged results-done"));
            }
        }
    }

    // Bucket lifecycle: joined exactly once before being freed exactly once,
    // never touched after the free.
    let mut free_at: HashMap<(u32, String), Vec<usize>> = HashMap::new();
    let mut join_pop_at: HashMap<(u32, String), Vec<usize>> = HashMap::new();
    for p in &parsed {
        if p.parts[0] == "free" {
            free_at
                .entry((p.ev.node, p.parts[1..].join(":")))
                .or_default()
                .push(p.idx);
        }
        if p.parts.len() >= 4 && p.parts[0] == "pop" && p.parts[1] == Q_COMPUTE && p.parts[2] == "JOIN"
        {
            join_pop_at
                .entry((p.ev.node, p.parts[3..].join(":")))
                .or_default()
                .push(p.idx);
        }
    }
    for ((node, detail), frees) in &free_at {
        if frees.len() != 1 {
            bad.push(format!("node {node}: bucket {detail} freed {} times", frees.len()));
        }
        match join_pop_at.get(&(*node, detail.clone())) {
            Some(joins) => {
                if joins.iter().any(|&j| j > frees[0]) {
                    bad.push(format!("node {node}: bucket {detail} joined after it was freed"));
                }
            }
            None => bad.push(format!("node {node}: bucket {detail} freed without a join", )),
        }
    }
    for ((node, detail), joins) in &join_pop_at {
        if !free_at.contains_key(&(*node, detail.clone())) {
            bad.push(format!("node {node}: bucket {detail} joined but never freed"));
        }
        if joins.len() != 1 {
            bad.push(format!("node {node}: bucket {detail} joined {} times", joins.len()));
        }
    }

    // Routing: re-partitioned buckets may only be joined at their owner;
    // replicated runs only ever schedule build-side units.
    for (key, _) in pushes.iter().filter(|(k, _)| k.kind == "JOIN") {
        let mut src = None;
        let mut table = None;
        let mut bucket = None;
        for part in key.detail.split(':') {
            if let Some(v) = part.strip_prefix("src") {
                src = v.parse::<u32>().ok();
            } else if let Some(v) = part.strip_prefix('t') {
                table = v.parse::<u32>().ok();
            } else if let Some(v) = part.strip_prefix('b') {
                bucket = v.parse::<u32>().ok();
            }
        }
        let (Some(_src), Some(table), Some(bucket)) = (src, table, bucket) else {
            bad.push(format!("unparseable join detail {}", key.detail));
            continue;
        };
        match config.join_mode {
            JoinMode::HashDistributed => {
                let owner = crate::config::bucket_owner(bucket, n);
                if owner != key.node {
                    bad.push(format!(
                        "node {}: joined bucket {bucket} owned by node {owner}",
                        key.node
                    ));
                }
            }
            JoinMode::Broadcast => {
                if table != crate::config::TABLE_R {
                    bad.push(format!(
                        "node {}: replicated run scheduled a probe-side unit {}",
                        key.node, key.detail
                    ));
                }
            }
        }
    }

    bad.sort();
    bad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ClusterConfig, TABLE_R};

    fn ev(node: u32, event: &str) -> TraceEvent {
        TraceEvent {
            node,
            thread: "t".into(),
            role: "r".into(),
            event: event.to_string(),
            t_ns: 0,
        }
    }

    /// Hand-built minimal clean run: two nodes, one thread per role,
    /// replicated build side, one bucket each way, sink 0.
    fn clean_two_node_trace() -> (Vec<TraceEvent>, ClusterConfig) {
        let mut cfg = ClusterConfig::localhost(2, 9000);
        cfg.n_compute = 1;
        cfg.n_send = 1;
        cfg.n_recv = 1;
        cfg.join_mode = JoinMode::Broadcast;
        let d_local0 = detail_join(0, TABLE_R, 3);
        let d_remote0 = detail_join(1, TABLE_R, 4); // arrives at node 0 from 1
        let d_local1 = detail_join(1, TABLE_R, 4);
        let d_remote1 = detail_join(0, TABLE_R, 3);
        let mut t = Vec::new();
        let mut push = |node: u32, s: String| t.push(ev(node, &s));
        for node in [0u32, 1] {
            push(node, EV_SPAN_START.into());
        }
        // Node 0 timeline.
        push(0, ev_push(Q_SEND, "PARTITION_READY", &detail_dst(1)));
        push(0, ev_pop(Q_SEND, "PARTITION_READY", &detail_dst(1)));
        push(0, ev_push(Q_COMPUTE, "JOIN", &d_local0));
        push(0, ev_pop(Q_COMPUTE, "JOIN", &d_local0));
        push(0, ev_free(0, TABLE_R, 3));
        push(0, ev_push(Q_COMPUTE, "JOIN", &d_remote0));
        push(0, ev_pop(Q_COMPUTE, "JOIN", &d_remote0));
        push(0, ev_free(1, TABLE_R, 4));
        push(0, ev_stream_done("partition", 1));
        push(0, EV_SHUFFLE_DONE.into());
        push(0, ev_push(Q_COMPUTE, "JOIN_EXIT", ""));
        push(0, ev_pop(Q_COMPUTE, "JOIN_EXIT", ""));
        push(0, EV_BARRIER_ENTER.into());
        push(0, EV_BARRIER_RELEASE.into());
        push(0, ev_push(Q_SEND, "RESULT_READY", &detail_dst(0)));
        push(0, ev_pop(Q_SEND, "RESULT_READY", &detail_dst(0)));
        push(0, ev_push(Q_SEND, "EXIT", ""));
        push(0, ev_pop(Q_SEND, "EXIT", ""));
        push(0, ev_push(Q_SEND, "EXIT", ""));
        push(0, ev_stream_done("result", 1));
        push(0, EV_RESULTS_DONE.into());
        push(0, ev_push(Q_RECV, "EXIT", ""));
        push(0, ev_pop(Q_RECV, "EXIT", ""));
        push(0, ev_push(Q_RECV, "EXIT", ""));
        push(0, ev_push(Q_COMPUTE, "EXIT", ""));
        push(0, ev_pop(Q_COMPUTE, "EXIT", ""));
        push(0, ev_print(2));
        push(0, EV_SPAN_END.into());
        // Node 1 timeline.
        push(1, ev_push(Q_SEND, "PARTITION_READY", &detail_dst(0)));
        push(1, ev_pop(Q_SEND, "PARTITION_READY", &detail_dst(0)));
        push(1, ev_push(Q_COMPUTE, "JOIN", &d_local1));
        push(1, ev_pop(Q_COMPUTE, "JOIN", &d_local1));
        push(1, ev_free(1, TABLE_R, 4));
        push(1, ev_push(Q_COMPUTE, "JOIN", &d_remote1));
        push(1, ev_pop(Q_COMPUTE, "JOIN", &d_remote1));
        push(1, ev_free(0, TABLE_R, 3));
        push(1, ev_stream_done("partition", 0));
        push(1, EV_SHUFFLE_DONE.into());
        push(1, ev_push(Q_COMPUTE, "JOIN_EXIT", ""));
        push(1, ev_pop(Q_COMPUTE, "JOIN_EXIT", ""));
        push(1, EV_BARRIER_ENTER.into());
        push(1, EV_BARRIER_RELEASE.into());
        push(1, ev_push(Q_SEND, "RESULT_READY", &detail_dst(0)));
        push(1, ev_pop(Q_SEND, "RESULT_READY", &detail_dst(0)));
        push(1, ev_push(Q_SEND, "EXIT", ""));
        push(1, ev_push(Q_RECV, "EXIT", ""));
        push(1, ev_pop(Q_SEND, "EXIT", ""));
        push(1, ev_push(Q_SEND, "EXIT", ""));
        push(1, ev_pop(Q_RECV, "EXIT", ""));
        push(1, ev_push(Q_RECV, "EXIT", ""));
        push(1, EV_SPAN_END.into());
        (t, cfg)
    }

    #[test]
    fn clean_trace_passes() {
        let (t, cfg) = clean_two_node_trace();
        let v = check_trace(&t, &cfg);
        assert!(v.is_empty(), "unexpected violations: {v:#?}");
    }

    #[test]
    fn pop_without_push_flagged() {
        let (mut t, cfg) = clean_two_node_trace();
        let i = t
            .iter()
            .position(|e| e.node == 0 && e.event.starts_with("push:Qc:JOIN:src1"))
            .unwrap();
        t.remove(i);
        let v = check_trace(&t, &cfg);
        assert!(v.iter().any(|m| m.contains("without a prior push")), "{v:#?}");
    }

    #[test]
    fn duplicate_join_flagged() {
        let (mut t, cfg) = clean_two_node_trace();
        let i = t
            .iter()
            .position(|e| e.node == 0 && e.event.starts_with("push:Qc:JOIN:src0"))
            .unwrap();
        let dup = t[i].clone();
        t.insert(i, dup);
        let v = check_trace(&t, &cfg);
        assert!(v.iter().any(|m| m.contains("pushed 2 times")), "{v:#?}");
    }

    #[test]
    fn join_after_barrier_flagged() {
        let (mut t, cfg) = clean_two_node_trace();
        let pop_i = t
            .iter()
            .position(|e| e.node == 0 && e.event.starts_with("pop:Qc:JOIN:src1"))
            .unwrap();
        let pop = t.remove(pop_i);
        let rel_i = t
            .iter()
            .position(|e| e.node == 0 && e.event == EV_BARRIER_RELEASE)
            .unwrap();
        t.insert(rel_i + 1, pop);
        let v = check_trace(&t, &cfg);
        assert!(v.iter().any(|m| m.contains("after the barrier released")), "{v:#?}");
    }

    #[test]
    fn missing_free_flagged() {
        let (mut t, cfg) = clean_two_node_trace();
        let i = t
            .iter()
            .position(|e| e.node == 1 && e.event == ev_free(0, TABLE_R, 3))
            .unwrap();
        t.remove(i);
        let v = check_trace(&t, &cfg);
        assert!(v.iter().any(|m| m.contains("never freed")), "{v:#?}");
    }

    #[test]
    fn double_free_flagged() {
        let (mut t, cfg) = clean_two_node_trace();
        let i = t
            .iter()
            .position(|e| e.node == 1 && e.event == ev_free(0, TABLE_R, 3))
            .unwrap();
        let dup = t[i].clone();
        t.insert(i, dup);
        let v = check_trace(&t, &cfg);
        assert!(v.iter().any(|m| m.contains("freed 2 times")), "{v:#?}");
    }

    #[test]
    fn early_join_exit_flagged() {
        let (mut t, cfg) = clean_two_node_trace();
        let je_i = t
            .iter()
            .position(|e| e.node == 0 && e.event == ev_push(Q_COMPUTE, "JOIN_EXIT", ""))
            .unwrap();
        let je = t.remove(je_i);
        let flag_i = t
            .iter()
            .position(|e| e.node == 0 && e.event == EV_SHUFFLE_DONE)
            .unwrap();
        t.insert(flag_i, je);
        let v = check_trace(&t, &cfg);
        assert!(v.iter().any(|m| m.contains("before the shuffle completed")), "{v:#?}");
    }

    #[test]
    fn late_join_pop_flagged() {
        let (mut t, cfg) = clean_two_node_trace();
        // Slide one join pop (and its free, to keep the lifecycle clean) to
        // after the join-exit pop but before the barrier, so only the drain
        // rule fires.
        let pop_i = t
            .iter()
            .position(|e| e.node == 0 && e.event.starts_with("pop:Qc:JOIN:src1"))
            .unwrap();
        let pop = t.remove(pop_i);
        let free_i = t
            .iter()
            .position(|e| e.node == 0 && e.event == ev_free(1, TABLE_R, 4))
            .unwrap();
        let free = t.remove(free_i);
        let enter_i = t
            .iter()
            .position(|e| e.node == 0 && e.event == EV_BARRIER_ENTER)
            .unwrap();
        t.insert(enter_i, free);
        t.insert(enter_i, pop);
        let v = check_trace(&t, &cfg);
        assert!(
            v.iter().any(|m| m.contains("after the first join-exit")),
            "{v:#?}"
        );
    }

    #[test]
    fn missing_sink_compute_exit_flagged() {
        let (mut t, cfg) = clean_two_node_trace();
        t.retain(|e| {
            !(e.node == 0
                && (e.event == ev_push(Q_COMPUTE, "EXIT", "")
                    || e.event == ev_pop(Q_COMPUTE, "EXIT", "")))
        });
        let v = check_trace(&t, &cfg);
        assert!(v.iter().any(|m| m.contains("compute EXIT absent")), "{v:#?}");
    }

    #[test]
    fn non_sink_compute_exit_flagged() {
        let (mut t, cfg) = clean_two_node_trace();
        t.push(ev(1, &ev_push(Q_COMPUTE, "EXIT", "")));
        t.push(ev(1, &ev_pop(Q_COMPUTE, "EXIT", "")));
        let v = check_trace(&t, &cfg);
        assert!(v.iter().any(|m| m.contains("non-sink saw a compute EXIT")), "{v:#?}");
    }

    #[test]
    fn wrong_owner_flagged_for_repartitioned_run() {
        let mut cfg = ClusterConfig::localhost(2, 9000);
        cfg.n_compute = 1;
        cfg.join_mode = JoinMode::HashDistributed;
        // Bucket 5 belongs to node 1 but is joined on node 0; keep the rest
        // of the trace empty enough that only routing and structure fire.
        let t = vec![
            ev(0, &ev_push(Q_COMPUTE, "JOIN", &detail_join(0, TABLE_R, 5))),
            ev(0, &ev_pop(Q_COMPUTE, "JOIN", &detail_join(0, TABLE_R, 5))),
            ev(0, &ev_free(0, TABLE_R, 5)),
        ];
        let v = check_trace(&t, &cfg);
        assert!(v.iter().any(|m| m.contains("owned by node 1")), "{v:#?}");
    }

    #[test]
    fn leftover_join_flagged() {
        let (mut t, cfg) = clean_two_node_trace();
        let i = t
            .iter()
            .position(|e| e.node == 0 && e.event.starts_with("pop:Qc:JOIN:src1"))
            .unwrap();
        t.remove(i);
        let v = check_trace(&t, &cfg);
        assert!(
            v.iter().any(|m| m.contains("left 1 records in the queue")),
            "{v:#?}"
        );
    }

    #[test]
    fn time_regression_flagged() {
        let (mut t, cfg) = clean_two_node_trace();
        for (i, e) in t.iter_mut().enumerate() {
            e.t_ns = i as u64 + 1;
        }
        t.last_mut().unwrap().t_ns = 0;
        let v = check_trace(&t, &cfg);
        assert!(v.iter().any(|m| m.contains("time moved backwards")), "{v:#?}");
    }

    #[test]
    fn jsonl_roundtrip() {
        let (t, _) = clean_two_node_trace();
        let text = to_jsonl(&t);
        let back = from_jsonl(&text).unwrap();
        assert_eq!(t, back);
        assert!(from_jsonl("{not json}").is_err());
    }
}
