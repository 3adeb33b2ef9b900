//! The pipelined join engine: one node's threads, queues, and protocol.
//!
//! A node runs one listener, `n_recv` receive handlers, `n_send` send
//! handlers, and `n_compute` join workers, all stitched together by three
//! bounded queues. The run starts by scheduling one outbound transfer per
//! peer and every locally held join unit; from there the node is driven
//! entirely by records: inbound buckets become join units as they arrive,
//! the last peer stream triggers the join-exit fan-out, the compute threads
//! rendezvous at a local barrier, and the exit records chase each other
//! through the queues until every thread has wound down. No cluster-wide
//! barrier exists anywhere on this path.

mod comm;
mod compute;
mod state;

pub use state::{NodeShared, PairState};

use std::sync::Arc;
use std::time::Duration;

use crate::config::{ClusterConfig, JoinMode, TABLE_R, TABLE_S};
use crate::error::{Error, Result};
use crate::event::{BoundedQueue, ComputeEvent, JoinUnit, RecvEvent, SendEvent, SendTarget};
use crate::metrics::LoadReport;
use crate::model::htf::Htf;
use crate::model::result::{EntryCodec, ResultBlock, ResultList};
use crate::model::tuple::{build_hash_table, HashTable, Partition, TupleBuf};
use crate::sync::{spawn_registered, Clock, LocalBarrier, MemoryPool, Monitor, SchedHandle};
use crate::trace::{self, TraceRecorder};
use crate::transport::{Listener, Transport};
use state::DecidedActions;

/// Artificial stalls for stress tests: each sleeps on the named path.
#[derive(Debug, Clone, Default)]
pub struct InjectedDelays {
    /// Before each outbound partition transfer.
    pub send_task_delay: Duration,
    /// Inside each join unit.
    pub join_delay: Duration,
    /// Before materializing each received bucket.
    pub bucket_materialize_delay: Duration,
    /// Phase-synchronized engine: before each rendezvous entry.
    pub baseline_phase_delay: Duration,
    /// When set, the delays fire only at this node, making one straggler.
    pub only_node: Option<u32>,
}

impl InjectedDelays {
    pub fn applies(&self, node_id: u32) -> bool {
        self.only_node.map_or(true, |n| n == node_id)
    }
}

pub struct NodeCtx {
    pub cfg: ClusterConfig,
    pub node_id: u32,
    pub q_compute: BoundedQueue<ComputeEvent>,
    pub q_send: BoundedQueue<SendEvent>,
    pub q_recv: BoundedQueue<RecvEvent>,
    pub shared: Monitor<NodeShared>,
    pub pool: MemoryPool,
    pub barrier: LocalBarrier,
    pub results: ResultList,
    pub r_table: HashTable,
    pub s_table: HashTable,
    pub transport: Arc<dyn Transport>,
    pub listener: Arc<Box<dyn Listener>>,
    pub clock: Clock,
    pub trace: TraceRecorder,
    pub sched: SchedHandle,
    pub delays: InjectedDelays,
    pub report: Monitor<LoadReport>,
}

impl NodeCtx {
    pub fn is_sink(&self) -> bool {
        self.cfg.is_sink(self.node_id)
    }

    pub fn num_nodes(&self) -> u32 {
        self.cfg.num_nodes()
    }

    pub fn codec(&self) -> EntryCodec {
        EntryCodec::new(self.cfg.result_format, self.cfg.tuple_size)
    }

    /// Peers in ring order starting after this node.
    pub fn ring_peers(&self) -> Vec<u32> {
        let n = self.num_nodes();
        (1..n).map(|d| (self.node_id + d) % n).collect()
    }

    pub fn target(&self, node_id: u32) -> SendTarget {
        let addr = self.cfg.addr(node_id);
        SendTarget {
            node_id,
            ip: addr.ip.clone(),
            sport: addr.sport,
            is_sink: self.cfg.is_sink(node_id),
        }
    }

    /// Fragment for (source, table), created on first touch. Fragments from
    /// peers draw on the shuffle memory pool; locally built ones do not.
    pub fn htf(&self, source: u32, table: u32) -> Arc<Htf> {
        let pooled = source != self.node_id;
        let num_buckets = self.cfg.num_buckets;
        self.shared.with(|s| {
            Arc::clone(
                s.htfs
                    .entry((source, table))
                    .or_insert_with(|| Arc::new(Htf::new(source, table, num_buckets, pooled))),
            )
        })
    }

    /// Record an arrived unit and push its join work. In re-partitioned mode
    /// the pairing snapshot is taken and the unit registered atomically.
    pub fn admit_unit(
        &self,
        thread: &str,
        role: &str,
        source: u32,
        table: u32,
        bucket: u32,
        data: Arc<TupleBuf>,
        htf: &Arc<Htf>,
    ) -> Result<()> {
        htf.materialize(bucket, Arc::clone(&data))?;
        let pair_snapshot = match self.cfg.join_mode {
            JoinMode::Broadcast => Vec::new(),
            JoinMode::HashDistributed => self.shared.with(|s| {
                let pair = s.pair.entry(bucket).or_default();
                let (own, opposite) = if table == TABLE_R {
                    (&mut pair.r, &pair.s)
                } else {
                    (&mut pair.s, &pair.r)
                };
                let snapshot = opposite.clone();
                own.push((source, Arc::clone(&data)));
                snapshot
            }),
        };
        let detail = trace::detail_join(source, table, bucket);
        self.trace
            .rec(self.node_id, thread, role, trace::ev_push(trace::Q_COMPUTE, "JOIN", &detail));
        self.q_compute.push(ComputeEvent::Join(JoinUnit {
            source,
            table,
            bucket,
            htf: Arc::clone(htf),
            pair_snapshot,
        }))
    }

    /// One inbound partition connection fully processed.
    pub fn partition_stream_complete(&self, thread: &str, role: &str, source: u32) -> Result<()> {
        self.trace
            .rec(self.node_id, thread, role, trace::ev_stream_done("partition", source));
        let expected = self.num_nodes() - 1;
        let actions = self.shared.with(|s| {
            s.partition_streams_done += 1;
            if s.partition_streams_done > expected {
                s.abort.get_or_insert_with(|| {
                    format!("{} partition streams for {} peers", s.partition_streams_done, expected)
                });
            }
            self.completion_edges(s)
        });
        self.perform(thread, role, actions)
    }

    /// One inbound result stream fully processed (sink only).
    pub fn result_stream_complete(&self, thread: &str, role: &str, source: u32) -> Result<()> {
        self.trace.rec(self.node_id, thread, role, trace::ev_stream_done("result", source));
        let now = self.clock.now_ns();
        let actions = self.shared.with(|s| {
            s.result_streams_done += 1;
            s.last_result_ns = Some(now);
            self.completion_edges(s)
        });
        self.perform(thread, role, actions)
    }

    /// Flag edges for a node whose counters just moved. Decided under the
    /// state lock; never pushes.
    fn completion_edges(&self, s: &mut NodeShared) -> DecidedActions {
        let mut act = DecidedActions::default();
        let peers = self.num_nodes() - 1;
        if !s.shuffle_done && s.local_admitted && s.partition_streams_done == peers {
            s.shuffle_done = true;
            if !s.fanout_issued {
                s.fanout_issued = true;
                act.fanout_join_exits = self.cfg.n_compute;
            }
        }
        if self.is_sink() && !s.results_done && s.result_streams_done == peers {
            s.results_done = true;
        }
        let exit_ready = if self.is_sink() {
            s.shuffle_done && s.results_done
        } else {
            // Non-sink nodes issue their receive exit from the send handler
            // after the result hand-off, not from stream completions.
            false
        };
        if exit_ready && !s.qr_exit_issued {
            s.qr_exit_issued = true;
            act.push_qr_exit = true;
        }
        act
    }

    fn perform(&self, thread: &str, role: &str, actions: DecidedActions) -> Result<()> {
        if actions.fanout_join_exits > 0 {
            self.trace.rec(self.node_id, thread, role, trace::EV_SHUFFLE_DONE.into());
        }
        for _ in 0..actions.fanout_join_exits {
            self.trace
                .rec(self.node_id, thread, role, trace::ev_push(trace::Q_COMPUTE, "JOIN_EXIT", ""));
            self.q_compute.push(ComputeEvent::JoinExit)?;
        }
        if actions.push_qr_exit {
            if self.is_sink() {
                self.trace.rec(self.node_id, thread, role, trace::EV_RESULTS_DONE.into());
            }
            self.trace
                .rec(self.node_id, thread, role, trace::ev_push(trace::Q_RECV, "EXIT", ""));
            self.q_recv.push(RecvEvent::Exit)?;
        }
        Ok(())
    }

    /// First error wins; everything blocking is torn down so sibling threads
    /// unwind instead of hanging.
    pub fn trigger_abort(&self, why: &Error) {
        let first = self.shared.with(|s| {
            if s.abort.is_none() {
                s.abort = Some(why.to_string());
                true
            } else {
                false
            }
        });
        if first {
            log::error!("node {}: aborting: {why}", self.node_id);
        }
        self.q_compute.poison();
        self.q_send.poison();
        self.q_recv.poison();
        self.pool.poison();
        self.barrier.poison();
        self.listener.shutdown();
    }

    pub fn add_busy(&self, role: &str, busy_ns: u64) {
        self.report.with(|r| match role {
            "compute" => r.compute_time_ns += busy_ns,
            "send" => r.send_time_ns += busy_ns,
            "recv" => r.recv_time_ns += busy_ns,
            _ => {}
        });
    }
}

pub struct NodeOutcome {
    pub report: LoadReport,
    /// Sink only: wall span until join completion was known cluster-wide.
    pub cluster_span_ns: Option<u64>,
    /// Sink only: the collected result.
    pub sink_entries: Option<u64>,
    pub sink_blocks: Option<Vec<ResultBlock>>,
}

/// External kill switch: a watchdog registers running nodes and can tear all
/// of them down, unwinding every blocked thread.
#[derive(Clone, Default)]
pub struct StopHandle {
    nodes: Arc<std::sync::Mutex<Vec<std::sync::Weak<NodeCtx>>>>,
}

impl StopHandle {
    pub fn new() -> Self {
        Self::default()
    }

    fn register(&self, ctx: &Arc<NodeCtx>) {
        self.nodes.lock().unwrap().push(Arc::downgrade(ctx));
    }

    pub fn stop(&self, why: &str) {
        let nodes = self.nodes.lock().unwrap().clone();
        for weak in nodes {
            if let Some(ctx) = weak.upgrade() {
                ctx.trigger_abort(&Error::Deadlock(why.to_string()));
            }
        }
    }
}

/// Run one node to completion: build, shuffle, join, hand off results,
/// terminate. Returns once every thread has exited cleanly.
#[allow(clippy::too_many_arguments)]
pub fn run_node(
    cfg: &ClusterConfig,
    node_id: u32,
    r_part: &Partition,
    s_part: &Partition,
    transport: Arc<dyn Transport>,
    clock: Clock,
    trace_rec: TraceRecorder,
    sched: SchedHandle,
    delays: InjectedDelays,
    stop: Option<&StopHandle>,
) -> Result<NodeOutcome> {
    cfg.validate()?;
    if node_id >= cfg.num_nodes() {
        return Err(Error::Config(format!("node {node_id} not in cluster")));
    }
    let addr = cfg.addr(node_id).clone();
    let r_table = build_hash_table(r_part, cfg.num_buckets);
    let s_table = build_hash_table(s_part, cfg.num_buckets);
    let listener = transport.listen(&addr.ip, addr.sport)?;

    let lbl = |q: &str| format!("n{node_id}:{q}");
    let ctx = Arc::new(NodeCtx {
        cfg: cfg.clone(),
        node_id,
        q_compute: BoundedQueue::new(&lbl("Qc"), cfg.queue_capacity, sched.clone()),
        q_send: BoundedQueue::new(&lbl("Qs"), cfg.queue_capacity, sched.clone()),
        q_recv: BoundedQueue::new(&lbl("Qr"), cfg.queue_capacity, sched.clone()),
        shared: Monitor::new(&lbl("state"), NodeShared::new(), sched.clone()),
        pool: MemoryPool::new(&lbl("pool"), cfg.pool_capacity, sched.clone(), clock.clone()),
        barrier: LocalBarrier::new(&lbl("barrier"), cfg.n_compute, sched.clone()),
        results: ResultList::new(&lbl("results"), sched.clone()),
        r_table,
        s_table,
        transport,
        listener: Arc::new(listener),
        clock,
        trace: trace_rec,
        sched: sched.clone(),
        delays,
        report: Monitor::new(
            &lbl("report"),
            LoadReport { node_id, ..LoadReport::default() },
            sched.clone(),
        ),
    });
    if let Some(stop) = stop {
        stop.register(&ctx);
    }

    // Count of spawned threads still running their bodies. Each decrements
    // as its final synchronized action, so the spawner can wait for them on
    // a blocking primitive the deterministic scheduler understands instead
    // of an opaque thread join.
    let total_threads = 1 + cfg.n_recv + cfg.n_send + cfg.n_compute;
    let live = Arc::new(Monitor::new(&lbl("live"), total_threads, sched.clone()));
    let mut handles = Vec::new();
    let mut spawn_handler = |name: String, body: Box<dyn FnOnce(&Arc<NodeCtx>) -> Result<()> + Send>| {
        let ctx = Arc::clone(&ctx);
        let live = Arc::clone(&live);
        handles.push(spawn_registered(&sched, name, move || {
            let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| body(&ctx)));
            match res {
                Ok(Ok(())) => {}
                Ok(Err(e)) => ctx.trigger_abort(&e),
                Err(p) => {
                    ctx.trigger_abort(&Error::Protocol(format!("thread panicked: {}", panic_text(&p))));
                }
            }
            live.with_notify(|n| *n -= 1);
        }));
    };

    spawn_handler(format!("n{node_id}:listener"), Box::new(|ctx| comm::listener_loop(ctx)));
    for i in 0..cfg.n_recv {
        spawn_handler(format!("n{node_id}:recv-{i}"), Box::new(move |ctx| comm::recv_loop(ctx, i)));
    }
    for i in 0..cfg.n_send {
        spawn_handler(format!("n{node_id}:send-{i}"), Box::new(move |ctx| comm::send_loop(ctx, i)));
    }
    for i in 0..cfg.n_compute {
        spawn_handler(
            format!("n{node_id}:compute-{i}"),
            Box::new(move |ctx| compute::compute_loop(ctx, i)),
        );
    }

    let main_res = main_thread(&ctx);
    if let Err(e) = &main_res {
        ctx.trigger_abort(e);
    }

    // Handler threads exit via the record protocol (or the abort tear-down);
    // the listener needs its shutdown poke once they are done.
    let mut epilogue_err = None;
    if let Err(e) = live.wait_until(|n| (*n <= 1).then_some(())) {
        ctx.trigger_abort(&e);
        epilogue_err = Some(e);
    }
    ctx.listener.shutdown();
    if epilogue_err.is_none() {
        if let Err(e) = live.wait_until(|n| (*n == 0).then_some(())) {
            ctx.trigger_abort(&e);
            epilogue_err = Some(e);
        }
    }
    for h in handles {
        drop(h.join());
    }
    main_res?;
    if let Some(e) = epilogue_err {
        return Err(e);
    }
    if let Some(why) = ctx.shared.with(|s| s.abort.clone()) {
        return Err(Error::Aborted(why));
    }

    // Assemble the outcome.
    let (span_start, barrier_release, last_result) = ctx
        .shared
        .with(|s| (s.span_start_ns, s.barrier_release_ns, s.last_result_ns));
    let span_start = span_start.ok_or_else(|| Error::Protocol("span start never recorded".into()))?;
    let barrier_release =
        barrier_release.ok_or_else(|| Error::Protocol("join never completed".into()))?;
    let mut report = ctx.report.with(|r| r.clone());
    report.join_span_ns = barrier_release.saturating_sub(span_start);
    report.bytes_sent = report.payload_bytes_sent + report.framing_bytes_sent;
    report.bytes_received = report.payload_bytes_received + report.framing_bytes_received;

    let sink = ctx.is_sink();
    let cluster_span_ns = sink.then(|| {
        let known = last_result.unwrap_or(barrier_release).max(barrier_release);
        known.saturating_sub(span_start)
    });
    let sink_entries = sink.then(|| ctx.results.entry_count());
    let sink_blocks = sink.then(|| ctx.results.clone_blocks());
    ctx.trace.rec(node_id, "main", "main", trace::EV_SPAN_END.into());
    Ok(NodeOutcome { report, cluster_span_ns, sink_entries, sink_blocks })
}

fn panic_text(p: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".into()
    }
}

/// Startup work on the caller's thread: record the span start, schedule one
/// outbound transfer per ring peer, admit every locally held join unit, and
/// fire the degenerate completion edges for a single-node cluster.
fn main_thread(ctx: &Arc<NodeCtx>) -> Result<()> {
    let node = ctx.node_id;
    let start = ctx.clock.now_ns();
    ctx.shared.with(|s| s.span_start_ns = Some(start));
    ctx.trace.rec(node, "main", "main", trace::EV_SPAN_START.into());

    for peer in ctx.ring_peers() {
        ctx.trace.rec(
            node,
            "main",
            "main",
            trace::ev_push(trace::Q_SEND, "PARTITION_READY", &trace::detail_dst(peer)),
        );
        ctx.q_send.push(SendEvent::PartitionReady(ctx.target(peer)))?;
    }

    admit_local_units(ctx)?;

    // Peer streams may already be complete (all of them, on a single-node
    // cluster), so raising the local-admission gate can itself be the edge
    // that finishes the shuffle.
    let actions = ctx.shared.with(|s| {
        s.local_admitted = true;
        ctx.completion_edges(s)
    });
    ctx.perform("main", "main", actions)?;
    Ok(())
}

fn admit_local_units(ctx: &Arc<NodeCtx>) -> Result<()> {
    let node = ctx.node_id;
    match ctx.cfg.join_mode {
        JoinMode::Broadcast => {
            // The local build-side partition joins as one fragment.
            let htf = ctx.htf(node, TABLE_R);
            let mut admitted = 0u32;
            for (b, bucket) in ctx.r_table.buckets.iter().enumerate() {
                if bucket.len() == 0 {
                    continue;
                }
                let data = Arc::new(bucket.clone());
                ctx.admit_unit("main", "main", node, TABLE_R, b as u32, data, &htf)?;
                admitted += 1;
            }
            htf.set_expected(admitted)?;
        }
        JoinMode::HashDistributed => {
            // Both local tables contribute the buckets this node owns.
            let owned =
                crate::config::assign_buckets(node, ctx.num_nodes(), ctx.cfg.num_buckets);
            for (table, tbl) in [(TABLE_R, &ctx.r_table), (TABLE_S, &ctx.s_table)] {
                let htf = ctx.htf(node, table);
                let mut admitted = 0u32;
                for &b in &owned {
                    let bucket = &tbl.buckets[b as usize];
                    if bucket.len() == 0 {
                        continue;
                    }
                    let data = Arc::new(bucket.clone());
                    ctx.admit_unit("main", "main", node, table, b, data, &htf)?;
                    admitted += 1;
                }
                htf.set_expected(admitted)?;
            }
        }
    }
    Ok(())
}
