//! The phase-synchronized ring engine the pipelined engine is measured
//! against. Every node joins its own partitions first, then works through
//! n-1 communication phases: phase k ships the node's whole build partition
//! to the peer k steps clockwise around the ring, takes delivery from the
//! peer k steps counter-clockwise, joins what arrived, and then the entire
//! cluster rendezvouses before the next phase begins. That rendezvous is the
//! point of comparison; the wire format, hash layout, and transports are all
//! shared with the pipelined engine so span differences are attributable to
//! the synchronization structure alone.
//!
//! The rendezvous itself is a count-up/release service hosted by node 0: one
//! persistent connection per node, a generation number written on entry, the
//! same number echoed back once all participants have arrived.

use std::io::{self, Read, Write};
use std::sync::{Arc, Mutex, Weak};
use std::thread;

use crate::config::{ClusterConfig, JoinMode, Predicate, ResultFormat, RetryPolicy, TABLE_R};
use crate::error::{Error, Result};
use crate::metrics::LoadReport;
use crate::model::result::{EntryCodec, LocalBuffer, ResultList};
use crate::model::tuple::{build_hash_table, HashTable, Partition, TupleBuf};
use crate::runtime::{InjectedDelays, NodeOutcome};
use crate::sync::Clock;
use crate::trace::{self, TraceRecorder};
use crate::transport::{connect_with_retry, Conn, Listener, Transport};
use crate::wire::{self, read_preamble, SendAccount, KIND_PARTITION, KIND_RESULT};

pub const BARRIER_MAGIC: [u8; 4] = *b"SJBR";

/// Port of the rendezvous service: one past the highest data port in the
/// cluster, so localhost layouts with consecutive ports never collide.
pub fn barrier_sport(cfg: &ClusterConfig) -> u16 {
    cfg.nodes.iter().map(|n| n.sport).max().unwrap_or(0).saturating_add(1)
}

/// Per-phase transfer event names, recorded by the driver thread in phase
/// order so a trace shows the ring schedule directly.
pub fn ev_phase_out(dst: u32) -> String {
    format!("xfer:out:dst{dst}")
}

pub fn ev_phase_in(src: u32) -> String {
    format!("xfer:in:src{src}")
}

fn eof(e: &io::Error) -> bool {
    e.kind() == io::ErrorKind::UnexpectedEof
}

// ---------------------------------------------------------------------------
// Rendezvous client

/// Client handle to the cluster-wide rendezvous. Holds one connection for
/// the node's whole run; each wait writes the generation being entered and
/// blocks until the coordinator's release echo. A single-participant
/// cluster needs no wire at all.
pub struct PhaseBarrier {
    participants: u32,
    generation: u32,
    conn: Option<Box<dyn Conn>>,
    clock: Clock,
}

impl PhaseBarrier {
    pub fn connect(
        cfg: &ClusterConfig,
        node_id: u32,
        transport: &dyn Transport,
        clock: &Clock,
    ) -> Result<Self> {
        let participants = cfg.num_nodes();
        let conn = if participants > 1 {
            let coord = cfg.addr(0);
            let mut c =
                connect_with_retry(transport, &coord.ip, barrier_sport(cfg), &cfg.retry, clock)?;
            let mut hello = [0u8; 8];
            hello[0..4].copy_from_slice(&BARRIER_MAGIC);
            hello[4..8].copy_from_slice(&node_id.to_le_bytes());
            c.write_all(&hello)?;
            c.flush()?;
            Some(c)
        } else {
            None
        };
        Ok(PhaseBarrier { participants, generation: 0, conn, clock: clock.clone() })
    }

    pub fn participants(&self) -> u32 {
        self.participants
    }

    /// Generations completed so far; strictly increases by one per wait.
    pub fn generation(&self) -> u32 {
        self.generation
    }

    /// Enter the next generation and block until every participant has.
    /// Returns the nanoseconds spent waiting for the release.
    pub fn wait(&mut self) -> Result<u64> {
        let entering = self.generation + 1;
        let t0 = self.clock.now_ns();
        if let Some(conn) = self.conn.as_mut() {
            conn.write_all(&entering.to_le_bytes())?;
            conn.flush()?;
            let mut release = [0u8; 4];
            conn.read_exact(&mut release).map_err(|e| {
                Error::Transport(format!(
                    "release for generation {entering} never arrived \
                     (a peer or the coordinator failed): {e}"
                ))
            })?;
            let got = u32::from_le_bytes(release);
            if got != entering {
                return Err(Error::Protocol(format!(
                    "rendezvous released generation {got} while node was waiting for {entering}"
                )));
            }
        }
        self.generation = entering;
        Ok(self.clock.now_ns().saturating_sub(t0))
    }
}

// ---------------------------------------------------------------------------
// Rendezvous service (coordinator side)

/// Count-up/release service run by node 0. Accepts one identified connection
/// per node, then per generation collects every participant's entry before
/// answering all of them. Exits cleanly once the clients hang up after their
/// final phase.
pub struct BarrierService {
    listener: Arc<Box<dyn Listener>>,
    handle: thread::JoinHandle<Result<()>>,
}

impl BarrierService {
    pub fn start(cfg: &ClusterConfig, transport: &dyn Transport) -> Result<BarrierService> {
        let coord = cfg.addr(0);
        let listener: Arc<Box<dyn Listener>> =
            Arc::new(transport.listen(&coord.ip, barrier_sport(cfg))?);
        let n = cfg.num_nodes();
        let l = Arc::clone(&listener);
        let handle = thread::Builder::new()
            .name("barrier-svc".into())
            .spawn(move || serve(&l, n))
            .expect("spawning the rendezvous service");
        Ok(BarrierService { listener, handle })
    }

    pub fn listener(&self) -> &Arc<Box<dyn Listener>> {
        &self.listener
    }

    /// Close the port and collect the service thread's verdict.
    pub fn shutdown(self) -> Result<()> {
        self.listener.shutdown();
        match self.handle.join() {
            Ok(r) => r,
            Err(_) => Err(Error::Protocol("rendezvous service panicked".into())),
        }
    }
}

fn serve(listener: &Arc<Box<dyn Listener>>, n: u32) -> Result<()> {
    let mut conns: Vec<Box<dyn Conn>> = Vec::with_capacity(n as usize);
    let mut seen = vec![false; n as usize];
    for _ in 0..n {
        let mut conn = match listener.accept() {
            Ok(c) => c,
            // Shutdown before the cluster assembled: the run failed
            // elsewhere and the nodes carry the diagnosis.
            Err(_) => return Ok(()),
        };
        let mut hello = [0u8; 8];
        conn.read_exact(&mut hello)
            .map_err(|e| Error::Transport(format!("rendezvous hello cut short: {e}")))?;
        if hello[0..4] != BARRIER_MAGIC {
            return Err(Error::Protocol(format!(
                "rendezvous hello with bad magic {:02x?}",
                &hello[0..4]
            )));
        }
        let id = u32::from_le_bytes(hello[4..8].try_into().unwrap());
        if id >= n {
            return Err(Error::Protocol(format!("rendezvous hello from unknown node {id}")));
        }
        if std::mem::replace(&mut seen[id as usize], true) {
            return Err(Error::Protocol(format!("node {id} joined the rendezvous twice")));
        }
        conns.push(conn);
    }

    let mut generation = 1u32;
    loop {
        for (slot, conn) in conns.iter_mut().enumerate() {
            let mut entry = [0u8; 4];
            match conn.read_exact(&mut entry) {
                Ok(()) => {
                    let got = u32::from_le_bytes(entry);
                    if got != generation {
                        return Err(Error::Protocol(format!(
                            "rendezvous expected generation {generation}, \
                             connection {slot} sent {got}"
                        )));
                    }
                }
                // First hang-up of a fresh round: the run is over. Dropping
                // the other connections releases any client that was somehow
                // still waiting, and it will report the failure itself.
                Err(e) if eof(&e) && slot == 0 => return Ok(()),
                Err(e) => {
                    return Err(Error::Transport(format!(
                        "rendezvous lost connection {slot} at generation {generation}: {e}"
                    )))
                }
            }
        }
        for conn in conns.iter_mut() {
            conn.write_all(&generation.to_le_bytes())?;
            conn.flush()?;
        }
        generation += 1;
    }
}

// ---------------------------------------------------------------------------
// Kill switch for in-process clusters

/// Registry of every listener a cluster has open. Closing them all breaks
/// the blocked accepts, and the connections dropped by unwinding nodes
/// cascade end-of-stream errors through everything else, so a stuck cluster
/// winds down instead of hanging its harness.
#[derive(Clone, Default)]
pub struct BaselineStop {
    listeners: Arc<Mutex<Vec<Weak<Box<dyn Listener>>>>>,
}

impl BaselineStop {
    pub fn new() -> Self {
        Self::default()
    }

    fn register(&self, l: &Arc<Box<dyn Listener>>) {
        self.listeners.lock().unwrap().push(Arc::downgrade(l));
    }

    pub fn stop(&self) {
        for w in self.listeners.lock().unwrap().iter() {
            if let Some(l) = w.upgrade() {
                l.shutdown();
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Node driver

/// Run one node of the phase-synchronized engine to completion and report
/// in the same shape as the pipelined engine: local join, n-1 ring phases
/// each fenced by the cluster rendezvous, then results gathered at the sink.
///
/// The engine ships whole build partitions, so it runs in broadcast mode
/// only; received tuples are joined on the single driver thread, matching
/// the formulation's sequential structure.
#[allow(clippy::too_many_arguments)]
pub fn run_node_barrier(
    cfg: &ClusterConfig,
    node_id: u32,
    r_part: &Partition,
    s_part: &Partition,
    transport: Arc<dyn Transport>,
    clock: Clock,
    trace_rec: TraceRecorder,
    delays: InjectedDelays,
    stop: Option<&BaselineStop>,
) -> Result<NodeOutcome> {
    cfg.validate()?;
    if node_id >= cfg.num_nodes() {
        return Err(Error::Config(format!("node {node_id} not in cluster")));
    }
    if cfg.join_mode != JoinMode::Broadcast {
        return Err(Error::Config(
            "the phase-synchronized engine ships whole build partitions and supports \
             broadcast mode only; hash distribution runs on the pipelined engine"
                .into(),
        ));
    }
    let n = cfg.num_nodes();
    let addr = cfg.addr(node_id);
    let r_table = Arc::new(build_hash_table(r_part, cfg.num_buckets));
    let s_table = build_hash_table(s_part, cfg.num_buckets);
    let listener: Arc<Box<dyn Listener>> = Arc::new(transport.listen(&addr.ip, addr.sport)?);
    if let Some(stop) = stop {
        stop.register(&listener);
    }

    // The coordinator brings the rendezvous up before anyone can block on it.
    let service = if node_id == 0 && n > 1 {
        let svc = BarrierService::start(cfg, &*transport)?;
        if let Some(stop) = stop {
            stop.register(svc.listener());
        }
        Some(svc)
    } else {
        None
    };

    let outcome = drive_node(
        cfg, node_id, &r_table, &s_table, &transport, &clock, &trace_rec, &delays, &listener,
    );

    // Shut our ports first so a failure cascades to the peers, then collect
    // the service verdict; a node-side error outranks it.
    listener.shutdown();
    let svc_res = match service {
        Some(svc) => svc.shutdown(),
        None => Ok(()),
    };
    match outcome {
        Ok(o) => svc_res.map(|()| o),
        Err(e) => Err(e),
    }
}

#[allow(clippy::too_many_arguments)]
fn drive_node(
    cfg: &ClusterConfig,
    node_id: u32,
    r_table: &Arc<HashTable>,
    s_table: &HashTable,
    transport: &Arc<dyn Transport>,
    clock: &Clock,
    trace_rec: &TraceRecorder,
    delays: &InjectedDelays,
    listener: &Arc<Box<dyn Listener>>,
) -> Result<NodeOutcome> {
    let n = cfg.num_nodes();
    let mut barrier = PhaseBarrier::connect(cfg, node_id, &**transport, clock)?;
    let codec = EntryCodec::new(cfg.result_format, cfg.tuple_size);
    let mut buf = LocalBuffer::new(codec, cfg.page_size);
    let mut report = LoadReport { node_id, ..LoadReport::default() };
    let payloads = matches!(cfg.result_format, ResultFormat::FullPayloads);

    trace_rec.rec(node_id, "main", "main", trace::EV_SPAN_START.into());
    let start = clock.now_ns();

    // The node's own partitions join before any communication.
    let t0 = clock.now_ns();
    for (b, bucket) in r_table.buckets.iter().enumerate() {
        if bucket.is_empty() {
            continue;
        }
        probe_bucket(bucket, b as u32, node_id, s_table, &cfg.predicate, payloads, &mut buf);
    }
    report.compute_time_ns += clock.now_ns().saturating_sub(t0);

    for k in 1..n {
        let receiver = (node_id + k) % n;
        let source = (node_id + n - k) % n;
        trace_rec.rec(node_id, "main", "send", ev_phase_out(receiver));
        let dst = cfg.addr(receiver);
        let sender = spawn_phase_sender(
            Arc::clone(transport),
            Arc::clone(r_table),
            dst.ip.clone(),
            dst.sport,
            node_id,
            cfg.num_buckets,
            cfg.retry,
            clock.clone(),
        );
        let inbound = receive_phase_partition(listener, source, cfg, clock);
        // The outbound half must be collected even when the inbound half
        // failed, or its thread would outlive the run.
        let outbound = match sender.join() {
            Ok(r) => r,
            Err(_) => Err(Error::Protocol("phase sender thread panicked".into())),
        };
        let (frames, in_acct, recv_ns) = inbound?;
        trace_rec.rec(node_id, "main", "recv", ev_phase_in(source));
        let (out_acct, send_ns) = outbound?;

        let t0 = clock.now_ns();
        for (b, tuples) in &frames {
            probe_bucket(tuples, *b, source, s_table, &cfg.predicate, payloads, &mut buf);
        }
        report.compute_time_ns += clock.now_ns().saturating_sub(t0);
        report.send_time_ns += send_ns;
        report.recv_time_ns += recv_ns;
        report.payload_bytes_sent += out_acct.payload_bytes;
        report.framing_bytes_sent += out_acct.framing_bytes;
        report.payload_bytes_received += in_acct.payload_bytes;
        report.framing_bytes_received += in_acct.framing_bytes;

        if delays.applies(node_id) && !delays.baseline_phase_delay.is_zero() {
            clock.sleep(delays.baseline_phase_delay)?;
        }
        trace_rec.rec(node_id, "main", "compute", trace::EV_BARRIER_ENTER.into());
        report.barrier_wait_ns += barrier.wait()?;
        trace_rec.rec(node_id, "main", "compute", trace::EV_BARRIER_RELEASE.into());
    }
    let join_done = clock.now_ns();
    report.join_span_ns = join_done.saturating_sub(start);
    report.result_entries = buf.entry_count();
    // Hang up so the rendezvous service sees the run end.
    drop(barrier);

    // Result collection mirrors the pipelined engine: every node ships its
    // entries to the sink after its own join completes. The gather sits
    // outside the join span and the shuffle byte accounting.
    let results = ResultList::new(&format!("n{node_id}:results"), None);
    buf.merge_into(&results);
    let mut cluster_span_ns = None;
    let mut sink_entries = None;
    let mut sink_blocks = None;
    if cfg.is_sink(node_id) {
        gather_results(listener, cfg, node_id, &results)?;
        cluster_span_ns = Some(clock.now_ns().saturating_sub(start));
        let entries = results.entry_count();
        sink_entries = Some(entries);
        sink_blocks = Some(results.clone_blocks());
        trace_rec.rec(node_id, "main", "compute", trace::ev_print(entries));
        log::info!("node {node_id}: join produced {entries} result entries");
    } else {
        let sink = cfg.addr(cfg.sink_id);
        let mut conn = connect_with_retry(&**transport, &sink.ip, sink.sport, &cfg.retry, clock)?;
        wire::send_result_stream(&mut conn, node_id, &results.take_blocks())?;
        conn.flush()?;
        wire::read_ack(&mut conn)?;
    }
    report.bytes_sent = report.payload_bytes_sent + report.framing_bytes_sent;
    report.bytes_received = report.payload_bytes_received + report.framing_bytes_received;
    trace_rec.rec(node_id, "main", "main", trace::EV_SPAN_END.into());
    Ok(NodeOutcome { report, cluster_span_ns, sink_entries, sink_blocks })
}

#[allow(clippy::too_many_arguments)]
fn spawn_phase_sender(
    transport: Arc<dyn Transport>,
    r_table: Arc<HashTable>,
    ip: String,
    sport: u16,
    node_id: u32,
    num_buckets: u32,
    retry: RetryPolicy,
    clock: Clock,
) -> thread::JoinHandle<Result<(SendAccount, u64)>> {
    thread::Builder::new()
        .name(format!("n{node_id}:phase-send"))
        .spawn(move || {
            let t0 = clock.now_ns();
            let mut conn = connect_with_retry(&*transport, &ip, sport, &retry, &clock)?;
            let buckets = r_table.buckets.iter().enumerate().map(|(b, t)| (b as u32, t));
            let acct =
                wire::send_partition_segment(&mut conn, node_id, TABLE_R, num_buckets, buckets)?;
            conn.flush()?;
            wire::read_ack(&mut conn)?;
            Ok((acct, clock.now_ns().saturating_sub(t0)))
        })
        .expect("spawning the phase sender")
}

/// Accept and fully drain one peer's phase transfer. The ring schedule
/// admits exactly one inbound connection per phase, and the rendezvous
/// fencing both sides means it can only be the scheduled one.
fn receive_phase_partition(
    listener: &Arc<Box<dyn Listener>>,
    expected_source: u32,
    cfg: &ClusterConfig,
    clock: &Clock,
) -> Result<(Vec<(u32, TupleBuf)>, SendAccount, u64)> {
    let t0 = clock.now_ns();
    let mut conn = listener.accept()?;
    let pre = read_preamble(&mut conn)?;
    if pre.kind != KIND_PARTITION {
        return Err(Error::Protocol(format!(
            "expected a partition stream this phase, got kind {}",
            pre.kind
        )));
    }
    if pre.sender != expected_source {
        return Err(Error::Protocol(format!(
            "ring order broken: partition from {} while waiting on {expected_source}",
            pre.sender
        )));
    }
    if pre.table_id != TABLE_R {
        return Err(Error::Protocol(format!(
            "phase transfer carries table {}, only the build side travels",
            pre.table_id
        )));
    }
    if pre.num_buckets != cfg.num_buckets {
        return Err(Error::Protocol(format!(
            "peer {} laid out {} buckets but this node has {}",
            pre.sender, pre.num_buckets, cfg.num_buckets
        )));
    }
    let mut acct = SendAccount { payload_bytes: 0, framing_bytes: pre.encoded_len() as u64 };
    let mut frames = Vec::new();
    loop {
        match wire::read_bucket_frame(&mut conn, cfg.tuple_size, cfg.num_buckets)? {
            Some((bucket, tuples)) => {
                acct.framing_bytes += 8;
                acct.payload_bytes += tuples.byte_len() as u64;
                frames.push((bucket, tuples));
            }
            None => {
                acct.framing_bytes += 4;
                break;
            }
        }
    }
    wire::write_ack(&mut conn)?;
    Ok((frames, acct, clock.now_ns().saturating_sub(t0)))
}

fn gather_results(
    listener: &Arc<Box<dyn Listener>>,
    cfg: &ClusterConfig,
    node_id: u32,
    results: &ResultList,
) -> Result<()> {
    let n = cfg.num_nodes();
    let codec = EntryCodec::new(cfg.result_format, cfg.tuple_size);
    let mut seen = vec![false; n as usize];
    for _ in 1..n {
        let mut conn = listener.accept()?;
        let pre = read_preamble(&mut conn)?;
        if pre.kind != KIND_RESULT {
            return Err(Error::Protocol(format!(
                "expected a result stream during the gather, got kind {}",
                pre.kind
            )));
        }
        if pre.sender == node_id || pre.sender >= n {
            return Err(Error::Protocol(format!("result stream from bad sender {}", pre.sender)));
        }
        if std::mem::replace(&mut seen[pre.sender as usize], true) {
            return Err(Error::Protocol(format!("node {} sent its results twice", pre.sender)));
        }
        for block in wire::read_result_stream_body(&mut conn, codec.entry_size())? {
            results.append_block(block);
        }
        wire::write_ack(&mut conn)?;
    }
    Ok(())
}

/// Emit every matching pair from one build bucket against the resident
/// probe table. Equality meets its matches in the same-index bucket; any
/// other predicate sweeps the whole table.
fn probe_bucket(
    r: &TupleBuf,
    bucket: u32,
    source: u32,
    s_table: &HashTable,
    predicate: &Predicate,
    payloads: bool,
    buf: &mut LocalBuffer,
) {
    if predicate.is_equality() {
        cross(r, source, &s_table.buckets[bucket as usize], predicate, payloads, buf);
    } else {
        for s in &s_table.buckets {
            cross(r, source, s, predicate, payloads, buf);
        }
    }
}

fn cross(
    r: &TupleBuf,
    source: u32,
    s: &TupleBuf,
    predicate: &Predicate,
    payloads: bool,
    buf: &mut LocalBuffer,
) {
    for i in 0..r.len() {
        let rk = r.key(i);
        for j in 0..s.len() {
            let sk = s.key(j);
            if predicate.matches(rk, sk) {
                if payloads {
                    buf.push(rk, sk, source, r.payload(i), s.payload(j));
                } else {
                    buf.push(rk, sk, source, &[], &[]);
                }
            }
        }
    }
}
