//! In-process cluster harness: every node runs as a thread bundle against an
//! in-memory network. Free mode uses real threads and a wall-clock watchdog;
//! deterministic mode serializes every blocking step through a seeded
//! scheduler so a run is exactly reproducible from its seed, and a stuck
//! protocol is reported as a diagnosed deadlock instead of a hang.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::baseline::{run_node_barrier, BaselineStop};
use crate::config::ClusterConfig;
use crate::error::{Error, Result};
use crate::metrics::{ClusterMetrics, LoadReport};
use crate::model::result::ResultBlock;
use crate::model::tuple::Partition;
use crate::runtime::{run_node, InjectedDelays, NodeOutcome, StopHandle};
use crate::sync::{spawn_preregistered, Clock, DetSched, Monitor};
use crate::trace::{TraceEvent, TraceRecorder};
use crate::transport::MemoryTransport;

#[derive(Debug, Clone)]
pub enum SimMode {
    /// Real threads and real time; the watchdog tears the cluster down if it
    /// fails to finish in time.
    Free { watchdog: Duration },
    /// Token-passing scheduler seeded with `seed`; virtual time.
    Det { seed: u64 },
}

#[derive(Clone)]
pub struct SimSpec {
    pub cfg: ClusterConfig,
    pub mode: SimMode,
    pub delays: InjectedDelays,
    pub record_trace: bool,
}

impl SimSpec {
    pub fn free(cfg: ClusterConfig) -> Self {
        SimSpec {
            cfg,
            mode: SimMode::Free { watchdog: Duration::from_secs(60) },
            delays: InjectedDelays::default(),
            record_trace: false,
        }
    }

    pub fn det(cfg: ClusterConfig, seed: u64) -> Self {
        SimSpec { cfg, mode: SimMode::Det { seed }, delays: InjectedDelays::default(), record_trace: true }
    }
}

pub struct SimOutcome {
    /// Per-node load reports, indexed by node id.
    pub reports: Vec<LoadReport>,
    pub metrics: ClusterMetrics,
    /// Entry count collected at the sink.
    pub sink_entries: u64,
    /// The collected result blocks, as the sink holds them.
    pub sink_blocks: Vec<ResultBlock>,
    pub trace: Vec<TraceEvent>,
}

pub fn run_sim(spec: &SimSpec, r_parts: &[Partition], s_parts: &[Partition]) -> Result<SimOutcome> {
    spec.cfg.validate()?;
    let n = spec.cfg.num_nodes() as usize;
    if r_parts.len() != n || s_parts.len() != n {
        return Err(Error::Config(format!(
            "cluster of {n} nodes given {} build and {} probe partitions",
            r_parts.len(),
            s_parts.len()
        )));
    }
    match spec.mode {
        SimMode::Free { watchdog } => run_free(spec, r_parts, s_parts, watchdog),
        SimMode::Det { seed } => run_det(spec, r_parts, s_parts, seed),
    }
}

type OutcomeSlots = Arc<Mutex<Vec<Option<Result<NodeOutcome>>>>>;

fn node_job(
    spec: &SimSpec,
    node_id: u32,
    r: Partition,
    s: Partition,
    transport: Arc<dyn crate::transport::Transport>,
    clock: Clock,
    trace: TraceRecorder,
    sched: crate::sync::SchedHandle,
    stop: Option<StopHandle>,
    slots: OutcomeSlots,
) -> impl FnOnce() + Send + 'static {
    let cfg = spec.cfg.clone();
    let delays = spec.delays.clone();
    move || {
        let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            run_node(&cfg, node_id, &r, &s, transport, clock, trace, sched, delays, stop.as_ref())
        }))
        .unwrap_or_else(|p| {
            Err(Error::Protocol(format!("node {node_id} main thread panicked: {p:?}")))
        });
        slots.lock().unwrap()[node_id as usize] = Some(res);
    }
}

/// Latch + timer pair: the returned closure flips the latch once the cluster
/// threads are joined; the watchdog thread fires `on_expiry` if the latch is
/// still down when the timer runs out.
struct Watchdog {
    done: Arc<Monitor<bool>>,
    fired: Arc<std::sync::atomic::AtomicBool>,
    handle: std::thread::JoinHandle<()>,
}

impl Watchdog {
    fn arm(timeout: Duration, on_expiry: impl FnOnce() + Send + 'static) -> Self {
        let done = Arc::new(Monitor::new("sim:done", false, None));
        let fired = Arc::new(std::sync::atomic::AtomicBool::new(false));
        let handle = {
            let done = Arc::clone(&done);
            let fired = Arc::clone(&fired);
            std::thread::spawn(move || {
                let finished = done
                    .wait_until_timeout(|d| (*d).then_some(()), timeout)
                    .expect("free-mode wait cannot fail");
                if finished.is_none() {
                    fired.store(true, std::sync::atomic::Ordering::SeqCst);
                    on_expiry();
                }
            })
        };
        Watchdog { done, fired, handle }
    }

    /// True iff the watchdog fired before the cluster finished.
    fn disarm(self) -> bool {
        self.done.with_notify(|d| *d = true);
        drop(self.handle.join());
        self.fired.load(std::sync::atomic::Ordering::SeqCst)
    }
}

fn run_free(
    spec: &SimSpec,
    r_parts: &[Partition],
    s_parts: &[Partition],
    watchdog: Duration,
) -> Result<SimOutcome> {
    let n = spec.cfg.num_nodes() as usize;
    let transport: Arc<dyn crate::transport::Transport> = Arc::new(MemoryTransport::new(None));
    let clock = Clock::real();
    let trace = if spec.record_trace {
        TraceRecorder::enabled(clock.clone(), None)
    } else {
        TraceRecorder::disabled(clock.clone())
    };
    let stop = StopHandle::new();
    let slots: OutcomeSlots = Arc::new(Mutex::new((0..n).map(|_| None).collect()));

    let dog = {
        let stop = stop.clone();
        Watchdog::arm(watchdog, move || {
            stop.stop(&format!("watchdog: cluster not finished after {watchdog:?}"))
        })
    };

    let handles: Vec<_> = (0..n)
        .map(|i| {
            std::thread::spawn(node_job(
                spec,
                i as u32,
                r_parts[i].clone(),
                s_parts[i].clone(),
                Arc::clone(&transport),
                clock.clone(),
                trace.clone(),
                None,
                Some(stop.clone()),
                Arc::clone(&slots),
            ))
        })
        .collect();
    for h in handles {
        drop(h.join());
    }

    if dog.disarm() {
        return Err(Error::Deadlock(format!(
            "cluster did not finish within the {watchdog:?} watchdog"
        )));
    }
    assemble(slots, trace)
}

/// In-process run of the phase-synchronized engine over the same in-memory
/// network. Free mode only: the token-passing scheduler has no hooks in the
/// blocking socket reads this engine lives on, so deterministic replay
/// covers the pipelined engine alone.
pub fn run_baseline_sim(
    spec: &SimSpec,
    r_parts: &[Partition],
    s_parts: &[Partition],
) -> Result<SimOutcome> {
    spec.cfg.validate()?;
    let n = spec.cfg.num_nodes() as usize;
    if r_parts.len() != n || s_parts.len() != n {
        return Err(Error::Config(format!(
            "cluster of {n} nodes given {} build and {} probe partitions",
            r_parts.len(),
            s_parts.len()
        )));
    }
    let watchdog = match spec.mode {
        SimMode::Free { watchdog } => watchdog,
        SimMode::Det { .. } => {
            return Err(Error::Config(
                "the phase-synchronized engine runs in free mode only".into(),
            ))
        }
    };
    let transport: Arc<dyn crate::transport::Transport> = Arc::new(MemoryTransport::new(None));
    let clock = Clock::real();
    let trace = if spec.record_trace {
        TraceRecorder::enabled(clock.clone(), None)
    } else {
        TraceRecorder::disabled(clock.clone())
    };
    let stop = BaselineStop::new();
    let slots: OutcomeSlots = Arc::new(Mutex::new((0..n).map(|_| None).collect()));

    let dog = {
        let stop = stop.clone();
        Watchdog::arm(watchdog, move || stop.stop())
    };

    let handles: Vec<_> = (0..n)
        .map(|i| {
            let cfg = spec.cfg.clone();
            let delays = spec.delays.clone();
            let r = r_parts[i].clone();
            let s = s_parts[i].clone();
            let transport = Arc::clone(&transport);
            let clock = clock.clone();
            let trace = trace.clone();
            let stop = stop.clone();
            let slots = Arc::clone(&slots);
            std::thread::spawn(move || {
                let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                    run_node_barrier(
                        &cfg,
                        i as u32,
                        &r,
                        &s,
                        transport,
                        clock,
                        trace,
                        delays,
                        Some(&stop),
                    )
                }))
                .unwrap_or_else(|p| {
                    Err(Error::Protocol(format!("node {i} thread panicked: {p:?}")))
                });
                slots.lock().unwrap()[i] = Some(res);
            })
        })
        .collect();
    for h in handles {
        drop(h.join());
    }

    if dog.disarm() {
        return Err(Error::Deadlock(format!(
            "cluster did not finish within the {watchdog:?} watchdog"
        )));
    }
    assemble(slots, trace)
}

fn run_det(
    spec: &SimSpec,
    r_parts: &[Partition],
    s_parts: &[Partition],
    seed: u64,
) -> Result<SimOutcome> {
    let n = spec.cfg.num_nodes() as usize;
    let sched = DetSched::new(seed);
    let clock = Clock::virtual_for(&sched);
    let transport: Arc<dyn crate::transport::Transport> =
        Arc::new(MemoryTransport::new(Some(Arc::clone(&sched))));
    let trace = if spec.record_trace {
        TraceRecorder::enabled(clock.clone(), Some(Arc::clone(&sched)))
    } else {
        TraceRecorder::disabled(clock.clone())
    };
    let slots: OutcomeSlots = Arc::new(Mutex::new((0..n).map(|_| None).collect()));

    // Announce every node's driver thread before starting any, so the first
    // scheduling draw sees the same candidate set on every run.
    for i in 0..n {
        sched.preregister(&format!("n{i}:main"));
    }
    let handles: Vec<_> = (0..n)
        .map(|i| {
            spawn_preregistered(
                &Some(Arc::clone(&sched)),
                format!("n{i}:main"),
                node_job(
                    spec,
                    i as u32,
                    r_parts[i].clone(),
                    s_parts[i].clone(),
                    Arc::clone(&transport),
                    clock.clone(),
                    trace.clone(),
                    Some(Arc::clone(&sched)),
                    None,
                    Arc::clone(&slots),
                ),
            )
        })
        .collect();
    for h in handles {
        drop(h.join());
    }

    // A diagnosed deadlock outranks whatever secondary errors the unwinding
    // threads reported.
    sched.check_poison()?;
    assemble(slots, trace)
}

fn assemble(slots: OutcomeSlots, trace: TraceRecorder) -> Result<SimOutcome> {
    let outcomes = {
        let mut g = slots.lock().unwrap();
        g.drain(..).collect::<Vec<_>>()
    };
    let mut reports = Vec::with_capacity(outcomes.len());
    let mut cluster_span = None;
    let mut sink_entries = None;
    let mut sink_blocks = None;
    for (i, slot) in outcomes.into_iter().enumerate() {
        let outcome =
            slot.ok_or_else(|| Error::Protocol(format!("node {i} never reported an outcome")))??;
        if let Some(s) = outcome.cluster_span_ns {
            cluster_span = Some(s);
        }
        if let Some(e) = outcome.sink_entries {
            sink_entries = Some(e);
        }
        if let Some(b) = outcome.sink_blocks {
            sink_blocks = Some(b);
        }
        reports.push(outcome.report);
    }
    let cluster_span =
        cluster_span.ok_or_else(|| Error::Protocol("sink never reported a cluster span".into()))?;
    let sink_entries =
        sink_entries.ok_or_else(|| Error::Protocol("sink never reported a result count".into()))?;
    let metrics =
        ClusterMetrics { nodes: reports.clone(), cluster_join_span_ns: cluster_span };
    Ok(SimOutcome {
        reports,
        metrics,
        sink_entries,
        sink_blocks: sink_blocks.unwrap_or_default(),
        trace: trace.events(),
    })
}
