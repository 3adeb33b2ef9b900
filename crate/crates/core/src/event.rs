//! The three bounded blocking MPMC queues (Q_c, Q_s, Q_r) and their record
//! types. All cross-thread coordination inside a node flows through these.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::htf::Htf;
use crate::sync::{yield_point, Monitor, SchedHandle};
use crate::transport::Conn;
use crate::wire::StreamPreamble;

struct QState<T> {
    items: VecDeque<T>,
    closed: bool,
    poisoned: bool,
}

/// Bounded-buffer queue: push blocks while full, pop blocks while empty.
/// `poison` is the abort path: pending and future operations fail so worker
/// loops unwind promptly. Pushing to a `close`d queue is a programming error
/// and panics with a diagnostic.
pub struct BoundedQueue<T> {
    mon: Monitor<QState<T>>,
    capacity: usize,
    sched: SchedHandle,
    label: String,
}

impl<T> BoundedQueue<T> {
    pub fn new(label: &str, capacity: usize, sched: SchedHandle) -> Self {
        assert!(capacity >= 1);
        BoundedQueue {
            mon: Monitor::new(
                label,
                QState { items: VecDeque::new(), closed: false, poisoned: false },
                sched.clone(),
            ),
            capacity,
            sched,
            label: label.to_string(),
        }
    }

    pub fn push(&self, item: T) -> Result<()> {
        yield_point(&self.sched)?;
        let mut slot = Some(item);
        self.mon.wait_until(|s| {
            if s.poisoned {
                return Some(Err(Error::Aborted(format!("queue {} poisoned", self.label))));
            }
            if s.closed {
                panic!("push to closed queue {}", self.label);
            }
            if s.items.len() < self.capacity {
                s.items.push_back(slot.take().expect("push re-entered after success"));
                Some(Ok(()))
            } else {
                None
            }
        })??;
        self.mon.notify();
        Ok(())
    }

    pub fn pop(&self) -> Result<T> {
        yield_point(&self.sched)?;
        let item = self.mon.wait_until(|s| {
            if s.poisoned {
                return Some(Err(Error::Aborted(format!("queue {} poisoned", self.label))));
            }
            match s.items.pop_front() {
                Some(it) => Some(Ok(it)),
                None if s.closed => {
                    Some(Err(Error::Aborted(format!("queue {} closed and drained", self.label))))
                }
                None => None,
            }
        })??;
        self.mon.notify();
        Ok(item)
    }

    pub fn len(&self) -> usize {
        self.mon.with(|s| s.items.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn close(&self) {
        self.mon.with_notify(|s| s.closed = true);
    }

    pub fn poison(&self) {
        self.mon.with_notify(|s| {
            s.poisoned = true;
            s.items.clear();
        });
    }
}

/// One unit of join work: a materialized HTF bucket.
pub struct JoinUnit {
    pub source: u32,
    pub table: u32,
    pub bucket: u32,
    pub htf: Arc<Htf>,
    /// Re-partitioned mode only: the opposite table's units for this bucket
    /// that were already resident when this unit arrived. Joining each new
    /// unit against exactly this snapshot pairs every (R, S) unit once.
    pub pair_snapshot: Vec<(u32, Arc<crate::model::tuple::TupleBuf>)>,
}

pub enum ComputeEvent {
    Join(JoinUnit),
    JoinExit,
    Exit,
}

impl ComputeEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            ComputeEvent::Join(_) => "JOIN",
            ComputeEvent::JoinExit => "JOIN_EXIT",
            ComputeEvent::Exit => "EXIT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SendTarget {
    pub node_id: u32,
    pub ip: String,
    pub sport: u16,
    pub is_sink: bool,
}

pub enum SendEvent {
    PartitionReady(SendTarget),
    ResultReady(SendTarget),
    Exit,
}

impl SendEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            SendEvent::PartitionReady(_) => "PARTITION_READY",
            SendEvent::ResultReady(_) => "RESULT_READY",
            SendEvent::Exit => "EXIT",
        }
    }
}

/// An accepted connection whose preamble the listener has already read.
pub struct InboundStream {
    pub conn: Box<dyn Conn>,
    pub preamble: StreamPreamble,
}

pub enum RecvEvent {
    PartitionReady(InboundStream),
    ResultReady(InboundStream),
    Exit,
}

impl RecvEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            RecvEvent::PartitionReady(_) => "PARTITION_READY",
            RecvEvent::ResultReady(_) => "RESULT_READY",
            RecvEvent::Exit => "EXIT",
        }
    }
}
