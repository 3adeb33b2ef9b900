//! Shared per-node protocol state. All transitions (stream counters, the two
//! completion flags, exit latches) are decided atomically under one monitor;
//! the decided actions (queue pushes) are performed after unlocking so no
//! thread ever blocks on a queue while holding the state lock.

use std::collections::HashMap;
use std::sync::Arc;

use crate::model::htf::Htf;
use crate::model::tuple::TupleBuf;

/// Per-bucket pairing state for re-partitioned joins: the units of each
/// table that have arrived so far. A new unit snapshots the opposite list at
/// arrival, so every (R-unit, S-unit) pair is joined exactly once — by
/// whichever unit arrived later.
#[derive(Default)]
pub struct PairState {
    pub r: Vec<(u32, Arc<TupleBuf>)>,
    pub s: Vec<(u32, Arc<TupleBuf>)>,
}

pub struct NodeShared {
    /// Hash-table fragments keyed by (source node, table).
    pub htfs: HashMap<(u32, u32), Arc<Htf>>,
    pub pair: HashMap<u32, PairState>,
    /// Every locally held join unit has been pushed. Gates the join-exit
    /// fan-out so fast peers cannot trigger it past unadmitted local work.
    pub local_admitted: bool,
    pub partition_streams_done: u32,
    pub shuffle_done: bool,
    /// Latch: the join-exit fan-out has been issued.
    pub fanout_issued: bool,
    pub result_streams_done: u32,
    pub results_done: bool,
    /// Latch: the receive queue's exit record has been issued.
    pub qr_exit_issued: bool,
    pub span_start_ns: Option<u64>,
    pub barrier_release_ns: Option<u64>,
    pub last_result_ns: Option<u64>,
    pub abort: Option<String>,
}

impl NodeShared {
    pub fn new() -> Self {
        NodeShared {
            htfs: HashMap::new(),
            pair: HashMap::new(),
            local_admitted: false,
            partition_streams_done: 0,
            shuffle_done: false,
            fanout_issued: false,
            result_streams_done: 0,
            results_done: false,
            qr_exit_issued: false,
            span_start_ns: None,
            barrier_release_ns: None,
            last_result_ns: None,
            abort: None,
        }
    }
}

impl Default for NodeShared {
    fn default() -> Self {
        Self::new()
    }
}

/// Queue pushes decided under the state lock, to be performed after it is
/// released.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct DecidedActions {
    /// Push this many join-exit records to the compute queue.
    pub fanout_join_exits: usize,
    /// Push one exit record to the receive queue.
    pub push_qr_exit: bool,
}
