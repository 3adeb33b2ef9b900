//! Hash-table fragments: per-source, per-table collections of buckets that
//! arrive incrementally over the shuffle and are freed bucket-by-bucket as
//! joins complete. A fragment never needs to be fully resident.

use std::sync::Arc;
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::model::tuple::TupleBuf;

enum Slot {
    Absent,
    Resident(Arc<TupleBuf>),
    Freed,
}

struct HtfState {
    slots: Vec<Slot>,
    /// Total buckets this fragment will carry, known once the stream's
    /// terminator arrives (or immediately for locally built fragments).
    expected: Option<u32>,
    freed: u32,
    complete: bool,
}

/// One hash-table fragment. Buckets move Absent -> Resident -> Freed exactly
/// once; a join against a freed or absent bucket is a protocol violation.
pub struct Htf {
    pub source_node: u32,
    pub table_id: u32,
    pub num_buckets: u32,
    /// Locally built fragments bypass the shuffle memory pool.
    pub pooled: bool,
    state: Mutex<HtfState>,
}

/// What a state transition completed, so the caller can release pool bytes
/// and detect the fragment-done edge exactly once across racing sites.
#[derive(Debug, PartialEq, Eq)]
pub struct FreeOutcome {
    pub bytes: usize,
    /// True on exactly one call per fragment: all expected buckets are freed.
    pub fragment_done: bool,
}

impl Htf {
    pub fn new(source_node: u32, table_id: u32, num_buckets: u32, pooled: bool) -> Self {
        let slots = (0..num_buckets).map(|_| Slot::Absent).collect();
        Htf {
            source_node,
            table_id,
            num_buckets,
            pooled,
            state: Mutex::new(HtfState { slots, expected: None, freed: 0, complete: false }),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HtfState> {
        match self.state.lock() {
            Ok(g) => g,
            Err(p) => p.into_inner(),
        }
    }

    /// Install an arrived bucket. Errors if the slot was already filled.
    pub fn materialize(&self, bucket: u32, data: Arc<TupleBuf>) -> Result<()> {
        let mut s = self.lock();
        let slot = s
            .slots
            .get_mut(bucket as usize)
            .ok_or_else(|| Error::Protocol(format!("bucket {bucket} out of range")))?;
        match slot {
            Slot::Absent => {
                *slot = Slot::Resident(data);
                Ok(())
            }
            _ => Err(Error::Protocol(format!(
                "bucket {bucket} of table {} from node {} materialized twice",
                self.table_id, self.source_node
            ))),
        }
    }

    /// Borrow a resident bucket for a join.
    pub fn bucket(&self, bucket: u32) -> Result<Arc<TupleBuf>> {
        let s = self.lock();
        match s.slots.get(bucket as usize) {
            Some(Slot::Resident(data)) => Ok(Arc::clone(data)),
            Some(Slot::Freed) => Err(Error::Protocol(format!(
                "join against freed bucket {bucket} of table {}",
                self.table_id
            ))),
            Some(Slot::Absent) => Err(Error::Protocol(format!(
                "join against absent bucket {bucket} of table {}",
                self.table_id
            ))),
            None => Err(Error::Protocol(format!("bucket {bucket} out of range"))),
        }
    }

    /// Drop a bucket after its join completed, returning its byte size and
    /// whether this call completed the whole fragment.
    pub fn free_bucket(&self, bucket: u32) -> Result<FreeOutcome> {
        let mut s = self.lock();
        let slot = s
            .slots
            .get_mut(bucket as usize)
            .ok_or_else(|| Error::Protocol(format!("bucket {bucket} out of range")))?;
        let bytes = match slot {
            Slot::Resident(data) => data.byte_len(),
            Slot::Freed => {
                return Err(Error::Protocol(format!("bucket {bucket} freed twice")));
            }
            Slot::Absent => {
                return Err(Error::Protocol(format!("freeing absent bucket {bucket}")));
            }
        };
        *slot = Slot::Freed;
        s.freed += 1;
        let fragment_done = Self::check_done(&mut s);
        Ok(FreeOutcome { bytes, fragment_done })
    }

    /// Record the stream-complete bucket count (terminator seen, or local
    /// build finished). Returns true if that observation itself completed the
    /// fragment, i.e. every bucket had already been joined and freed.
    pub fn set_expected(&self, count: u32) -> Result<bool> {
        let mut s = self.lock();
        if let Some(prev) = s.expected {
            return Err(Error::Protocol(format!(
                "fragment completion announced twice ({prev} then {count})"
            )));
        }
        s.expected = Some(count);
        Ok(Self::check_done(&mut s))
    }

    fn check_done(s: &mut HtfState) -> bool {
        if !s.complete && s.expected == Some(s.freed) {
            s.complete = true;
            true
        } else {
            false
        }
    }

    pub fn is_complete(&self) -> bool {
        self.lock().complete
    }

    pub fn freed_count(&self) -> u32 {
        self.lock().freed
    }

    pub fn resident_buckets(&self) -> Vec<u32> {
        let s = self.lock();
        s.slots
            .iter()
            .enumerate()
            .filter_map(|(i, sl)| matches!(sl, Slot::Resident(_)).then_some(i as u32))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn buf(keys: &[u64]) -> Arc<TupleBuf> {
        let mut b = TupleBuf::new(16);
        for &k in keys {
            b.push_keyed(k);
        }
        Arc::new(b)
    }

    #[test]
    fn lifecycle_absent_resident_freed() {
        let h = Htf::new(0, 0, 4, true);
        assert!(h.bucket(1).is_err());
        h.materialize(1, buf(&[7])).unwrap();
        assert_eq!(h.bucket(1).unwrap().key(0), 7);
        let out = h.free_bucket(1).unwrap();
        assert_eq!(out.bytes, 16);
        assert!(!out.fragment_done);
        assert!(h.bucket(1).is_err());
        assert!(h.free_bucket(1).is_err());
    }

    #[test]
    fn double_materialize_rejected() {
        let h = Htf::new(0, 0, 2, true);
        h.materialize(0, buf(&[1])).unwrap();
        assert!(h.materialize(0, buf(&[2])).is_err());
    }

    #[test]
    fn done_edge_fires_once_free_side() {
        // Terminator first, then the last free completes the fragment.
        let h = Htf::new(0, 0, 8, true);
        h.materialize(3, buf(&[1])).unwrap();
        h.materialize(5, buf(&[2])).unwrap();
        assert!(!h.set_expected(2).unwrap());
        assert!(!h.free_bucket(3).unwrap().fragment_done);
        assert!(h.free_bucket(5).unwrap().fragment_done);
        assert!(h.is_complete());
    }

    #[test]
    fn done_edge_fires_once_expected_side() {
        // All joins finish before the terminator arrives.
        let h = Htf::new(0, 0, 8, true);
        h.materialize(3, buf(&[1])).unwrap();
        h.free_bucket(3).unwrap();
        assert!(h.set_expected(1).unwrap());
        assert!(h.is_complete());
    }

    #[test]
    fn empty_fragment_completes_on_expected() {
        let h = Htf::new(0, 0, 8, true);
        assert!(h.set_expected(0).unwrap());
    }

    #[test]
    fn double_expected_rejected() {
        let h = Htf::new(0, 0, 8, true);
        h.set_expected(0).unwrap();
        assert!(h.set_expected(0).is_err());
    }
}
