//! Load accounting and the three headline performance metrics: intra-node
//! gain, speedup, and the analytic shuffle volume.
//!
//! Busy time is accumulated per thread between returning from a queue pop
//! and issuing the next pop, so time spent blocked on an empty queue, a full
//! pool, or the barrier never counts as load.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub node_id: u32,
    /// Summed busy time across all compute threads.
    pub compute_time_ns: u64,
    pub send_time_ns: u64,
    pub recv_time_ns: u64,
    /// Shuffle start to join completion at this node.
    pub join_span_ns: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub payload_bytes_sent: u64,
    pub framing_bytes_sent: u64,
    pub payload_bytes_received: u64,
    pub framing_bytes_received: u64,
    /// Time send/recv threads spent blocked acquiring pool memory.
    pub pool_block_ns: u64,
    /// Time compute threads spent waiting at the join-completion barrier.
    pub barrier_wait_ns: u64,
    pub result_entries: u64,
}

impl LoadReport {
    pub fn total_load_ns(&self) -> u64 {
        self.compute_time_ns + self.send_time_ns + self.recv_time_ns
    }

    pub const CSV_HEADER: &'static str = "node,compute_ns,send_ns,recv_ns,span_ns,bytes_sent,bytes_received,payload_sent,framing_sent,payload_recv,framing_recv,pool_block_ns,barrier_wait_ns,result_entries,gain";

    pub fn csv_row(&self) -> String {
        let gain = intra_node_gain(self).map(|g| format!("{g:.4}")).unwrap_or_else(|_| "nan".into());
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.node_id,
            self.compute_time_ns,
            self.send_time_ns,
            self.recv_time_ns,
            self.join_span_ns,
            self.bytes_sent,
            self.bytes_received,
            self.payload_bytes_sent,
            self.framing_bytes_sent,
            self.payload_bytes_received,
            self.framing_bytes_received,
            self.pool_block_ns,
            self.barrier_wait_ns,
            self.result_entries,
            gain
        )
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ClusterMetrics {
    pub nodes: Vec<LoadReport>,
    /// Recorded at the sink when join completion from every node is known.
    pub cluster_join_span_ns: u64,
}

impl ClusterMetrics {
    pub fn max_node_span_ns(&self) -> u64 {
        self.nodes.iter().map(|n| n.join_span_ns).max().unwrap_or(0)
    }

    pub fn total_result_entries(&self) -> u64 {
        self.nodes.iter().map(|n| n.result_entries).sum()
    }
}

/// Total per-thread load over wall span: how many workers' worth of overlap
/// the node sustained.
pub fn intra_node_gain(report: &LoadReport) -> Result<f64> {
    if report.join_span_ns == 0 {
        return Err(Error::Config("intra-node gain undefined for a zero join span".into()));
    }
    Ok(report.total_load_ns() as f64 / report.join_span_ns as f64)
}

pub fn speedup(span_1_ns: u64, span_n_ns: u64) -> Result<f64> {
    if span_1_ns == 0 || span_n_ns == 0 {
        return Err(Error::Config("speedup undefined for a zero span".into()));
    }
    Ok(span_1_ns as f64 / span_n_ns as f64)
}

/// Tuples each node ships during a re-partitioning shuffle of a relation of
/// `relation_size` tuples split evenly across `n` nodes: |R|/n to each of
/// the n-1 peers, i.e. |R|(1 - 1/n).
pub fn expected_send_volume(relation_size: u64, n: u32) -> f64 {
    if n == 0 {
        return 0.0;
    }
    // |R|(1 - 1/n), computed as |R|(n-1)/n so divisible sizes stay exact.
    relation_size as f64 * (n - 1) as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(c: u64, s: u64, r: u64, span: u64) -> LoadReport {
        LoadReport {
            node_id: 0,
            compute_time_ns: c,
            send_time_ns: s,
            recv_time_ns: r,
            join_span_ns: span,
            ..LoadReport::default()
        }
    }

    #[test]
    fn gain_of_three_fully_overlapped_unit_loads() {
        let g = intra_node_gain(&report(1000, 1000, 1000, 1000)).unwrap();
        assert!((g - 3.0).abs() < 1e-9);
    }

    #[test]
    fn gain_of_a_serial_run_is_about_one() {
        let g = intra_node_gain(&report(600, 250, 150, 1000)).unwrap();
        assert!((g - 1.0).abs() < 0.05);
    }

    #[test]
    fn gain_rejects_zero_span() {
        assert!(intra_node_gain(&report(1, 1, 1, 0)).is_err());
    }

    #[test]
    fn speedup_quotients() {
        assert!((speedup(10_000, 2_000).unwrap() - 5.0).abs() < 1e-9);
        assert!((speedup(7, 7).unwrap() - 1.0).abs() < 1e-9);
        assert!(speedup(0, 5).is_err());
        assert!(speedup(5, 0).is_err());
    }

    #[test]
    fn send_volume_matches_closed_form() {
        // 1.6 M tuples over 2 nodes: each 0.8 M partition goes to 1 peer.
        assert_eq!(expected_send_volume(1_600_000, 2), 800_000.0);
        assert_eq!(expected_send_volume(1_600_000, 1), 0.0);
        // |R|(1-1/n) == (|R|/n)(n-1) for divisible sizes.
        for n in 2..=5u32 {
            let size = 50_000u64 * n as u64;
            let per_part = size / n as u64;
            assert_eq!(expected_send_volume(size, n), (per_part * (n as u64 - 1)) as f64);
        }
    }

    #[test]
    fn send_volume_strictly_increases_with_n() {
        let mut prev = expected_send_volume(1_000_000, 1);
        for n in 2..=10 {
            let cur = expected_send_volume(1_000_000, n);
            assert!(cur > prev);
            prev = cur;
        }
    }

    #[test]
    fn csv_row_field_count_matches_header() {
        let row = report(1, 2, 3, 4).csv_row();
        assert_eq!(row.split(',').count(), LoadReport::CSV_HEADER.split(',').count());
    }
}
