//! `node`: run one cluster member to completion against real TCP peers,
//! then write its load report (and, at the sink, the collected results).

use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Arc;

use shardjoin_core::baseline::{run_node_barrier, BaselineStop};
use shardjoin_core::config::{TABLE_R, TABLE_S};
use shardjoin_core::metrics::LoadReport;
use shardjoin_core::model::tuple::Partition;
use shardjoin_core::runtime::{run_node, InjectedDelays, NodeOutcome, StopHandle};
use shardjoin_core::sync::Clock;
use shardjoin_core::trace::TraceRecorder;
use shardjoin_core::transport::TcpTransport;
use shardjoin_core::workload::{partition_file_name, read_partition};
use shardjoin_core::{Error, Result};

use crate::manifest::{Engine, NodeConfig};
use crate::resfile::write_results;

fn load_node_partition(nc: &NodeConfig, table_id: u32, node_id: u32) -> Result<Partition> {
    let path = nc.data_dir.join(partition_file_name(table_id, node_id));
    if !path.exists() {
        return Err(Error::Config(format!(
            "partition file {} missing; generate it first with `shardjoin gen`",
            path.display()
        )));
    }
    let part = read_partition(&path)?;
    if part.tuple_size() != nc.cfg.tuple_size {
        return Err(Error::Config(format!(
            "{}: tuple size {} does not match the configured {}",
            path.display(),
            part.tuple_size(),
            nc.cfg.tuple_size
        )));
    }
    if part.node_id != node_id || part.table_id != table_id {
        return Err(Error::Config(format!(
            "{}: file holds table {} node {}, expected table {table_id} node {node_id}",
            path.display(),
            part.table_id,
            part.node_id
        )));
    }
    Ok(part)
}

/// Run the configured engine on a worker thread, tearing the node down if
/// it exceeds the configured timeout (a vanished peer leaves threads
/// blocked in accept otherwise).
fn run_with_timeout(nc: &NodeConfig, id: u32, r: Partition, s: Partition) -> Result<NodeOutcome> {
    let cfg = nc.cfg.clone();
    let engine = nc.engine;
    let timeout = nc.run_timeout;
    let free_stop = StopHandle::new();
    let barrier_stop = BaselineStop::new();
    let (tx, rx) = mpsc::channel();
    let worker = {
        let cfg = cfg.clone();
        let free_stop = free_stop.clone();
        let barrier_stop = barrier_stop.clone();
        std::thread::Builder::new()
            .name(format!("n{id}:run"))
            .spawn(move || {
                let transport: Arc<dyn shardjoin_core::transport::Transport> =
                    Arc::new(TcpTransport);
                let clock = Clock::real();
                let res = match engine {
                    Engine::BarrierFree => run_node(
                        &cfg,
                        id,
                        &r,
                        &s,
                        transport,
                        clock.clone(),
                        TraceRecorder::disabled(clock),
                        None,
                        InjectedDelays::default(),
                        Some(&free_stop),
                    ),
                    Engine::BarrierBaseline => run_node_barrier(
                        &cfg,
                        id,
                        &r,
                        &s,
                        transport,
                        clock.clone(),
                        TraceRecorder::disabled(clock),
                        InjectedDelays::default(),
                        Some(&barrier_stop),
                    ),
                };
                let _ = tx.send(res);
            })
            .expect("spawn node worker")
    };

    let outcome = match rx.recv_timeout(timeout) {
        Ok(res) => res,
        Err(mpsc::RecvTimeoutError::Timeout) => {
            free_stop.stop("node run timed out");
            barrier_stop.stop();
            // The stop handles unwind every blocked thread; collect the
            // (now failing) run so the worker does not outlive us.
            let _ = rx.recv();
            Err(Error::Transport(format!(
                "node {id} did not finish within {timeout:?}; a peer is missing or stuck"
            )))
        }
        Err(mpsc::RecvTimeoutError::Disconnected) => {
            Err(Error::Protocol(format!("node {id} worker thread died")))
        }
    };
    worker.join().map_err(|_| Error::Protocol(format!("node {id} worker thread panicked")))?;
    outcome
}

fn write_report_csv(path: &Path, report: &LoadReport) -> Result<()> {
    std::fs::write(path, format!("{}\n{}\n", LoadReport::CSV_HEADER, report.csv_row()))?;
    Ok(())
}

pub fn report_csv_path(out_dir: &Path, id: u32) -> PathBuf {
    out_dir.join(format!("node_{id}.csv"))
}

pub fn results_path(out_dir: &Path) -> PathBuf {
    out_dir.join("results.bin")
}

pub fn cmd_node(config_path: &Path, id: u32) -> Result<()> {
    let nc = NodeConfig::load(config_path)?;
    if id >= nc.cfg.num_nodes() {
        return Err(Error::Config(format!(
            "--id {id} is not a node of this {}-node cluster",
            nc.cfg.num_nodes()
        )));
    }
    let r = load_node_partition(&nc, TABLE_R, id)?;
    let s = load_node_partition(&nc, TABLE_S, id)?;
    if r.domain != nc.cfg.domain {
        log::warn!(
            "partition domain {} differs from configured domain {}",
            r.domain,
            nc.cfg.domain
        );
    }

    let started = std::time::Instant::now();
    let outcome = run_with_timeout(&nc, id, r, s)?;

    std::fs::create_dir_all(&nc.out_dir)?;
    write_report_csv(&report_csv_path(&nc.out_dir, id), &outcome.report)?;
    let mut line = format!(
        "node {id}: span {:.3}s, {} result entries",
        outcome.report.join_span_ns as f64 / 1e9,
        outcome.report.result_entries,
    );
    if let Some(blocks) = &outcome.sink_blocks {
        let written = write_results(
            &results_path(&nc.out_dir),
            nc.cfg.result_format,
            nc.cfg.tuple_size,
            blocks,
        )?;
        line.push_str(&format!(
            ", sink collected {written} entries (cluster span {:.3}s)",
            outcome.cluster_span_ns.unwrap_or(0) as f64 / 1e9
        ));
    }
    println!("{line} [{:.3}s wall]", started.elapsed().as_secs_f64());
    Ok(())
}
