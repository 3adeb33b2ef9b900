//! `orchestrate`: execute every point of a manifest's sweep as real local
//! processes (one per node), collate their load reports and write
//! `summary.csv`. Remote daemons are coordinated, never launched: point a
//! manifest's `nodes` list at hosts the operator has started themselves.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use shardjoin_core::{Error, Result};

use crate::commands::gen::write_point_partitions;
use crate::commands::node::report_csv_path;
use crate::manifest::{render_node_config, Manifest, SweepPoint};

pub const SUMMARY_HEADER: &str = "sweep_value,node,compute_ns,send_ns,recv_ns,span_ns,gain,speedup";

struct SummaryRow {
    sweep_value: String,
    node: String,
    compute_ns: String,
    send_ns: String,
    recv_ns: String,
    span_ns: String,
    gain: String,
    speedup: String,
}

impl SummaryRow {
    fn failed(sweep_value: &str) -> Self {
        SummaryRow {
            sweep_value: sweep_value.into(),
            node: "failed".into(),
            compute_ns: String::new(),
            send_ns: String::new(),
            recv_ns: String::new(),
            span_ns: String::new(),
            gain: String::new(),
            speedup: String::new(),
        }
    }

    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.sweep_value,
            self.node,
            self.compute_ns,
            self.send_ns,
            self.recv_ns,
            self.span_ns,
            self.gain,
            self.speedup
        )
    }
}

/// Columns pulled back out of one node's report CSV.
struct NodeNumbers {
    node: String,
    compute_ns: String,
    send_ns: String,
    recv_ns: String,
    span_ns: u64,
    gain: String,
}

fn parse_report_csv(path: &Path) -> Result<NodeNumbers> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    let row = text
        .lines()
        .nth(1)
        .ok_or_else(|| Error::Format(format!("{}: no data row", path.display())))?;
    let cols: Vec<&str> = row.split(',').collect();
    if cols.len() != 15 {
        return Err(Error::Format(format!(
            "{}: expected 15 columns, found {}",
            path.display(),
            cols.len()
        )));
    }
    let span_ns: u64 = cols[4]
        .parse()
        .map_err(|_| Error::Format(format!("{}: span `{}` not a number", path.display(), cols[4])))?;
    Ok(NodeNumbers {
        node: cols[0].into(),
        compute_ns: cols[1].into(),
        send_ns: cols[2].into(),
        recv_ns: cols[3].into(),
        span_ns,
        gain: cols[14].into(),
    })
}

/// Outcome of one sweep point: per-node numbers, or a reason it failed.
enum PointOutcome {
    Ok { nodes: Vec<NodeNumbers>, point_span_ns: u64 },
    Failed(String),
}

fn reap(mut children: Vec<(u32, Child)>) {
    for (_, child) in children.iter_mut() {
        let _ = child.kill();
        let _ = child.wait();
    }
}

fn run_point(pt: &SweepPoint, engine: crate::manifest::Engine, timeout: Duration, dir: &Path) -> Result<PointOutcome> {
    std::fs::create_dir_all(dir)?;
    write_point_partitions(&pt.cfg, &pt.gen_r, &pt.gen_s, dir)?;
    let cfg_path = dir.join("node.kv");
    std::fs::write(&cfg_path, render_node_config(&pt.cfg, engine, dir, dir, timeout))?;

    let exe = std::env::current_exe()
        .map_err(|e| Error::Config(format!("cannot locate own executable: {e}")))?;
    let mut children: Vec<(u32, Child)> = Vec::new();
    for id in 0..pt.cfg.num_nodes() {
        let log = File::create(dir.join(format!("node_{id}.log")))?;
        let log_err = log.try_clone()?;
        let spawned = Command::new(&exe)
            .arg("node")
            .arg("--config")
            .arg(&cfg_path)
            .arg("--id")
            .arg(id.to_string())
            .stdin(Stdio::null())
            .stdout(log)
            .stderr(log_err)
            .spawn();
        match spawned {
            Ok(child) => children.push((id, child)),
            Err(e) => {
                reap(children);
                return Ok(PointOutcome::Failed(format!("spawning node {id} failed: {e}")));
            }
        }
    }

    // The nodes carry their own run timeout; the grace period covers report
    // writing and process teardown after it fires.
    let deadline = Instant::now() + timeout + Duration::from_secs(15);
    let mut statuses: Vec<Option<std::process::ExitStatus>> = vec![None; children.len()];
    let mut wait_err: Option<String> = None;
    loop {
        let mut all_done = true;
        for (i, (_, child)) in children.iter_mut().enumerate() {
            if statuses[i].is_none() {
                match child.try_wait() {
                    Ok(Some(st)) => statuses[i] = Some(st),
                    Ok(None) => all_done = false,
                    Err(e) => wait_err = Some(e.to_string()),
                }
            }
        }
        if let Some(e) = wait_err.take() {
            reap(children);
            return Ok(PointOutcome::Failed(format!("waiting on a node: {e}")));
        }
        if all_done {
            break;
        }
        if Instant::now() >= deadline {
            reap(children);
            return Ok(PointOutcome::Failed(format!(
                "nodes still running after {:?}; killed",
                timeout + Duration::from_secs(15)
            )));
        }
        std::thread::sleep(Duration::from_millis(50));
    }

    let bad: Vec<String> = children
        .iter()
        .zip(&statuses)
        .filter(|(_, st)| !st.map(|s| s.success()).unwrap_or(false))
        .map(|((id, _), st)| format!("node {id} exited {}", st.unwrap()))
        .collect();
    if !bad.is_empty() {
        return Ok(PointOutcome::Failed(format!(
            "{} (see node logs in {})",
            bad.join("; "),
            dir.display()
        )));
    }

    let mut nodes = Vec::new();
    let mut point_span_ns = 0u64;
    for id in 0..pt.cfg.num_nodes() {
        let numbers = parse_report_csv(&report_csv_path(dir, id))?;
        point_span_ns = point_span_ns.max(numbers.span_ns);
        nodes.push(numbers);
    }
    Ok(PointOutcome::Ok { nodes, point_span_ns })
}

pub fn summary_path(output_dir: &Path) -> PathBuf {
    output_dir.join("summary.csv")
}

pub fn cmd_orchestrate(manifest_path: &Path) -> Result<()> {
    let m = Manifest::load(manifest_path)?;
    let output_dir = m.output_dir.clone().ok_or_else(|| {
        Error::Config("orchestrate needs `output_dir` in the manifest".into())
    })?;
    std::fs::create_dir_all(&output_dir)?;
    let points = m.points()?;

    let mut rows: Vec<SummaryRow> = Vec::new();
    let mut failures = 0usize;
    // Speedup is relative to the first sweep point's cluster span (for a
    // nodes sweep starting at 1 that is the single-node span).
    let mut base_span_ns: Option<u64> = None;
    for pt in &points {
        let dir = output_dir.join(&pt.label);
        println!(
            "orchestrate: {} ({} nodes, {}+{} tuples per node) in {}",
            pt.label,
            pt.cfg.num_nodes(),
            pt.cfg.partition_size_r,
            pt.cfg.partition_size_s,
            dir.display()
        );
        let started = Instant::now();
        match run_point(pt, m.engine, m.run_timeout, &dir)? {
            PointOutcome::Ok { nodes, point_span_ns } => {
                if base_span_ns.is_none() {
                    base_span_ns = Some(point_span_ns);
                }
                let speedup = base_span_ns
                    .filter(|_| point_span_ns > 0)
                    .map(|b| format!("{:.4}", b as f64 / point_span_ns as f64))
                    .unwrap_or_default();
                for n in nodes {
                    rows.push(SummaryRow {
                        sweep_value: pt.sweep_value.clone(),
                        node: n.node,
                        compute_ns: n.compute_ns,
                        send_ns: n.send_ns,
                        recv_ns: n.recv_ns,
                        span_ns: n.span_ns.to_string(),
                        gain: n.gain,
                        speedup: speedup.clone(),
                    });
                }
                println!(
                    "orchestrate: {} ok in {:.1}s (cluster span {:.3}s)",
                    pt.label,
                    started.elapsed().as_secs_f64(),
                    point_span_ns as f64 / 1e9
                );
            }
            PointOutcome::Failed(why) => {
                failures += 1;
                rows.push(SummaryRow::failed(&pt.sweep_value));
                eprintln!("orchestrate: {} FAILED: {why}", pt.label);
            }
        }
    }

    let mut csv = String::from(SUMMARY_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.csv());
        csv.push('\n');
    }
    let out = summary_path(&output_dir);
    std::fs::write(&out, csv)?;
    println!(
        "orchestrate: {} of {} runs ok, summary in {}",
        points.len() - failures,
        points.len(),
        out.display()
    );
    if failures > 0 {
        return Err(Error::Aborted(format!("{failures} of {} runs failed", points.len())));
    }
    Ok(())
}
