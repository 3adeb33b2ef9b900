//! Typed views over the key-value grammar: the cluster layout shared by
//! every file kind, per-node run configs, and run manifests with their
//! sweep expansion.
//!
//! Cluster keys (all files):
//!   nodes = 127.0.0.1:7400, 127.0.0.1:7401   explicit layout, node i is entry i
//!   node_count = 2                            or: localhost layout of N nodes
//!   base_port = 7400                          first port of the localhost layout
//!   sink = 0
//!   mode = broadcast | hash
//!   predicate = equality | band:<width> | less-than
//!   result = keys | full
//!   compute_threads / send_threads / recv_threads
//!   num_buckets, partition_r, partition_s, domain, tuple_size, page_size,
//!   pool_capacity, queue_capacity, retry_backoff_ms, retry_factor, retry_attempts
//!
//! Node-config keys (`node` subcommand): data_dir, out_dir, engine, run_timeout_s.
//!
//! Manifest keys (`gen`, `orchestrate`, `simulate`): engine, output_dir,
//! run_timeout_s, sweep, sweep_values, sim_mode, gen.seed, gen.dist,
//! gen.dist_r, gen.dist_s, gen.tuples_total.

use std::path::{Path, PathBuf};
use std::time::Duration;

use shardjoin_core::config::{NodeAddr, RetryPolicy};
use shardjoin_core::workload::{GenSpec, KeyDist};
use shardjoin_core::{ClusterConfig, Error, JoinMode, Predicate, Result, ResultFormat};

use crate::kv::KvFile;

/// Port distance between sweep points of one auto localhost layout, so a
/// fresh run never has to rebind a port the previous run's sockets may
/// still hold in TIME_WAIT.
const PORT_STRIDE: u16 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Engine {
    BarrierFree,
    BarrierBaseline,
}

impl Engine {
    pub fn as_str(&self) -> &'static str {
        match self {
            Engine::BarrierFree => "barrier-free",
            Engine::BarrierBaseline => "barrier-baseline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    TableSize,
    Nodes,
    ComputeThreads,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::TableSize => "table_size",
            SweepAxis::Nodes => "nodes",
            SweepAxis::ComputeThreads => "compute_threads",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimModeKey {
    Det,
    Free,
}

/// Cluster layout plus which defaults were left implicit; sweep expansion
/// needs to know those to recompute them per point.
#[derive(Debug)]
struct ClusterKeys {
    cfg: ClusterConfig,
    auto_ports: bool,
    base_port: u16,
    pool_explicit: bool,
}

fn parse_addr(kv: &KvFile, raw: &str) -> Result<(String, u16)> {
    let (ip, port) = raw
        .rsplit_once(':')
        .ok_or_else(|| kv.err("nodes", &format!("`{raw}` is not ip:port")))?;
    let port: u16 = port
        .parse()
        .map_err(|_| kv.err("nodes", &format!("`{port}` is not a port number")))?;
    if ip.is_empty() {
        return Err(kv.err("nodes", &format!("`{raw}` has an empty ip")));
    }
    Ok((ip.to_string(), port))
}

fn parse_predicate(kv: &KvFile) -> Result<Predicate> {
    let raw = kv.str_or("predicate", "equality");
    if raw == "equality" {
        Ok(Predicate::Equality)
    } else if raw == "less-than" {
        Ok(Predicate::LessThan)
    } else if let Some(w) = raw.strip_prefix("band:") {
        let width = w
            .trim()
            .parse()
            .map_err(|_| kv.err("predicate", &format!("band width `{w}` is not an integer")))?;
        Ok(Predicate::Band { width })
    } else {
        Err(kv.err("predicate", &format!("`{raw}`: want equality, band:<width> or less-than")))
    }
}

pub fn predicate_str(p: &Predicate) -> String {
    match p {
        Predicate::Equality => "equality".into(),
        Predicate::Band { width } => format!("band:{width}"),
        Predicate::LessThan => "less-than".into(),
    }
}

fn parse_dist(kv: &KvFile, key: &str, raw: &str) -> Result<KeyDist> {
    if raw == "uniform" {
        return Ok(KeyDist::Uniform);
    }
    if let Some(t) = raw.strip_prefix("zipf:") {
        let theta = t
            .trim()
            .parse()
            .map_err(|_| kv.err(key, &format!("zipf exponent `{t}` is not a number")))?;
        return Ok(KeyDist::Zipf { theta });
    }
    if let Some(rest) = raw.strip_prefix("locality:") {
        if let Some((b, p)) = rest.split_once(':') {
            let block_size = b
                .trim()
                .parse()
                .map_err(|_| kv.err(key, &format!("block size `{b}` is not an integer")))?;
            let p_stay: f64 = p
                .trim()
                .parse()
                .map_err(|_| kv.err(key, &format!("stay probability `{p}` is not a number")))?;
            return Ok(KeyDist::Locality { block_size, p_stay });
        }
    }
    Err(kv.err(key, &format!("`{raw}`: want uniform, zipf:<theta> or locality:<block>:<p_stay>")))
}

fn parse_cluster(kv: &KvFile) -> Result<ClusterKeys> {
    let explicit = kv.list("nodes");
    let count = kv.u64_opt("node_count")?;
    let base_port = kv.u32_or("base_port", 7400)? as u16;
    let (nodes, auto_ports) = match (explicit, count) {
        (Some(_), Some(_)) => {
            return Err(kv.err("nodes", "give either `nodes` or `node_count`, not both"))
        }
        (None, None) => {
            return Err(kv.err("nodes", "cluster layout missing: set `nodes` or `node_count`"))
        }
        (Some(list), None) => {
            if list.is_empty() {
                return Err(kv.err("nodes", "empty node list"));
            }
            let mut nodes = Vec::with_capacity(list.len());
            for (i, raw) in list.iter().enumerate() {
                let (ip, sport) = parse_addr(kv, raw)?;
                nodes.push(NodeAddr { node_id: i as u32, ip, sport });
            }
            (nodes, false)
        }
        (None, Some(n)) => {
            if n == 0 {
                return Err(kv.err("node_count", "must be >= 1"));
            }
            let nodes = (0..n as u32)
                .map(|i| NodeAddr {
                    node_id: i,
                    ip: "127.0.0.1".into(),
                    sport: base_port + i as u16,
                })
                .collect();
            (nodes, true)
        }
    };

    let mode = match kv.str_or("mode", "broadcast").as_str() {
        "broadcast" => JoinMode::Broadcast,
        "hash" => JoinMode::HashDistributed,
        other => return Err(kv.err("mode", &format!("`{other}`: want broadcast or hash"))),
    };
    let result_format = match kv.str_or("result", "keys").as_str() {
        "keys" => ResultFormat::Keys,
        "full" => ResultFormat::FullPayloads,
        other => return Err(kv.err("result", &format!("`{other}`: want keys or full"))),
    };

    let mut cfg = ClusterConfig::localhost(1, base_port);
    cfg.nodes = nodes;
    cfg.sink_id = kv.u32_or("sink", 0)?;
    cfg.join_mode = mode;
    cfg.predicate = parse_predicate(kv)?;
    cfg.result_format = result_format;
    cfg.n_compute = kv.usize_or("compute_threads", 2)?;
    cfg.n_send = kv.usize_or("send_threads", 1)?;
    cfg.n_recv = kv.usize_or("recv_threads", 1)?;
    cfg.num_buckets = kv.u32_or("num_buckets", shardjoin_core::config::DEFAULT_NUM_BUCKETS)?;
    cfg.partition_size_r =
        kv.u64_or("partition_r", shardjoin_core::config::DEFAULT_PARTITION_SIZE)?;
    cfg.partition_size_s =
        kv.u64_or("partition_s", shardjoin_core::config::DEFAULT_PARTITION_SIZE)?;
    cfg.domain = kv.u64_or("domain", shardjoin_core::config::DEFAULT_DOMAIN)?;
    cfg.tuple_size = kv.u32_or("tuple_size", shardjoin_core::config::DEFAULT_TUPLE_SIZE)?;
    cfg.page_size = kv.usize_or("page_size", shardjoin_core::config::DEFAULT_PAGE_SIZE)?;
    cfg.queue_capacity =
        kv.usize_or("queue_capacity", shardjoin_core::config::DEFAULT_QUEUE_CAPACITY)?;
    cfg.retry = RetryPolicy {
        initial_backoff_ms: kv.u64_or("retry_backoff_ms", 50)?,
        backoff_factor: kv.u32_or("retry_factor", 2)?,
        max_attempts: kv.u32_or("retry_attempts", 10)?,
    };
    let pool = kv.u64_opt("pool_capacity")?;
    let pool_explicit = pool.is_some();
    cfg.pool_capacity = match pool {
        Some(p) => p as usize,
        None => cfg.default_pool_capacity(),
    };
    Ok(ClusterKeys { cfg, auto_ports, base_port, pool_explicit })
}

fn parse_engine(kv: &KvFile) -> Result<Engine> {
    match kv.str_or("engine", "barrier-free").as_str() {
        "barrier-free" => Ok(Engine::BarrierFree),
        "barrier-baseline" => Ok(Engine::BarrierBaseline),
        other => {
            Err(kv.err("engine", &format!("`{other}`: want barrier-free or barrier-baseline")))
        }
    }
}

fn run_timeout(kv: &KvFile) -> Result<Duration> {
    Ok(Duration::from_secs(kv.u64_or("run_timeout_s", 120)?))
}

/// Config for one `node` daemon process.
#[derive(Debug)]
pub struct NodeConfig {
    pub cfg: ClusterConfig,
    pub engine: Engine,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub run_timeout: Duration,
}

impl NodeConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let kv = KvFile::load(path)?;
        let keys = parse_cluster(&kv)?;
        let engine = parse_engine(&kv)?;
        let data_dir = PathBuf::from(kv.require("data_dir")?);
        let out_dir = PathBuf::from(kv.str_or("out_dir", &data_dir.display().to_string()));
        let timeout = run_timeout(&kv)?;
        kv.finish()?;
        keys.cfg.validate()?;
        Ok(NodeConfig { cfg: keys.cfg, engine, data_dir, out_dir, run_timeout: timeout })
    }
}

/// Render a node config file that parses back to exactly this cluster.
pub fn render_node_config(
    cfg: &ClusterConfig,
    engine: Engine,
    data_dir: &Path,
    out_dir: &Path,
    run_timeout: Duration,
) -> String {
    let nodes: Vec<String> =
        cfg.nodes.iter().map(|n| format!("{}:{}", n.ip, n.sport)).collect();
    let mode = match cfg.join_mode {
        JoinMode::Broadcast => "broadcast",
        JoinMode::HashDistributed => "hash",
    };
    let result = match cfg.result_format {
        ResultFormat::Keys => "keys",
        ResultFormat::FullPayloads => "full",
    };
    format!(
        "nodes = {}\n\
         sink = {}\n\
         mode = {mode}\n\
         predicate = {}\n\
         result = {result}\n\
         compute_threads = {}\n\
         send_threads = {}\n\
         recv_threads = {}\n\
         num_buckets = {}\n\
         partition_r = {}\n\
         partition_s = {}\n\
         domain = {}\n\
         tuple_size = {}\n\
         page_size = {}\n\
         pool_capacity = {}\n\
         queue_capacity = {}\n\
         retry_backoff_ms = {}\n\
         retry_factor = {}\n\
         retry_attempts = {}\n\
         engine = {}\n\
         data_dir = {}\n\
         out_dir = {}\n\
         run_timeout_s = {}\n",
        nodes.join(", "),
        cfg.sink_id,
        predicate_str(&cfg.predicate),
        cfg.n_compute,
        cfg.n_send,
        cfg.n_recv,
        cfg.num_buckets,
        cfg.partition_size_r,
        cfg.partition_size_s,
        cfg.domain,
        cfg.tuple_size,
        cfg.page_size,
        cfg.pool_capacity,
        cfg.queue_capacity,
        cfg.retry.initial_backoff_ms,
        cfg.retry.backoff_factor,
        cfg.retry.max_attempts,
        engine.as_str(),
        data_dir.display(),
        out_dir.display(),
        run_timeout.as_secs(),
    )
}

/// A whole experiment: base cluster, generator settings, engine choice and
/// an optional sweep.
#[derive(Debug)]
pub struct Manifest {
    base: ClusterKeys,
    pub engine: Engine,
    pub sweep: Option<(SweepAxis, Vec<u64>)>,
    pub output_dir: Option<PathBuf>,
    pub gen_seed: u64,
    pub dist_r: KeyDist,
    pub dist_s: KeyDist,
    pub tuples_total: Option<u64>,
    pub run_timeout: Duration,
    pub sim_mode: Option<SimModeKey>,
}

/// One run of a manifest: a concrete cluster and both generator specs.
#[derive(Debug)]
pub struct SweepPoint {
    /// Directory-safe name: `single` or `<axis>_<value>`.
    pub label: String,
    /// Value written to the summary's sweep_value column.
    pub sweep_value: String,
    pub cfg: ClusterConfig,
    pub gen_r: GenSpec,
    pub gen_s: GenSpec,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let kv = KvFile::load(path)?;
        let base = parse_cluster(&kv)?;
        let engine = parse_engine(&kv)?;
        let output_dir = kv.get("output_dir").map(PathBuf::from);
        let timeout = run_timeout(&kv)?;

        let sweep = match kv.get("sweep") {
            None => {
                if kv.get("sweep_values").is_some() {
                    return Err(kv.err("sweep_values", "given without a `sweep` axis"));
                }
                None
            }
            Some(axis_raw) => {
                let axis = match axis_raw {
                    "table_size" => SweepAxis::TableSize,
                    "nodes" => SweepAxis::Nodes,
                    "compute_threads" => SweepAxis::ComputeThreads,
                    other => {
                        return Err(kv.err(
                            "sweep",
                            &format!(
                                "`{other}`: want table_size, nodes or compute_threads"
                            ),
                        ))
                    }
                };
                let raw_values = kv
                    .list("sweep_values")
                    .ok_or_else(|| kv.err("sweep_values", "required when `sweep` is set"))?;
                if raw_values.is_empty() {
                    return Err(kv.err("sweep_values", "empty value list"));
                }
                let mut values = Vec::with_capacity(raw_values.len());
                for v in &raw_values {
                    values.push(v.parse::<u64>().map_err(|_| {
                        kv.err("sweep_values", &format!("`{v}` is not an unsigned integer"))
                    })?);
                }
                Some((axis, values))
            }
        };

        let gen_seed = kv.u64_or("gen.seed", 1)?;
        let shared = kv.str_or("gen.dist", "uniform");
        let dist_r = match kv.get("gen.dist_r") {
            Some(raw) => parse_dist(&kv, "gen.dist_r", &raw.to_string())?,
            None => parse_dist(&kv, "gen.dist", &shared)?,
        };
        let dist_s = match kv.get("gen.dist_s") {
            Some(raw) => parse_dist(&kv, "gen.dist_s", &raw.to_string())?,
            None => parse_dist(&kv, "gen.dist", &shared)?,
        };
        let tuples_total = kv.u64_opt("gen.tuples_total")?;

        let sim_mode = match kv.get("sim_mode") {
            None => None,
            Some("det") => Some(SimModeKey::Det),
            Some("free") => Some(SimModeKey::Free),
            Some(other) => return Err(kv.err("sim_mode", &format!("`{other}`: want det or free"))),
        };

        kv.finish()?;
        base.cfg.validate()?;
        Ok(Manifest {
            base,
            engine,
            sweep,
            output_dir,
            gen_seed,
            dist_r,
            dist_s,
            tuples_total,
            run_timeout: timeout,
            sim_mode,
        })
    }

    pub fn base_cfg(&self) -> &ClusterConfig {
        &self.base.cfg
    }

    fn gen_for(&self, cfg: &ClusterConfig) -> (GenSpec, GenSpec) {
        let gen_r = GenSpec {
            seed: self.gen_seed,
            tuples_per_partition: cfg.partition_size_r,
            domain: cfg.domain,
            tuple_size: cfg.tuple_size,
            distribution: self.dist_r.clone(),
        };
        let gen_s = GenSpec {
            tuples_per_partition: cfg.partition_size_s,
            distribution: self.dist_s.clone(),
            ..gen_r.clone()
        };
        (gen_r, gen_s)
    }

    /// A point's cluster, re-deriving the defaults that depend on swept
    /// values (localhost ports, pool capacity).
    fn point_cfg(&self, idx: usize, nodes: u32, value: Option<(SweepAxis, u64)>) -> Result<ClusterConfig> {
        let mut cfg = self.base.cfg.clone();
        if self.base.auto_ports {
            let base = self.base.base_port + (idx as u16) * PORT_STRIDE;
            cfg.nodes = (0..nodes)
                .map(|i| NodeAddr { node_id: i, ip: "127.0.0.1".into(), sport: base + i as u16 })
                .collect();
        } else if nodes != self.base.cfg.num_nodes() {
            let have = self.base.cfg.num_nodes();
            if nodes > have {
                return Err(Error::Config(format!(
                    "sweep point needs {nodes} nodes but the manifest lists only {have}"
                )));
            }
            cfg.nodes.truncate(nodes as usize);
        }
        match value {
            Some((SweepAxis::TableSize, v)) => {
                cfg.partition_size_r = v;
                cfg.partition_size_s = v;
            }
            Some((SweepAxis::ComputeThreads, v)) => {
                cfg.n_compute = v as usize;
            }
            Some((SweepAxis::Nodes, v)) => {
                let total = self.tuples_total.ok_or_else(|| {
                    Error::Config(
                        "a nodes sweep splits a fixed total: set `gen.tuples_total`".into(),
                    )
                })?;
                if total % v != 0 {
                    return Err(Error::Config(format!(
                        "gen.tuples_total = {total} does not split evenly over {v} nodes"
                    )));
                }
                cfg.partition_size_r = total / v;
                cfg.partition_size_s = total / v;
            }
            None => {}
        }
        if !self.base.pool_explicit {
            cfg.pool_capacity = cfg.default_pool_capacity();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Expand the sweep (or the single configured run) into concrete points.
    pub fn points(&self) -> Result<Vec<SweepPoint>> {
        let mut out = Vec::new();
        match &self.sweep {
            None => {
                let cfg = self.point_cfg(0, self.base.cfg.num_nodes(), None)?;
                let (gen_r, gen_s) = self.gen_for(&cfg);
                out.push(SweepPoint {
                    label: "single".into(),
                    sweep_value: "-".into(),
                    cfg,
                    gen_r,
                    gen_s,
                });
            }
            Some((axis, values)) => {
                for (idx, &v) in values.iter().enumerate() {
                    let nodes = match axis {
                        SweepAxis::Nodes => {
                            if v == 0 {
                                return Err(Error::Config("a cluster of 0 nodes".into()));
                            }
                            v as u32
                        }
                        _ => self.base.cfg.num_nodes(),
                    };
                    let cfg = self.point_cfg(idx, nodes, Some((*axis, v)))?;
                    let (gen_r, gen_s) = self.gen_for(&cfg);
                    out.push(SweepPoint {
                        label: format!("{}_{v}", axis.as_str()),
                        sweep_value: v.to_string(),
                        cfg,
                        gen_r,
                        gen_s,
                    });
                }
            }
        }
        Ok(out)
    }
}
