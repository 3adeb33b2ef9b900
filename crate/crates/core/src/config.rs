use crate::error::{Error, Result};

pub const TABLE_R: u32 = 0;
pub const TABLE_S: u32 = 1;

/// Table 1 defaults.
pub const DEFAULT_PARTITION_SIZE: u64 = 400_000;
pub const DEFAULT_DOMAIN: u64 = 800_000;
pub const DEFAULT_NUM_BUCKETS: u32 = 1200;
pub const DEFAULT_TUPLE_SIZE: u32 = 128;
pub const DEFAULT_PAGE_SIZE: usize = 8192;
pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeAddr {
    pub node_id: u32,
    pub ip: String,
    pub sport: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JoinMode {
    /// Every node ships its entire R partition to every peer; S never moves.
    /// Required for non-equality predicates.
    Broadcast,
    /// Each hash bucket is pinned to one owner node; nodes ship the R and S
    /// buckets pinned to each receiver. Valid for equality joins only.
    HashDistributed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Predicate {
    Equality,
    /// |r.key - s.key| <= width
    Band { width: u64 },
    /// r.key < s.key
    LessThan,
}

impl Predicate {
    pub fn matches(&self, r_key: u64, s_key: u64) -> bool {
        match self {
            Predicate::Equality => r_key == s_key,
            Predicate::Band { width } => r_key.abs_diff(s_key) <= *width,
            Predicate::LessThan => r_key < s_key,
        }
    }

    pub fn is_equality(&self) -> bool {
        matches!(self, Predicate::Equality)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResultFormat {
    /// Each result entry is (r_key, s_key, source_node): 20 bytes.
    Keys,
    /// Keys plus both payloads.
    FullPayloads,
}

/// Connection retry policy for ephemeral sockets. Defaults: 50 ms initial
/// backoff, doubling, at most 10 attempts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub initial_backoff_ms: u64,
    pub backoff_factor: u32,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { initial_backoff_ms: 50, backoff_factor: 2, max_attempts: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub nodes: Vec<NodeAddr>,
    pub sink_id: u32,
    pub n_compute: usize,
    pub n_send: usize,
    pub n_recv: usize,
    pub num_buckets: u32,
    pub partition_size_r: u64,
    pub partition_size_s: u64,
    pub domain: u64,
    pub tuple_size: u32,
    pub page_size: usize,
    /// Bytes available to the shared HTF pool of each node.
    pub pool_capacity: usize,
    pub join_mode: JoinMode,
    pub predicate: Predicate,
    pub result_format: ResultFormat,
    pub queue_capacity: usize,
    pub retry: RetryPolicy,
}

impl ClusterConfig {
    /// Single-node localhost config with Table 1 defaults.
    pub fn single_node() -> Self {
        ClusterConfig::localhost(1, 7400)
    }

    /// N nodes on 127.0.0.1 with consecutive server ports, Table 1 defaults.
    pub fn localhost(n: u32, base_port: u16) -> Self {
        let nodes = (0..n)
            .map(|i| NodeAddr {
                node_id: i,
                ip: "127.0.0.1".to_string(),
                sport: base_port + i as u16,
            })
            .collect();
        let part_bytes = DEFAULT_PARTITION_SIZE as usize * DEFAULT_TUPLE_SIZE as usize;
        ClusterConfig {
            nodes,
            sink_id: 0,
            n_compute: 2,
            n_send: 1,
            n_recv: 1,
            num_buckets: DEFAULT_NUM_BUCKETS,
            partition_size_r: DEFAULT_PARTITION_SIZE,
            partition_size_s: DEFAULT_PARTITION_SIZE,
            domain: DEFAULT_DOMAIN,
            tuple_size: DEFAULT_TUPLE_SIZE,
            page_size: DEFAULT_PAGE_SIZE,
            pool_capacity: 4 * part_bytes,
            join_mode: JoinMode::Broadcast,
            predicate: Predicate::Equality,
            result_format: ResultFormat::Keys,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            retry: RetryPolicy::default(),
        }
    }

    pub fn num_nodes(&self) -> u32 {
        self.nodes.len() as u32
    }

    pub fn addr(&self, node_id: u32) -> &NodeAddr {
        &self.nodes[node_id as usize]
    }

    pub fn is_sink(&self, node_id: u32) -> bool {
        node_id == self.sink_id
    }

    /// Default pool capacity: 4x the larger partition's byte size.
    pub fn default_pool_capacity(&self) -> usize {
        let tuples = self.partition_size_r.max(self.partition_size_s);
        4 * (tuples as usize) * (self.tuple_size as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Config("cluster needs at least one node".into()));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.node_id != i as u32 {
                return Err(Error::Config(format!(
                    "node ids must be 0..N-1 in order, found id {} at position {}",
                    n.node_id, i
                )));
            }
        }
        if self.sink_id >= self.num_nodes() {
            return Err(Error::Config(format!("sink_id {} is not a node", self.sink_id)));
        }
        if self.n_compute < 1 || self.n_send < 1 || self.n_recv < 1 {
            return Err(Error::Config("n_compute, n_send and n_recv must each be >= 1".into()));
        }
        if self.num_buckets < 1 {
            return Err(Error::Config("num_buckets must be >= 1".into()));
        }
        if self.num_buckets < self.num_nodes() && self.join_mode == JoinMode::HashDistributed {
            return Err(Error::Config("hash distribution needs num_buckets >= number of nodes".into()));
        }
        if self.tuple_size < 8 {
            return Err(Error::Config("tuple_size must be >= 8 (the key alone is 8 bytes)".into()));
        }
        if self.domain < 1 {
            return Err(Error::Config("domain must be >= 1".into()));
        }
        if self.join_mode == JoinMode::HashDistributed && !self.predicate.is_equality() {
            return Err(Error::Config(
                "hash distribution routes tuples by key hash, which is only sound for \
                 equality predicates; use broadcast mode for band or less-than joins"
                    .into(),
            ));
        }
        if self.page_size < self.entry_size() {
            return Err(Error::Config(format!(
                "page_size {} cannot hold a single {}-byte result entry",
                self.page_size,
                self.entry_size()
            )));
        }
        if self.queue_capacity < 1 {
            return Err(Error::Config("queue_capacity must be >= 1".into()));
        }
        if self.retry.max_attempts < 1 {
            return Err(Error::Config("retry.max_attempts must be >= 1".into()));
        }
        Ok(())
    }

    /// Byte size of one encoded result entry under the configured format.
    pub fn entry_size(&self) -> usize {
        match self.result_format {
            ResultFormat::Keys => 20,
            ResultFormat::FullPayloads => 20 + 2 * (self.tuple_size as usize - 8),
        }
    }
}

/// Bucket ownership for hash-distribution mode: bucket b belongs to node
/// b mod N. The N ownership sets partition [0, num_buckets) and their sizes
/// differ by at most one.
pub fn assign_buckets(node_id: u32, total_nodes: u32, num_buckets: u32) -> Vec<u32> {
    (0..num_buckets).filter(|b| b % total_nodes == node_id).collect()
}

/// Owner node of one bucket under hash distribution.
pub fn bucket_owner(bucket: u32, total_nodes: u32) -> u32 {
    bucket % total_nodes
}
