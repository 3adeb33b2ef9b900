use crate::error::{Error, Result};
use crate::model::hash::{hash_key, mix64};

/// Packed tuple storage: each tuple is `tuple_size` bytes, a little-endian
/// u64 key followed by an opaque payload. Buckets, partitions and wire frames
/// all use this layout, so hand-offs are plain byte moves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TupleBuf {
    tuple_size: usize,
    data: Vec<u8>,
}

impl TupleBuf {
    pub fn new(tuple_size: u32) -> Self {
        assert!(tuple_size >= 8);
        TupleBuf { tuple_size: tuple_size as usize, data: Vec::new() }
    }

    pub fn with_capacity(tuple_size: u32, tuples: usize) -> Self {
        assert!(tuple_size >= 8);
        TupleBuf { tuple_size: tuple_size as usize, data: Vec::with_capacity(tuples * tuple_size as usize) }
    }

    /// Wraps raw packed bytes. Length must be a whole number of tuples.
    pub fn from_bytes(tuple_size: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() % tuple_size as usize != 0 {
            return Err(Error::Format(format!(
                "buffer of {} bytes is not a whole number of {}-byte tuples",
                data.len(),
                tuple_size
            )));
        }
        Ok(TupleBuf { tuple_size: tuple_size as usize, data })
    }

    pub fn tuple_size(&self) -> usize {
        self.tuple_size
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.tuple_size
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn byte_len(&self) -> usize {
        self.data.len()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn key(&self, i: usize) -> u64 {
        let off = i * self.tuple_size;
        u64::from_le_bytes(self.data[off..off + 8].try_into().unwrap())
    }

    pub fn payload(&self, i: usize) -> &[u8] {
        let off = i * self.tuple_size;
        &self.data[off + 8..off + self.tuple_size]
    }

    pub fn push(&mut self, key: u64, payload: &[u8]) {
        assert_eq!(payload.len(), self.tuple_size - 8);
        self.data.extend_from_slice(&key.to_le_bytes());
        self.data.extend_from_slice(payload);
    }

    /// Appends a tuple whose payload is derived from the key (the generator's
    /// convention), avoiding a temporary buffer.
    pub fn push_keyed(&mut self, key: u64) {
        self.data.extend_from_slice(&key.to_le_bytes());
        let start = self.data.len();
        self.data.resize(start + self.tuple_size - 8, 0);
        fill_payload(key, &mut self.data[start..]);
    }

    pub fn keys(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.len()).map(move |i| self.key(i))
    }
}

/// Deterministic payload pattern for a key: the mixed key's little-endian
/// bytes repeated. Lets any reader verify payload integrity from the key.
pub fn fill_payload(key: u64, buf: &mut [u8]) {
    let pat = mix64(key).to_le_bytes();
    for (i, b) in buf.iter_mut().enumerate() {
        *b = pat[i % 8];
    }
}

pub fn payload_for(key: u64, tuple_size: u32) -> Vec<u8> {
    let mut v = vec![0u8; tuple_size as usize - 8];
    fill_payload(key, &mut v);
    v
}

/// One relation partition held at a node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub table_id: u32,
    pub node_id: u32,
    pub domain: u64,
    pub tuples: TupleBuf,
}

impl Partition {
    pub fn tuple_size(&self) -> u32 {
        self.tuples.tuple_size() as u32
    }
}

/// A partition hashed into `num_buckets` chains. Read-only after build.
#[derive(Debug, Clone)]
pub struct HashTable {
    pub table_id: u32,
    pub num_buckets: u32,
    pub buckets: Vec<TupleBuf>,
    pub tuple_count: usize,
}

pub fn build_hash_table(partition: &Partition, num_buckets: u32) -> HashTable {
    let ts = partition.tuple_size();
    let mut buckets: Vec<TupleBuf> = (0..num_buckets).map(|_| TupleBuf::new(ts)).collect();
    let src = &partition.tuples;
    for i in 0..src.len() {
        let key = src.key(i);
        let b = hash_key(key, num_buckets) as usize;
        buckets[b].push(key, src.payload(i));
    }
    HashTable { table_id: partition.table_id, num_buckets, buckets, tuple_count: src.len() }
}
