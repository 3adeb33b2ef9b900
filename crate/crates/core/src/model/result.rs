//! Join output: fixed-size encoded entries packed into page-sized blocks.
//! Each compute thread fills a private buffer and merges it into the node's
//! shared list when it finishes; remote blocks land in the same list at the
//! sink.

use crate::config::ResultFormat;
use crate::error::{Error, Result};
use crate::sync::{Monitor, SchedHandle};

/// One decoded output row. Payload fields are empty in key-only format.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ResultEntry {
    pub r_key: u64,
    pub s_key: u64,
    pub source: u32,
    pub r_payload: Vec<u8>,
    pub s_payload: Vec<u8>,
}

/// Fixed-size entry encoding: r_key, s_key (little-endian u64), source
/// (little-endian u32), then in full-payload format both payloads in R, S
/// order.
#[derive(Debug, Clone, Copy)]
pub struct EntryCodec {
    pub format: ResultFormat,
    pub tuple_size: u32,
}

impl EntryCodec {
    pub fn new(format: ResultFormat, tuple_size: u32) -> Self {
        EntryCodec { format, tuple_size }
    }

    pub fn payload_len(&self) -> usize {
        self.tuple_size as usize - 8
    }

    pub fn entry_size(&self) -> usize {
        match self.format {
            ResultFormat::Keys => 20,
            ResultFormat::FullPayloads => 20 + 2 * self.payload_len(),
        }
    }

    pub fn encode_into(
        &self,
        out: &mut Vec<u8>,
        r_key: u64,
        s_key: u64,
        source: u32,
        r_payload: &[u8],
        s_payload: &[u8],
    ) {
        out.extend_from_slice(&r_key.to_le_bytes());
        out.extend_from_slice(&s_key.to_le_bytes());
        out.extend_from_slice(&source.to_le_bytes());
        if matches!(self.format, ResultFormat::FullPayloads) {
            debug_assert_eq!(r_payload.len(), self.payload_len());
            debug_assert_eq!(s_payload.len(), self.payload_len());
            out.extend_from_slice(r_payload);
            out.extend_from_slice(s_payload);
        }
    }

    pub fn decode_at(&self, data: &[u8], offset: usize) -> Result<ResultEntry> {
        let sz = self.entry_size();
        let end = offset + sz;
        if end > data.len() {
            return Err(Error::Format(format!(
                "truncated result entry at offset {offset} (need {sz} bytes, have {})",
                data.len() - offset
            )));
        }
        let b = &data[offset..end];
        let r_key = u64::from_le_bytes(b[0..8].try_into().unwrap());
        let s_key = u64::from_le_bytes(b[8..16].try_into().unwrap());
        let source = u32::from_le_bytes(b[16..20].try_into().unwrap());
        let (r_payload, s_payload) = match self.format {
            ResultFormat::Keys => (Vec::new(), Vec::new()),
            ResultFormat::FullPayloads => {
                let pl = self.payload_len();
                (b[20..20 + pl].to_vec(), b[20 + pl..20 + 2 * pl].to_vec())
            }
        };
        Ok(ResultEntry { r_key, s_key, source, r_payload, s_payload })
    }
}

/// A packed run of whole entries, never longer than the configured page size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultBlock {
    pub data: Vec<u8>,
    pub entries: u32,
}

impl ResultBlock {
    pub fn decode(&self, codec: &EntryCodec) -> Result<Vec<ResultEntry>> {
        let sz = codec.entry_size();
        if self.data.len() != sz * self.entries as usize {
            return Err(Error::Format(format!(
                "block length {} does not match {} entries of {} bytes",
                self.data.len(),
                self.entries,
                sz
            )));
        }
        (0..self.entries as usize).map(|i| codec.decode_at(&self.data, i * sz)).collect()
    }
}

/// Per-thread output accumulator. Entries pack into the current block until
/// another whole entry would overflow the page, then the block is sealed.
pub struct LocalBuffer {
    codec: EntryCodec,
    page: usize,
    sealed: Vec<ResultBlock>,
    cur: Vec<u8>,
    cur_entries: u32,
    total: u64,
}

impl LocalBuffer {
    pub fn new(codec: EntryCodec, page: usize) -> Self {
        assert!(page >= codec.entry_size(), "page smaller than one entry");
        LocalBuffer { codec, page, sealed: Vec::new(), cur: Vec::new(), cur_entries: 0, total: 0 }
    }

    pub fn push(&mut self, r_key: u64, s_key: u64, source: u32, r_payload: &[u8], s_payload: &[u8]) {
        if self.cur.len() + self.codec.entry_size() > self.page {
            self.seal();
        }
        self.codec.encode_into(&mut self.cur, r_key, s_key, source, r_payload, s_payload);
        self.cur_entries += 1;
        self.total += 1;
    }

    fn seal(&mut self) {
        if self.cur_entries > 0 {
            let data = std::mem::take(&mut self.cur);
            self.sealed.push(ResultBlock { data, entries: self.cur_entries });
            self.cur_entries = 0;
        }
    }

    pub fn entry_count(&self) -> u64 {
        self.total
    }

    /// Move everything accumulated so far into the shared list.
    pub fn merge_into(&mut self, list: &ResultList) {
        self.seal();
        for block in self.sealed.drain(..) {
            list.append_block(block);
        }
    }
}

struct ResState {
    blocks: Vec<ResultBlock>,
    entries: u64,
}

/// Node-wide result list: block-granular appends from local compute threads
/// and, at the sink, from inbound result streams.
pub struct ResultList {
    mon: Monitor<ResState>,
}

impl ResultList {
    pub fn new(label: &str, sched: SchedHandle) -> Self {
        ResultList { mon: Monitor::new(label, ResState { blocks: Vec::new(), entries: 0 }, sched) }
    }

    pub fn append_block(&self, block: ResultBlock) {
        self.mon.with(|s| {
            s.entries += block.entries as u64;
            s.blocks.push(block);
        });
    }

    pub fn entry_count(&self) -> u64 {
        self.mon.with(|s| s.entries)
    }

    pub fn block_count(&self) -> usize {
        self.mon.with(|s| s.blocks.len())
    }

    pub fn take_blocks(&self) -> Vec<ResultBlock> {
        self.mon.with(|s| {
            s.entries = 0;
            std::mem::take(&mut s.blocks)
        })
    }

    pub fn clone_blocks(&self) -> Vec<ResultBlock> {
        self.mon.with(|s| s.blocks.clone())
    }

    pub fn decode_all(&self, codec: &EntryCodec) -> Result<Vec<ResultEntry>> {
        let blocks = self.clone_blocks();
        let mut out = Vec::new();
        for b in &blocks {
            out.extend(b.decode(codec)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codec_roundtrip_keys() {
        let c = EntryCodec::new(ResultFormat::Keys, 128);
        assert_eq!(c.entry_size(), 20);
        let mut buf = Vec::new();
        c.encode_into(&mut buf, 7, 9, 3, &[], &[]);
        assert_eq!(buf.len(), 20);
        let e = c.decode_at(&buf, 0).unwrap();
        assert_eq!(e, ResultEntry { r_key: 7, s_key: 9, source: 3, r_payload: vec![], s_payload: vec![] });
    }

    #[test]
    fn codec_roundtrip_full_payloads() {
        let c = EntryCodec::new(ResultFormat::FullPayloads, 16);
        assert_eq!(c.entry_size(), 20 + 16);
        let mut buf = Vec::new();
        c.encode_into(&mut buf, 1, 2, 0, &[0xAA; 8], &[0xBB; 8]);
        let e = c.decode_at(&buf, 0).unwrap();
        assert_eq!(e.r_payload, vec![0xAA; 8]);
        assert_eq!(e.s_payload, vec![0xBB; 8]);
    }

    #[test]
    fn blocks_never_exceed_page() {
        let c = EntryCodec::new(ResultFormat::Keys, 128);
        let page = 64; // 3 entries of 20 bytes fit, the 4th spills
        let mut lb = LocalBuffer::new(c, page);
        let list = ResultList::new("res", None);
        for i in 0..10u64 {
            lb.push(i, i, 0, &[], &[]);
        }
        lb.merge_into(&list);
        let blocks = list.clone_blocks();
        assert_eq!(blocks.len(), 4); // 3 + 3 + 3 + 1
        for b in &blocks {
            assert!(b.data.len() <= page);
            assert_eq!(b.data.len(), 20 * b.entries as usize);
        }
        assert_eq!(list.entry_count(), 10);
    }

    #[test]
    fn merge_preserves_every_entry_in_order() {
        let c = EntryCodec::new(ResultFormat::Keys, 128);
        let mut lb = LocalBuffer::new(c, 64);
        let list = ResultList::new("res", None);
        for i in 0..25u64 {
            lb.push(i, 100 + i, 2, &[], &[]);
        }
        assert_eq!(lb.entry_count(), 25);
        lb.merge_into(&list);
        let all = list.decode_all(&c).unwrap();
        assert_eq!(all.len(), 25);
        for (i, e) in all.iter().enumerate() {
            assert_eq!(e.r_key, i as u64);
            assert_eq!(e.s_key, 100 + i as u64);
            assert_eq!(e.source, 2);
        }
    }

    #[test]
    fn merge_twice_moves_only_new_entries() {
        let c = EntryCodec::new(ResultFormat::Keys, 128);
        let mut lb = LocalBuffer::new(c, 4096);
        let list = ResultList::new("res", None);
        lb.push(1, 1, 0, &[], &[]);
        lb.merge_into(&list);
        lb.push(2, 2, 0, &[], &[]);
        lb.merge_into(&list);
        assert_eq!(list.entry_count(), 2);
    }

    #[test]
    fn truncated_entry_rejected() {
        let c = EntryCodec::new(ResultFormat::Keys, 128);
        assert!(c.decode_at(&[0u8; 19], 0).is_err());
    }
}
