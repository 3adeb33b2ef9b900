//! Network encoding for shuffle and result streams.
//!
//! Every stream opens with a magic-tagged preamble naming the sender and
//! content. Partition streams then carry bucket frames (index, tuple count,
//! packed tuples) ended by an all-ones terminator word; result streams carry
//! a block count followed by length-prefixed entry blocks. The receiver
//! acknowledges a completed stream with a single byte. All integers are
//! little-endian.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::result::ResultBlock;
use crate::model::tuple::TupleBuf;

pub const WIRE_MAGIC: [u8; 4] = *b"SJW1";
pub const KIND_PARTITION: u8 = 1;
pub const KIND_RESULT: u8 = 2;
/// table_id carried by result streams, which belong to no input table.
pub const RESULT_TABLE_SENTINEL: u32 = 0xFFFF_FFFF;
pub const FRAME_TERMINATOR: u32 = 0xFFFF_FFFF;
pub const ACK_BYTE: u8 = 0xAC;

/// Guard against allocating on behalf of a corrupt length field.
const MAX_BODY_BYTES: u64 = 1 << 31;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamPreamble {
    pub kind: u8,
    pub sender: u32,
    pub table_id: u32,
    /// Bucket count of the sender's hash layout; 0 on result streams.
    pub num_buckets: u32,
}

impl StreamPreamble {
    pub fn partition(sender: u32, table_id: u32, num_buckets: u32) -> Self {
        StreamPreamble { kind: KIND_PARTITION, sender, table_id, num_buckets }
    }

    pub fn result(sender: u32) -> Self {
        StreamPreamble { kind: KIND_RESULT, sender, table_id: RESULT_TABLE_SENTINEL, num_buckets: 0 }
    }

    pub fn encoded_len(&self) -> usize {
        match self.kind {
            KIND_PARTITION => 17,
            _ => 13,
        }
    }
}

fn read_exact_framed(r: &mut dyn Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Protocol(format!("stream ended inside {what}"))
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut dyn Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_framed(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn encode_preamble(p: &StreamPreamble) -> Vec<u8> {
    let mut out = Vec::with_capacity(p.encoded_len());
    out.extend_from_slice(&WIRE_MAGIC);
    out.push(p.kind);
    out.extend_from_slice(&p.sender.to_le_bytes());
    out.extend_from_slice(&p.table_id.to_le_bytes());
    if p.kind == KIND_PARTITION {
        out.extend_from_slice(&p.num_buckets.to_le_bytes());
    }
    out
}

pub fn write_preamble(w: &mut dyn Write, p: &StreamPreamble) -> Result<u64> {
    let bytes = encode_preamble(p);
    w.write_all(&bytes)?;
    Ok(bytes.len() as u64)
}

pub fn read_preamble(r: &mut dyn Read) -> Result<StreamPreamble> {
    let mut head = [0u8; 13];
    read_exact_framed(r, &mut head, "stream preamble")?;
    if head[0..4] != WIRE_MAGIC {
        return Err(Error::Protocol(format!(
            "bad stream magic {:02x?}",
            &head[0..4]
        )));
    }
    let kind = head[4];
    let sender = u32::from_le_bytes(head[5..9].try_into().unwrap());
    let table_id = u32::from_le_bytes(head[9..13].try_into().unwrap());
    match kind {
        KIND_PARTITION => {
            let num_buckets = read_u32(r, "stream preamble")?;
            if num_buckets == 0 {
                return Err(Error::Protocol("partition stream with zero buckets".into()));
            }
            Ok(StreamPreamble { kind, sender, table_id, num_buckets })
        }
        KIND_RESULT => {
            if table_id != RESULT_TABLE_SENTINEL {
                return Err(Error::Protocol(format!(
                    "result stream carries table id {table_id}"
                )));
            }
            Ok(StreamPreamble { kind, sender, table_id, num_buckets: 0 })
        }
        other => Err(Error::Protocol(format!("unknown stream kind {other}"))),
    }
}

/// Byte accounting split so transfer volume can be reported as tuple payload
/// vs. framing overhead.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct SendAccount {
    pub payload_bytes: u64,
    pub framing_bytes: u64,
}

impl SendAccount {
    pub fn add(&mut self, other: SendAccount) {
        self.payload_bytes += other.payload_bytes;
        self.framing_bytes += other.framing_bytes;
    }

    pub fn total(&self) -> u64 {
        self.payload_bytes + self.framing_bytes
    }
}

pub fn write_bucket_frame(w: &mut dyn Write, bucket: u32, tuples: &TupleBuf) -> Result<SendAccount> {
    debug_assert!(bucket != FRAME_TERMINATOR);
    let mut head = [0u8; 8];
    head[0..4].copy_from_slice(&bucket.to_le_bytes());
    head[4..8].copy_from_slice(&(tuples.len() as u32).to_le_bytes());
    w.write_all(&head)?;
    w.write_all(tuples.bytes())?;
    Ok(SendAccount { payload_bytes: tuples.byte_len() as u64, framing_bytes: 8 })
}

pub fn write_terminator(w: &mut dyn Write) -> Result<SendAccount> {
    w.write_all(&FRAME_TERMINATOR.to_le_bytes())?;
    Ok(SendAccount { payload_bytes: 0, framing_bytes: 4 })
}

/// Next bucket frame, or `None` at the segment terminator.
pub fn read_bucket_frame(
    r: &mut dyn Read,
    tuple_size: u32,
    num_buckets: u32,
) -> Result<Option<(u32, TupleBuf)>> {
    let bucket = read_u32(r, "bucket frame header")?;
    if bucket == FRAME_TERMINATOR {
        return Ok(None);
    }
    if bucket >= num_buckets {
        return Err(Error::Protocol(format!(
            "bucket index {bucket} outside layout of {num_buckets}"
        )));
    }
    let count = read_u32(r, "bucket frame header")?;
    let body = count as u64 * tuple_size as u64;
    if body > MAX_BODY_BYTES {
        return Err(Error::Protocol(format!(
            "bucket frame claims {count} tuples of {tuple_size} bytes"
        )));
    }
    let mut data = vec![0u8; body as usize];
    read_exact_framed(r, &mut data, "bucket frame body")?;
    let tuples = TupleBuf::from_bytes(tuple_size, data)?;
    Ok(Some((bucket, tuples)))
}

/// Write one partition segment: preamble, every non-empty bucket, terminator.
pub fn send_partition_segment<'a>(
    w: &mut dyn Write,
    sender: u32,
    table_id: u32,
    num_buckets: u32,
    buckets: impl Iterator<Item = (u32, &'a TupleBuf)>,
) -> Result<SendAccount> {
    let mut acct = SendAccount::default();
    let pre = StreamPreamble::partition(sender, table_id, num_buckets);
    acct.framing_bytes += write_preamble(w, &pre)?;
    for (idx, tuples) in buckets {
        if tuples.len() == 0 {
            continue;
        }
        acct.add(write_bucket_frame(w, idx, tuples)?);
    }
    acct.add(write_terminator(w)?);
    Ok(acct)
}

pub fn write_ack(w: &mut dyn Write) -> Result<()> {
    w.write_all(&[ACK_BYTE])?;
    w.flush()?;
    Ok(())
}

pub fn read_ack(r: &mut dyn Read) -> Result<()> {
    let mut b = [0u8; 1];
    read_exact_framed(r, &mut b, "stream acknowledgement")?;
    if b[0] != ACK_BYTE {
        return Err(Error::Protocol(format!("bad acknowledgement byte {:#04x}", b[0])));
    }
    Ok(())
}

/// Write a whole result stream: preamble, block count, blocks.
pub fn send_result_stream(
    w: &mut dyn Write,
    sender: u32,
    blocks: &[ResultBlock],
) -> Result<SendAccount> {
    let mut acct = SendAccount::default();
    acct.framing_bytes += write_preamble(w, &StreamPreamble::result(sender))?;
    w.write_all(&(blocks.len() as u32).to_le_bytes())?;
    acct.framing_bytes += 4;
    for b in blocks {
        w.write_all(&b.entries.to_le_bytes())?;
        w.write_all(&b.data)?;
        acct.framing_bytes += 4;
        acct.payload_bytes += b.data.len() as u64;
    }
    Ok(acct)
}

/// Read the body of a result stream whose preamble was already consumed.
pub fn read_result_stream_body(r: &mut dyn Read, entry_size: usize) -> Result<Vec<ResultBlock>> {
    let block_count = read_u32(r, "result stream header")?;
    let mut blocks = Vec::with_capacity(block_count.min(1 << 20) as usize);
    for _ in 0..block_count {
        let entries = read_u32(r, "result block header")?;
        let body = entries as u64 * entry_size as u64;
        if body > MAX_BODY_BYTES {
            return Err(Error::Protocol(format!("result block claims {entries} entries")));
        }
        let mut data = vec![0u8; body as usize];
        read_exact_framed(r, &mut data, "result block body")?;
        blocks.push(ResultBlock { data, entries });
    }
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ResultFormat;
    use crate::model::result::EntryCodec;
    use std::io::Cursor;

    #[test]
    fn preamble_partition_golden_bytes() {
        let p = StreamPreamble::partition(3, 0, 1200);
        let b = encode_preamble(&p);
        assert_eq!(
            b,
            vec![
                0x53, 0x4A, 0x57, 0x31, // "SJW1"
                0x01, // partition stream
                0x03, 0x00, 0x00, 0x00, // sender 3
                0x00, 0x00, 0x00, 0x00, // table 0
                0xB0, 0x04, 0x00, 0x00, // 1200 buckets
            ]
        );
        assert_eq!(b.len(), 17);
    }

    #[test]
    fn preamble_result_golden_bytes() {
        let p = StreamPreamble::result(1);
        let b = encode_preamble(&p);
        assert_eq!(
            b,
            vec![
                0x53, 0x4A, 0x57, 0x31,
                0x02,
                0x01, 0x00, 0x00, 0x00,
                0xFF, 0xFF, 0xFF, 0xFF,
            ]
        );
        assert_eq!(b.len(), 13);
    }

    #[test]
    fn bucket_frame_golden_bytes() {
        let mut t = TupleBuf::new(8);
        t.push_keyed(7);
        t.push_keyed(9);
        let mut out = Vec::new();
        let acct = write_bucket_frame(&mut out, 5, &t).unwrap();
        assert_eq!(
            out,
            vec![
                0x05, 0x00, 0x00, 0x00, // bucket 5
                0x02, 0x00, 0x00, 0x00, // two tuples
                0x07, 0, 0, 0, 0, 0, 0, 0, // key 7
                0x09, 0, 0, 0, 0, 0, 0, 0, // key 9
            ]
        );
        assert_eq!(acct, SendAccount { payload_bytes: 16, framing_bytes: 8 });
    }

    #[test]
    fn terminator_and_ack_golden_bytes() {
        let mut out = Vec::new();
        write_terminator(&mut out).unwrap();
        write_ack(&mut out).unwrap();
        assert_eq!(out, vec![0xFF, 0xFF, 0xFF, 0xFF, 0xAC]);
    }

    #[test]
    fn result_stream_golden_bytes() {
        let codec = EntryCodec::new(ResultFormat::Keys, 128);
        let mut data = Vec::new();
        codec.encode_into(&mut data, 1, 2, 0, &[], &[]);
        let block = ResultBlock { data, entries: 1 };
        let mut out = Vec::new();
        let acct = send_result_stream(&mut out, 4, &[block]).unwrap();
        let mut expect = vec![
            0x53, 0x4A, 0x57, 0x31, 0x02, // magic + result kind
            0x04, 0x00, 0x00, 0x00, // sender 4
            0xFF, 0xFF, 0xFF, 0xFF, // no table
            0x01, 0x00, 0x00, 0x00, // one block
            0x01, 0x00, 0x00, 0x00, // one entry
        ];
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&0u32.to_le_bytes());
        assert_eq!(out, expect);
        assert_eq!(acct.payload_bytes, 20);
        assert_eq!(acct.framing_bytes, 13 + 4 + 4);
    }

    #[test]
    fn partition_segment_roundtrip_skips_empty_buckets() {
        let mut b0 = TupleBuf::new(16);
        b0.push_keyed(10);
        let b1 = TupleBuf::new(16); // empty, must not appear on the wire
        let mut b2 = TupleBuf::new(16);
        b2.push_keyed(20);
        b2.push_keyed(30);
        let mut out = Vec::new();
        let acct = send_partition_segment(
            &mut out,
            2,
            1,
            3,
            [(0u32, &b0), (1u32, &b1), (2u32, &b2)].into_iter(),
        )
        .unwrap();
        assert_eq!(acct.payload_bytes, 3 * 16);
        assert_eq!(acct.framing_bytes, 17 + 8 + 8 + 4);

        let mut r = Cursor::new(out);
        let pre = read_preamble(&mut r).unwrap();
        assert_eq!(pre, StreamPreamble::partition(2, 1, 3));
        let (i0, t0) = read_bucket_frame(&mut r, 16, 3).unwrap().unwrap();
        assert_eq!((i0, t0.len()), (0, 1));
        let (i2, t2) = read_bucket_frame(&mut r, 16, 3).unwrap().unwrap();
        assert_eq!((i2, t2.len()), (2, 2));
        assert_eq!(t2.key(1), 30);
        assert!(read_bucket_frame(&mut r, 16, 3).unwrap().is_none());
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = encode_preamble(&StreamPreamble::partition(0, 0, 4));
        bytes[0] = b'X';
        match read_preamble(&mut Cursor::new(bytes)) {
            Err(Error::Protocol(m)) => assert!(m.contains("magic"), "{m}"),
            other => panic!("expected protocol error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_kind_rejected() {
        let mut bytes = encode_preamble(&StreamPreamble::partition(0, 0, 4));
        bytes[4] = 9;
        assert!(matches!(read_preamble(&mut Cursor::new(bytes)), Err(Error::Protocol(_))));
    }

    #[test]
    fn truncated_frame_is_protocol_error() {
        let mut t = TupleBuf::new(8);
        t.push_keyed(1);
        let mut out = Vec::new();
        write_bucket_frame(&mut out, 0, &t).unwrap();
        out.truncate(out.len() - 3);
        match read_bucket_frame(&mut Cursor::new(out), 8, 4) {
            Err(Error::Protocol(m)) => assert!(m.contains("ended inside"), "{m}"),
            other => panic!("expected protocol error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_bucket_rejected() {
        let mut t = TupleBuf::new(8);
        t.push_keyed(1);
        let mut out = Vec::new();
        write_bucket_frame(&mut out, 7, &t).unwrap();
        assert!(matches!(
            read_bucket_frame(&mut Cursor::new(out), 8, 4),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn result_roundtrip_multiple_blocks() {
        let codec = EntryCodec::new(ResultFormat::FullPayloads, 16);
        let mut blocks = Vec::new();
        for b in 0..3u64 {
            let mut data = Vec::new();
            for e in 0..4u64 {
                codec.encode_into(&mut data, b, e, 1, &[b as u8; 8], &[e as u8; 8]);
            }
            blocks.push(ResultBlock { data, entries: 4 });
        }
        let mut out = Vec::new();
        send_result_stream(&mut out, 0, &blocks).unwrap();
        let mut r = Cursor::new(out);
        let pre = read_preamble(&mut r).unwrap();
        assert_eq!(pre.kind, KIND_RESULT);
        let got = read_result_stream_body(&mut r, codec.entry_size()).unwrap();
        assert_eq!(got, blocks);
    }
}
