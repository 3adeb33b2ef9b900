//! Sink result file: a fixed header followed by packed result entries in
//! the same encoding the engine ships between nodes.
//!
//! Layout (little-endian): magic "SJRF", version u32 = 1, format u8
//! (0 = keys, 1 = full payloads), tuple_size u32, entry count u64, then
//! count entries of the codec's fixed size.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use shardjoin_core::model::result::{EntryCodec, ResultBlock, ResultEntry};
use shardjoin_core::{Error, Result, ResultFormat};

pub const RESULT_MAGIC: [u8; 4] = *b"SJRF";
pub const RESULT_VERSION: u32 = 1;

pub fn write_results(
    path: &Path,
    format: ResultFormat,
    tuple_size: u32,
    blocks: &[ResultBlock],
) -> Result<u64> {
    let codec = EntryCodec::new(format, tuple_size);
    let mut w = BufWriter::new(File::create(path)?);
    let count: u64 = blocks.iter().map(|b| u64::from(b.entries)).sum();
    w.write_all(&RESULT_MAGIC)?;
    w.write_all(&RESULT_VERSION.to_le_bytes())?;
    w.write_all(&[match format {
        ResultFormat::Keys => 0u8,
        ResultFormat::FullPayloads => 1u8,
    }])?;
    w.write_all(&tuple_size.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    for b in blocks {
        if b.data.len() != b.entries as usize * codec.entry_size() {
            return Err(Error::Format(format!(
                "result block of {} bytes does not hold {} entries",
                b.data.len(),
                b.entries
            )));
        }
        w.write_all(&b.data)?;
    }
    w.flush()?;
    Ok(count)
}

pub fn read_results(path: &Path) -> Result<Vec<ResultEntry>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 21];
    r.read_exact(&mut head)
        .map_err(|e| Error::Format(format!("{}: truncated header: {e}", path.display())))?;
    if head[0..4] != RESULT_MAGIC {
        return Err(Error::Format(format!("{}: bad result file magic", path.display())));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != RESULT_VERSION {
        return Err(Error::Format(format!("{}: unknown version {version}", path.display())));
    }
    let format = match head[8] {
        0 => ResultFormat::Keys,
        1 => ResultFormat::FullPayloads,
        other => {
            return Err(Error::Format(format!("{}: unknown format byte {other}", path.display())))
        }
    };
    let tuple_size = u32::from_le_bytes(head[9..13].try_into().unwrap());
    let count = u64::from_le_bytes(head[13..21].try_into().unwrap());
    let codec = EntryCodec::new(format, tuple_size);
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    if data.len() as u64 != count * codec.entry_size() as u64 {
        return Err(Error::Format(format!(
            "{}: {} bytes of entries, expected {} x {}",
            path.display(),
            data.len(),
            count,
            codec.entry_size()
        )));
    }
    (0..count as usize).map(|i| codec.decode_at(&data, i * codec.entry_size())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries_to_block(codec: &EntryCodec, entries: &[ResultEntry]) -> ResultBlock {
        let mut data = Vec::new();
        for e in entries {
            codec.encode_into(&mut data, e.r_key, e.s_key, e.source, &e.r_payload, &e.s_payload);
        }
        ResultBlock { data, entries: entries.len() as u32 }
    }

    #[test]
    fn round_trip_keys_format() {
        let codec = EntryCodec::new(ResultFormat::Keys, 16);
        let entries: Vec<ResultEntry> = (0..10)
            .map(|i| ResultEntry {
                r_key: i,
                s_key: i * 3,
                source: (i % 4) as u32,
                r_payload: vec![],
                s_payload: vec![],
            })
            .collect();
        let blocks = vec![entries_to_block(&codec, &entries[..7]), entries_to_block(&codec, &entries[7..])];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("res.bin");
        let n = write_results(&path, ResultFormat::Keys, 16, &blocks).unwrap();
        assert_eq!(n, 10);
        assert_eq!(read_results(&path).unwrap(), entries);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("res.bin");
        std::fs::write(&path, b"XXXXXXXXXXXXXXXXXXXXXXXX").unwrap();
        match read_results(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("magic"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_body_is_a_format_error() {
        let codec = EntryCodec::new(ResultFormat::Keys, 16);
        let entries = vec![ResultEntry {
            r_key: 1,
            s_key: 2,
            source: 0,
            r_payload: vec![],
            s_payload: vec![],
        }];
        let blocks = vec![entries_to_block(&codec, &entries)];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("res.bin");
        write_results(&path, ResultFormat::Keys, 16, &blocks).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 3]).unwrap();
        assert!(matches!(read_results(&path), Err(Error::Format(_))));
    }
}
