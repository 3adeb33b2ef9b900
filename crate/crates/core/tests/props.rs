//! Randomized round-trip identity properties for the wire framing, the
//! result-entry codec, and the partition file format. The golden-byte
//! fixtures live next to the codecs; these cover the input space.

use std::io::Cursor;

use proptest::collection::vec;
use proptest::prelude::*;
use shardjoin_core::config::ResultFormat;
use shardjoin_core::model::result::{EntryCodec, ResultBlock, ResultEntry};
use shardjoin_core::model::tuple::TupleBuf;
use shardjoin_core::wire::{
    encode_preamble, read_bucket_frame, read_preamble, read_result_stream_body,
    send_partition_segment, send_result_stream, StreamPreamble, KIND_PARTITION, KIND_RESULT,
};
use shardjoin_core::workload::{read_partition, write_partition, GenSpec, KeyDist};

fn format_strategy() -> impl Strategy<Value = ResultFormat> {
    prop_oneof![Just(ResultFormat::Keys), Just(ResultFormat::FullPayloads)]
}

/// Codec parameters plus entries shaped to fit them: payload lengths must
/// equal tuple_size - 8 in full format and zero in key-only format.
fn codec_and_entries() -> impl Strategy<Value = (ResultFormat, u32, Vec<ResultEntry>)> {
    (format_strategy(), 8u32..=64).prop_flat_map(|(format, tuple_size)| {
        let pl = match format {
            ResultFormat::FullPayloads => tuple_size as usize - 8,
            ResultFormat::Keys => 0,
        };
        let entry = (any::<u64>(), any::<u64>(), 0u32..64, vec(any::<u8>(), pl), vec(any::<u8>(), pl))
            .prop_map(|(r_key, s_key, source, r_payload, s_payload)| ResultEntry {
                r_key,
                s_key,
                source,
                r_payload,
                s_payload,
            });
        (Just(format), Just(tuple_size), vec(entry, 0..32))
    })
}

/// A bucket layout plus per-bucket tuple runs with arbitrary payload bytes.
fn segment_strategy() -> impl Strategy<Value = (u32, Vec<Vec<(u64, Vec<u8>)>>)> {
    (8u32..=32).prop_flat_map(|tuple_size| {
        let tuple = (any::<u64>(), vec(any::<u8>(), tuple_size as usize - 8));
        (Just(tuple_size), vec(vec(tuple, 0..12), 1..12))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn entry_codec_round_trips((format, tuple_size, entries) in codec_and_entries()) {
        let codec = EntryCodec::new(format, tuple_size);
        let mut buf = Vec::new();
        for e in &entries {
            codec.encode_into(&mut buf, e.r_key, e.s_key, e.source, &e.r_payload, &e.s_payload);
        }
        prop_assert_eq!(buf.len(), entries.len() * codec.entry_size());
        for (i, e) in entries.iter().enumerate() {
            let got = codec.decode_at(&buf, i * codec.entry_size()).unwrap();
            prop_assert_eq!(&got, e);
        }
    }

    #[test]
    fn result_stream_round_trips(
        (format, tuple_size, entries) in codec_and_entries(),
        sender in 0u32..64,
        block_len in 1usize..8,
    ) {
        let codec = EntryCodec::new(format, tuple_size);
        let blocks: Vec<ResultBlock> = entries
            .chunks(block_len)
            .map(|chunk| {
                let mut data = Vec::new();
                for e in chunk {
                    codec.encode_into(&mut data, e.r_key, e.s_key, e.source, &e.r_payload, &e.s_payload);
                }
                ResultBlock { data, entries: chunk.len() as u32 }
            })
            .collect();

        let mut wire = Vec::new();
        let acct = send_result_stream(&mut wire, sender, &blocks).unwrap();
        prop_assert_eq!(acct.total(), wire.len() as u64);

        let mut r = Cursor::new(wire);
        let pre = read_preamble(&mut r).unwrap();
        prop_assert_eq!(pre.kind, KIND_RESULT);
        prop_assert_eq!(pre.sender, sender);
        let got_blocks = read_result_stream_body(&mut r, codec.entry_size()).unwrap();
        prop_assert_eq!(&got_blocks, &blocks);

        let mut got = Vec::new();
        for b in &got_blocks {
            got.extend(b.decode(&codec).unwrap());
        }
        prop_assert_eq!(got, entries);
    }

    #[test]
    fn partition_segment_round_trips(
        (tuple_size, bucket_tuples) in segment_strategy(),
        sender in 0u32..64,
        table_id in 0u32..2,
    ) {
        let num_buckets = bucket_tuples.len() as u32;
        let buckets: Vec<TupleBuf> = bucket_tuples
            .iter()
            .map(|tuples| {
                let mut b = TupleBuf::new(tuple_size);
                for (key, payload) in tuples {
                    b.push(*key, payload);
                }
                b
            })
            .collect();

        let mut wire = Vec::new();
        let acct = send_partition_segment(
            &mut wire,
            sender,
            table_id,
            num_buckets,
            buckets.iter().enumerate().map(|(i, b)| (i as u32, b)),
        )
        .unwrap();
        prop_assert_eq!(acct.total(), wire.len() as u64);
        let payload: u64 = buckets.iter().map(|b| b.byte_len() as u64).sum();
        prop_assert_eq!(acct.payload_bytes, payload);

        let mut r = Cursor::new(wire);
        let pre = read_preamble(&mut r).unwrap();
        prop_assert_eq!(pre.kind, KIND_PARTITION);
        prop_assert_eq!(pre.sender, sender);
        prop_assert_eq!(pre.table_id, table_id);
        prop_assert_eq!(pre.num_buckets, num_buckets);

        let mut got: Vec<(u32, TupleBuf)> = Vec::new();
        while let Some(frame) = read_bucket_frame(&mut r, tuple_size, num_buckets).unwrap() {
            got.push(frame);
        }
        let want: Vec<(u32, TupleBuf)> = buckets
            .into_iter()
            .enumerate()
            .filter(|(_, b)| !b.is_empty())
            .map(|(i, b)| (i as u32, b))
            .collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn preamble_round_trips(
        sender in any::<u32>(),
        table_id in 0u32..2,
        num_buckets in 1u32..100_000,
        result in any::<bool>(),
    ) {
        let pre = if result {
            StreamPreamble::result(sender)
        } else {
            StreamPreamble::partition(sender, table_id, num_buckets)
        };
        let bytes = encode_preamble(&pre);
        prop_assert_eq!(bytes.len(), pre.encoded_len());
        let got = read_preamble(&mut Cursor::new(bytes)).unwrap();
        prop_assert_eq!(got, pre);
    }

    #[test]
    fn partition_files_round_trip(
        seed in any::<u64>(),
        tuples in 0u64..64,
        domain in 1u64..10_000,
        tuple_size in 8u32..=32,
        node_id in 0u32..8,
        table_id in 0u32..2,
        dist in prop_oneof![
            Just(KeyDist::Uniform),
            (0.0f64..2.0).prop_map(|theta| KeyDist::Zipf { theta }),
            ((1u64..256), (0.0f64..1.0))
                .prop_map(|(block_size, p_stay)| KeyDist::Locality { block_size, p_stay }),
        ],
    ) {
        let spec = GenSpec { seed, tuples_per_partition: tuples, domain, tuple_size, distribution: dist };
        let part = shardjoin_core::workload::generate_partition(&spec, table_id, node_id);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("part.bin");
        write_partition(&path, &part).unwrap();
        let got = read_partition(&path).unwrap();
        prop_assert_eq!(got, part);
    }
}
