//! Brute-force reference join. Deliberately shares no machinery with the
//! engine: no hashing, no buckets, no shuffle — just every R tuple against
//! every S tuple, so engine output can be judged against an independent
//! answer.

use std::collections::BTreeMap;

use crate::config::{Predicate, ResultFormat};
use crate::model::result::ResultEntry;
use crate::model::tuple::Partition;

/// Nested-loop join over whole relations given as per-node partitions.
/// `source` on each entry is the node that held the R-side tuple.
pub fn nested_loop_join(
    r_parts: &[Partition],
    s_parts: &[Partition],
    predicate: &Predicate,
    format: ResultFormat,
) -> Vec<ResultEntry> {
    let mut out = Vec::new();
    let keyed = matches!(format, ResultFormat::Keys);
    for rp in r_parts {
        let r_keys: Vec<u64> = rp.tuples.keys().collect();
        for sp in s_parts {
            let s_keys: Vec<u64> = sp.tuples.keys().collect();
            for (ri, &rk) in r_keys.iter().enumerate() {
                for (si, &sk) in s_keys.iter().enumerate() {
                    if predicate.matches(rk, sk) {
                        out.push(ResultEntry {
                            r_key: rk,
                            s_key: sk,
                            source: rp.node_id,
                            r_payload: if keyed { Vec::new() } else { rp.tuples.payload(ri).to_vec() },
                            s_payload: if keyed { Vec::new() } else { sp.tuples.payload(si).to_vec() },
                        });
                    }
                }
            }
        }
    }
    out
}

/// Output size only, without materializing entries.
pub fn join_cardinality(r_parts: &[Partition], s_parts: &[Partition], predicate: &Predicate) -> u64 {
    let mut n = 0u64;
    for rp in r_parts {
        let r_keys: Vec<u64> = rp.tuples.keys().collect();
        for sp in s_parts {
            let s_keys: Vec<u64> = sp.tuples.keys().collect();
            for &rk in &r_keys {
                for &sk in &s_keys {
                    if predicate.matches(rk, sk) {
                        n += 1;
                    }
                }
            }
        }
    }
    n
}

pub fn per_source_counts(entries: &[ResultEntry]) -> BTreeMap<u32, u64> {
    let mut m = BTreeMap::new();
    for e in entries {
        *m.entry(e.source).or_default() += 1;
    }
    m
}

/// Compare two result multisets. `None` means identical; otherwise a
/// description of the first divergence plus totals.
pub fn multiset_diff(label_a: &str, mut a: Vec<ResultEntry>, label_b: &str, mut b: Vec<ResultEntry>) -> Option<String> {
    a.sort_unstable();
    b.sort_unstable();
    if a == b {
        return None;
    }
    let mut msg = format!("{} has {} entries, {} has {}", label_a, a.len(), label_b, b.len());
    for (i, (x, y)) in a.iter().zip(b.iter()).enumerate() {
        if x != y {
            msg.push_str(&format!(
                "; first divergence at sorted index {i}: {label_a}=({},{},src{}) {label_b}=({},{},src{})",
                x.r_key, x.s_key, x.source, y.r_key, y.s_key, y.source
            ));
            return Some(msg);
        }
    }
    msg.push_str("; one is a strict prefix of the other");
    Some(msg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tuple::{payload_for, Partition, TupleBuf};

    fn part(table_id: u32, node_id: u32, keys: &[u64], tuple_size: u32) -> Partition {
        let mut t = TupleBuf::new(tuple_size);
        for &k in keys {
            t.push(k, &payload_for(k, tuple_size));
        }
        Partition { table_id, node_id, domain: 1 << 20, tuples: t }
    }

    #[test]
    fn equality_with_duplicates_is_a_cross_product() {
        let r = [part(0, 0, &[5, 5, 9], 16)];
        let s = [part(1, 0, &[5, 5, 5, 9, 11], 16)];
        let out = nested_loop_join(&r, &s, &Predicate::Equality, ResultFormat::Keys);
        // key 5: 2 x 3 pairings; key 9: 1 x 1.
        assert_eq!(out.len(), 7);
        assert_eq!(join_cardinality(&r, &s, &Predicate::Equality), 7);
    }

    #[test]
    fn band_predicate_counts_near_misses() {
        let r = [part(0, 0, &[10], 16)];
        let s = [part(1, 0, &[8, 9, 10, 11, 12, 13], 16)];
        let out = nested_loop_join(&r, &s, &Predicate::Band { width: 1 }, ResultFormat::Keys);
        let mut keys: Vec<u64> = out.iter().map(|e| e.s_key).collect();
        keys.sort_unstable();
        assert_eq!(keys, vec![9, 10, 11]);
    }

    #[test]
    fn less_than_predicate() {
        let r = [part(0, 0, &[3, 7], 16)];
        let s = [part(1, 0, &[1, 5, 9], 16)];
        let out = nested_loop_join(&r, &s, &Predicate::LessThan, ResultFormat::Keys);
        // 3 < {5,9}, 7 < {9}
        assert_eq!(out.len(), 3);
    }

    #[test]
    fn source_is_the_r_side_origin() {
        let r = [part(0, 0, &[1], 16), part(0, 3, &[1, 1], 16)];
        let s = [part(1, 1, &[1], 16)];
        let out = nested_loop_join(&r, &s, &Predicate::Equality, ResultFormat::Keys);
        let counts = per_source_counts(&out);
        assert_eq!(counts.get(&0), Some(&1));
        assert_eq!(counts.get(&3), Some(&2));
    }

    #[test]
    fn full_payload_entries_carry_both_payloads() {
        let r = [part(0, 0, &[42], 16)];
        let s = [part(1, 1, &[42], 16)];
        let out = nested_loop_join(&r, &s, &Predicate::Equality, ResultFormat::FullPayloads);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].r_payload, payload_for(42, 16));
        assert_eq!(out[0].s_payload, payload_for(42, 16));
    }

    #[test]
    fn diff_reports_divergence() {
        let a = vec![ResultEntry { r_key: 1, s_key: 1, source: 0, r_payload: vec![], s_payload: vec![] }];
        let b = vec![ResultEntry { r_key: 1, s_key: 2, source: 0, r_payload: vec![], s_payload: vec![] }];
        assert!(multiset_diff("x", a.clone(), "y", b).unwrap().contains("divergence"));
        assert!(multiset_diff("x", a.clone(), "y", a).is_none());
    }
}
