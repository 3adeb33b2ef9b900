//! `simulate`: run a manifest's sweep points through the in-process
//! cluster across many seeds, comparing every sink result against the
//! brute-force reference join and (in deterministic mode) checking the
//! recorded event trace. Exits nonzero iff any run failed a check.

use std::path::Path;

use shardjoin_core::config::{TABLE_R, TABLE_S};
use shardjoin_core::model::result::EntryCodec;
use shardjoin_core::model::tuple::Partition;
use shardjoin_core::oracle::{multiset_diff, nested_loop_join};
use shardjoin_core::sim::{run_baseline_sim, run_sim, SimOutcome, SimSpec};
use shardjoin_core::trace::{check_trace, to_jsonl};
use shardjoin_core::workload::{generate_partition, GenSpec};
use shardjoin_core::{Error, Result};

use crate::manifest::{Engine, Manifest, SimModeKey, SweepPoint};

fn gen_parts(spec: &GenSpec, table_id: u32, n: u32) -> Vec<Partition> {
    (0..n).map(|i| generate_partition(spec, table_id, i)).collect()
}

/// Problems found in one simulated run.
fn check_run(
    pt: &SweepPoint,
    out: &SimOutcome,
    r: &[Partition],
    s: &[Partition],
    det: bool,
) -> Vec<String> {
    let mut problems = Vec::new();
    if det {
        let violations = check_trace(&out.trace, &pt.cfg);
        if !violations.is_empty() {
            let shown: Vec<&str> = violations.iter().take(3).map(|s| s.as_str()).collect();
            problems.push(format!(
                "{} trace violations, first: {}",
                violations.len(),
                shown.join(" | ")
            ));
        }
    }
    let codec = EntryCodec::new(pt.cfg.result_format, pt.cfg.tuple_size);
    let mut got = Vec::new();
    let mut decode_failed = false;
    for b in &out.sink_blocks {
        match b.decode(&codec) {
            Ok(entries) => got.extend(entries),
            Err(e) => {
                problems.push(format!("sink block does not decode: {e}"));
                decode_failed = true;
            }
        }
    }
    if !decode_failed {
        if got.len() as u64 != out.sink_entries {
            problems.push(format!(
                "sink counted {} entries but its blocks hold {}",
                out.sink_entries,
                got.len()
            ));
        }
        let expected = nested_loop_join(r, s, &pt.cfg.predicate, pt.cfg.result_format);
        if let Some(diff) = multiset_diff("engine", got, "reference", expected) {
            problems.push(diff);
        }
    }
    problems
}

pub fn cmd_simulate(manifest_path: &Path, seeds: u64, trace_dir: Option<&Path>) -> Result<()> {
    if seeds == 0 {
        return Err(Error::Config("--seeds must be >= 1".into()));
    }
    let m = Manifest::load(manifest_path)?;
    let det = match (m.engine, m.sim_mode) {
        (Engine::BarrierFree, None | Some(SimModeKey::Det)) => true,
        (Engine::BarrierFree, Some(SimModeKey::Free)) => false,
        (Engine::BarrierBaseline, None | Some(SimModeKey::Free)) => false,
        (Engine::BarrierBaseline, Some(SimModeKey::Det)) => {
            return Err(Error::Config(
                "the phase-synchronized engine runs in free mode only; drop `sim_mode = det`"
                    .into(),
            ))
        }
    };
    if let Some(dir) = trace_dir {
        if !det {
            return Err(Error::Config(
                "traces are only recorded in deterministic mode; drop --trace-dir".into(),
            ));
        }
        std::fs::create_dir_all(dir)?;
    }
    let points = m.points()?;

    let mut runs = 0usize;
    let mut bad_runs = 0usize;
    for pt in &points {
        let pairs = pt.cfg.partition_size_r as u128
            * pt.cfg.partition_size_s as u128
            * (pt.cfg.num_nodes() as u128).pow(2);
        if pairs > 1_000_000_000 {
            eprintln!(
                "simulate: {}: the reference join sweeps {pairs} tuple pairs per seed; \
                 this will be slow (simulate is meant for desk-scale manifests)",
                pt.label
            );
        }
        for s_idx in 0..seeds {
            let seed = m.gen_seed.wrapping_add(s_idx);
            let gen_r = GenSpec { seed, ..pt.gen_r.clone() };
            let gen_s = GenSpec { seed, ..pt.gen_s.clone() };
            let r = gen_parts(&gen_r, TABLE_R, pt.cfg.num_nodes());
            let s = gen_parts(&gen_s, TABLE_S, pt.cfg.num_nodes());
            let spec = if det {
                SimSpec::det(pt.cfg.clone(), seed)
            } else {
                SimSpec::free(pt.cfg.clone())
            };
            runs += 1;
            let outcome = match m.engine {
                Engine::BarrierFree => run_sim(&spec, &r, &s),
                Engine::BarrierBaseline => run_baseline_sim(&spec, &r, &s),
            };
            let problems = match outcome {
                Err(e) => vec![format!("run failed: {e}")],
                Ok(out) => {
                    if let Some(dir) = trace_dir {
                        let path = dir.join(format!("{}_seed{}.jsonl", pt.label, seed));
                        std::fs::write(&path, to_jsonl(&out.trace))?;
                    }
                    check_run(pt, &out, &r, &s, det)
                }
            };
            if !problems.is_empty() {
                bad_runs += 1;
                for p in &problems {
                    eprintln!("simulate: {} seed {seed}: {p}", pt.label);
                }
            }
        }
        println!(
            "simulate: {} done ({} seeds, {} engine, {})",
            pt.label,
            seeds,
            m.engine.as_str(),
            if det { "deterministic" } else { "free-running" }
        );
    }

    println!("simulate: {} of {runs} runs clean", runs - bad_runs);
    if bad_runs > 0 {
        return Err(Error::Protocol(format!("{bad_runs} of {runs} simulated runs failed checks")));
    }
    Ok(())
}
