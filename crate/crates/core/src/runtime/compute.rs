//! Join workers. Each thread drains the compute queue: join units until its
//! join-exit record arrives, then the local rendezvous, then (thread 0) the
//! result hand-off. At the sink, thread 0 stays alive for the final exit
//! record and reports the collected result.

use std::sync::Arc;

use crate::config::{JoinMode, TABLE_R};
use crate::error::Result;
use crate::event::{ComputeEvent, JoinUnit, SendEvent};
use crate::model::result::LocalBuffer;
use crate::model::tuple::TupleBuf;
use crate::trace;

use super::NodeCtx;

pub fn compute_loop(ctx: &Arc<NodeCtx>, thread_idx: usize) -> Result<()> {
    let thread = format!("compute-{thread_idx}");
    let node = ctx.node_id;
    let mut buf = LocalBuffer::new(ctx.codec(), ctx.cfg.page_size);
    let mut busy_ns = 0u64;
    let flush = |busy: u64| ctx.add_busy("compute", busy);

    loop {
        let ev = match ctx.q_compute.pop() {
            Ok(ev) => ev,
            Err(e) => {
                flush(busy_ns);
                return Err(e);
            }
        };
        let t0 = ctx.clock.now_ns();
        match ev {
            ComputeEvent::Join(unit) => {
                let detail = trace::detail_join(unit.source, unit.table, unit.bucket);
                ctx.trace.rec(
                    node,
                    &thread,
                    "compute",
                    trace::ev_pop(trace::Q_COMPUTE, "JOIN", &detail),
                );
                if ctx.delays.applies(node) && !ctx.delays.join_delay.is_zero() {
                    ctx.clock.sleep(ctx.delays.join_delay)?;
                }
                join_unit(ctx, &unit, &mut buf)?;
                if matches!(ctx.cfg.join_mode, JoinMode::Broadcast) {
                    // Replicated units are dead the moment they are joined.
                    let freed = unit.htf.free_bucket(unit.bucket)?;
                    if unit.htf.pooled {
                        ctx.pool.release(freed.bytes);
                    }
                    ctx.trace.rec(
                        node,
                        &thread,
                        "compute",
                        trace::ev_free(unit.source, unit.table, unit.bucket),
                    );
                }
                busy_ns += ctx.clock.now_ns().saturating_sub(t0);
            }
            ComputeEvent::JoinExit => {
                ctx.trace.rec(
                    node,
                    &thread,
                    "compute",
                    trace::ev_pop(trace::Q_COMPUTE, "JOIN_EXIT", ""),
                );
                ctx.report.with(|r| r.result_entries += buf.entry_count());
                buf.merge_into(&ctx.results);

                ctx.trace.rec(node, &thread, "compute", trace::EV_BARRIER_ENTER.into());
                let wait_t0 = ctx.clock.now_ns();
                ctx.barrier.wait()?;
                let release_ns = ctx.clock.now_ns();
                let waited = release_ns.saturating_sub(wait_t0);
                ctx.trace.rec(node, &thread, "compute", trace::EV_BARRIER_RELEASE.into());
                ctx.report.with(|r| r.barrier_wait_ns += waited);
                ctx.shared.with(|s| {
                    s.barrier_release_ns.get_or_insert(release_ns);
                });
                busy_ns += release_ns.saturating_sub(t0).saturating_sub(waited);

                if thread_idx != 0 {
                    flush(busy_ns);
                    return Ok(());
                }
                // Thread 0 epilogue: retire re-partitioned fragments, then
                // hand the node's result onward.
                let t1 = ctx.clock.now_ns();
                if matches!(ctx.cfg.join_mode, JoinMode::HashDistributed) {
                    retire_fragments(ctx, &thread)?;
                }
                let sink = ctx.cfg.sink_id;
                ctx.trace.rec(
                    node,
                    &thread,
                    "compute",
                    trace::ev_push(trace::Q_SEND, "RESULT_READY", &trace::detail_dst(sink)),
                );
                ctx.q_send.push(SendEvent::ResultReady(ctx.target(sink)))?;
                busy_ns += ctx.clock.now_ns().saturating_sub(t1);
                if !ctx.is_sink() {
                    flush(busy_ns);
                    return Ok(());
                }
            }
            ComputeEvent::Exit => {
                // Only the sink's thread 0 is still popping here.
                ctx.trace.rec(node, &thread, "compute", trace::ev_pop(trace::Q_COMPUTE, "EXIT", ""));
                let entries = ctx.results.entry_count();
                ctx.trace.rec(node, &thread, "compute", trace::ev_print(entries));
                log::info!("node {node}: join produced {entries} result entries");
                flush(busy_ns);
                return Ok(());
            }
        }
    }
}

fn join_unit(ctx: &Arc<NodeCtx>, unit: &JoinUnit, buf: &mut LocalBuffer) -> Result<()> {
    let data = unit.htf.bucket(unit.bucket)?;
    match ctx.cfg.join_mode {
        JoinMode::Broadcast => {
            // The unit is a build-side bucket; probe this node's own S table.
            // Equality only meets matches in the same-index bucket; any other
            // predicate has to sweep the whole table.
            if ctx.cfg.predicate.is_equality() {
                let s_bucket = &ctx.s_table.buckets[unit.bucket as usize];
                cross(ctx, &data, unit.source, s_bucket, buf);
            } else {
                for s_bucket in &ctx.s_table.buckets {
                    cross(ctx, &data, unit.source, s_bucket, buf);
                }
            }
        }
        JoinMode::HashDistributed => {
            // Probe the opposite-table units that were resident when this
            // unit arrived; later arrivals will probe this one in turn.
            for (other_source, other_data) in &unit.pair_snapshot {
                if unit.table == TABLE_R {
                    cross(ctx, &data, unit.source, other_data, buf);
                } else {
                    cross(ctx, other_data, *other_source, &data, buf);
                }
            }
        }
    }
    Ok(())
}

/// Emit every matching (r, s) pair. `source` is the node that contributed
/// the build-side tuples.
fn cross(ctx: &Arc<NodeCtx>, r: &TupleBuf, source: u32, s: &TupleBuf, buf: &mut LocalBuffer) {
    let pred = &ctx.cfg.predicate;
    let payloads = matches!(ctx.cfg.result_format, crate::config::ResultFormat::FullPayloads);
    for i in 0..r.len() {
        let rk = r.key(i);
        for j in 0..s.len() {
            let sk = s.key(j);
            if pred.matches(rk, sk) {
                if payloads {
                    buf.push(rk, sk, source, r.payload(i), s.payload(j));
                } else {
                    buf.push(rk, sk, source, &[], &[]);
                }
            }
        }
    }
}

/// Post-rendezvous cleanup for re-partitioned runs: pairing lists pin every
/// unit until the join is over, so the fragments are only retired here.
fn retire_fragments(ctx: &Arc<NodeCtx>, thread: &str) -> Result<()> {
    let htfs: Vec<Arc<crate::model::htf::Htf>> = ctx.shared.with(|s| {
        s.pair.clear();
        s.htfs.values().cloned().collect()
    });
    for htf in htfs {
        for b in htf.resident_buckets() {
            let freed = htf.free_bucket(b)?;
            if htf.pooled {
                ctx.pool.release(freed.bytes);
            }
            ctx.trace.rec(
                ctx.node_id,
                thread,
                "compute",
                trace::ev_free(htf.source_node, htf.table_id, b),
            );
        }
    }
    Ok(())
}
