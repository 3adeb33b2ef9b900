//! Communication handlers: outbound transfers, inbound stream processing,
//! and the accept loop that types connections into receive-queue records.

use std::sync::Arc;

use crate::config::{JoinMode, TABLE_R, TABLE_S};
use crate::error::{Error, Result};
use crate::event::{InboundStream, RecvEvent, SendEvent, SendTarget};
use crate::trace;
use crate::transport::connect_with_retry;
use crate::wire::{
    self, read_preamble, SendAccount, StreamPreamble, KIND_PARTITION, KIND_RESULT,
};

use super::NodeCtx;

pub fn send_loop(ctx: &Arc<NodeCtx>, thread_idx: usize) -> Result<()> {
    let thread = format!("send-{thread_idx}");
    let node = ctx.node_id;
    let mut busy_ns = 0u64;
    loop {
        let ev = match ctx.q_send.pop() {
            Ok(ev) => ev,
            Err(e) => {
                ctx.add_busy("send", busy_ns);
                return Err(e);
            }
        };
        let t0 = ctx.clock.now_ns();
        match ev {
            SendEvent::PartitionReady(target) => {
                ctx.trace.rec(
                    node,
                    &thread,
                    "send",
                    trace::ev_pop(trace::Q_SEND, "PARTITION_READY", &trace::detail_dst(target.node_id)),
                );
                if ctx.delays.applies(node) && !ctx.delays.send_task_delay.is_zero() {
                    ctx.clock.sleep(ctx.delays.send_task_delay)?;
                }
                let acct = transfer_partition(ctx, &target)?;
                ctx.report.with(|r| {
                    r.payload_bytes_sent += acct.payload_bytes;
                    r.framing_bytes_sent += acct.framing_bytes;
                });
                busy_ns += ctx.clock.now_ns().saturating_sub(t0);
            }
            SendEvent::ResultReady(target) => {
                // Result hand-off happens after the join span; it is kept out
                // of the busy and shuffle-volume accounting.
                ctx.trace.rec(
                    node,
                    &thread,
                    "send",
                    trace::ev_pop(trace::Q_SEND, "RESULT_READY", &trace::detail_dst(target.node_id)),
                );
                if !ctx.is_sink() {
                    transfer_results(ctx, &target)?;
                }
                ctx.trace.rec(node, &thread, "send", trace::ev_push(trace::Q_SEND, "EXIT", ""));
                ctx.q_send.push(SendEvent::Exit)?;
                if !ctx.is_sink() {
                    ctx.trace.rec(node, &thread, "send", trace::ev_push(trace::Q_RECV, "EXIT", ""));
                    ctx.q_recv.push(RecvEvent::Exit)?;
                }
            }
            SendEvent::Exit => {
                ctx.trace.rec(node, &thread, "send", trace::ev_pop(trace::Q_SEND, "EXIT", ""));
                ctx.trace.rec(node, &thread, "send", trace::ev_push(trace::Q_SEND, "EXIT", ""));
                ctx.q_send.push(SendEvent::Exit)?;
                ctx.add_busy("send", busy_ns);
                return Ok(());
            }
        }
    }
}

/// Ship this node's share of the shuffle to one peer. Replicated mode sends
/// the whole build side; re-partitioned mode sends the peer's owned buckets
/// of both tables back to back on one connection.
fn transfer_partition(ctx: &Arc<NodeCtx>, target: &SendTarget) -> Result<SendAccount> {
    let mut conn =
        connect_with_retry(&*ctx.transport, &target.ip, target.sport, &ctx.cfg.retry, &ctx.clock)?;
    let node = ctx.node_id;
    let nb = ctx.cfg.num_buckets;
    let mut acct = SendAccount::default();
    match ctx.cfg.join_mode {
        JoinMode::Broadcast => {
            let buckets = ctx
                .r_table
                .buckets
                .iter()
                .enumerate()
                .map(|(i, b)| (i as u32, b));
            acct.add(wire::send_partition_segment(&mut conn, node, TABLE_R, nb, buckets)?);
        }
        JoinMode::HashDistributed => {
            let owned = crate::config::assign_buckets(target.node_id, ctx.num_nodes(), nb);
            for (table, tbl) in [(TABLE_R, &ctx.r_table), (TABLE_S, &ctx.s_table)] {
                let buckets = owned.iter().map(|&b| (b, &tbl.buckets[b as usize]));
                acct.add(wire::send_partition_segment(&mut conn, node, table, nb, buckets)?);
            }
        }
    }
    conn.flush()?;
    wire::read_ack(&mut conn)?;
    Ok(acct)
}

fn transfer_results(ctx: &Arc<NodeCtx>, target: &SendTarget) -> Result<()> {
    let blocks = ctx.results.take_blocks();
    let mut conn =
        connect_with_retry(&*ctx.transport, &target.ip, target.sport, &ctx.cfg.retry, &ctx.clock)?;
    wire::send_result_stream(&mut conn, ctx.node_id, &blocks)?;
    conn.flush()?;
    wire::read_ack(&mut conn)?;
    Ok(())
}

pub fn recv_loop(ctx: &Arc<NodeCtx>, thread_idx: usize) -> Result<()> {
    let thread = format!("recv-{thread_idx}");
    let node = ctx.node_id;
    let mut busy_ns = 0u64;
    loop {
        let ev = match ctx.q_recv.pop() {
            Ok(ev) => ev,
            Err(e) => {
                ctx.add_busy("recv", busy_ns);
                return Err(e);
            }
        };
        let t0 = ctx.clock.now_ns();
        match ev {
            RecvEvent::PartitionReady(stream) => {
                let blocked = process_partition_stream(ctx, &thread, stream)?;
                busy_ns += ctx.clock.now_ns().saturating_sub(t0).saturating_sub(blocked);
            }
            RecvEvent::ResultReady(stream) => {
                // Post-span work, like the matching send path.
                process_result_stream(ctx, &thread, stream)?;
            }
            RecvEvent::Exit => {
                ctx.trace.rec(node, &thread, "recv", trace::ev_pop(trace::Q_RECV, "EXIT", ""));
                ctx.trace.rec(node, &thread, "recv", trace::ev_push(trace::Q_RECV, "EXIT", ""));
                ctx.q_recv.push(RecvEvent::Exit)?;
                if ctx.is_sink() && thread_idx == 0 {
                    ctx.trace
                        .rec(node, &thread, "recv", trace::ev_push(trace::Q_COMPUTE, "EXIT", ""));
                    ctx.q_compute.push(crate::event::ComputeEvent::Exit)?;
                }
                ctx.add_busy("recv", busy_ns);
                return Ok(());
            }
        }
    }
}

/// Drain one peer's partition connection: every bucket frame becomes a pooled,
/// materialized join unit. Returns the nanoseconds spent blocked on the pool.
fn process_partition_stream(
    ctx: &Arc<NodeCtx>,
    thread: &str,
    stream: InboundStream,
) -> Result<u64> {
    let InboundStream { mut conn, preamble } = stream;
    let source = preamble.sender;
    if source == ctx.node_id || source >= ctx.num_nodes() {
        return Err(Error::Protocol(format!("partition stream from bad sender {source}")));
    }
    let mut blocked_total = 0u64;
    let mut framing = 0u64;
    let mut payload = 0u64;

    let segments: &[u32] = match ctx.cfg.join_mode {
        JoinMode::Broadcast => &[TABLE_R],
        JoinMode::HashDistributed => &[TABLE_R, TABLE_S],
    };
    let mut pre = preamble;
    for (i, &table) in segments.iter().enumerate() {
        if i > 0 {
            // Follow-on segment on the same connection.
            pre = read_preamble(&mut conn)?;
        }
        check_segment_preamble(ctx, &pre, source, table)?;
        framing += pre.encoded_len() as u64;
        let htf = ctx.htf(source, table);
        let mut admitted = 0u32;
        loop {
            match wire::read_bucket_frame(&mut conn, ctx.cfg.tuple_size, ctx.cfg.num_buckets)? {
                Some((bucket, tuples)) => {
                    framing += 8;
                    payload += tuples.byte_len() as u64;
                    if ctx.delays.applies(ctx.node_id) && !ctx.delays.bucket_materialize_delay.is_zero() {
                        ctx.clock.sleep(ctx.delays.bucket_materialize_delay)?;
                    }
                    blocked_total += ctx.pool.acquire(tuples.byte_len())?;
                    ctx.admit_unit(thread, "recv", source, table, bucket, Arc::new(tuples), &htf)?;
                    admitted += 1;
                }
                None => {
                    framing += 4;
                    htf.set_expected(admitted)?;
                    break;
                }
            }
        }
    }
    wire::write_ack(&mut conn)?;
    ctx.report.with(|r| {
        r.payload_bytes_received += payload;
        r.framing_bytes_received += framing;
        r.pool_block_ns += blocked_total;
    });
    ctx.partition_stream_complete(thread, "recv", source)?;
    Ok(blocked_total)
}

fn check_segment_preamble(
    ctx: &Arc<NodeCtx>,
    pre: &StreamPreamble,
    source: u32,
    table: u32,
) -> Result<()> {
    if pre.kind != KIND_PARTITION {
        return Err(Error::Protocol(format!("expected a partition segment, got kind {}", pre.kind)));
    }
    if pre.sender != source {
        return Err(Error::Protocol(format!(
            "segment sender changed mid-connection: {} then {}",
            source, pre.sender
        )));
    }
    if pre.table_id != table {
        return Err(Error::Protocol(format!(
            "expected table {table} in this segment, got {}",
            pre.table_id
        )));
    }
    if pre.num_buckets != ctx.cfg.num_buckets {
        return Err(Error::Protocol(format!(
            "peer {} laid out {} buckets but this node has {}",
            source, pre.num_buckets, ctx.cfg.num_buckets
        )));
    }
    Ok(())
}

fn process_result_stream(ctx: &Arc<NodeCtx>, thread: &str, stream: InboundStream) -> Result<()> {
    let InboundStream { mut conn, preamble } = stream;
    let source = preamble.sender;
    if !ctx.is_sink() {
        return Err(Error::Protocol(format!(
            "node {} is not the sink but got a result stream from {source}",
            ctx.node_id
        )));
    }
    if source == ctx.node_id || source >= ctx.num_nodes() {
        return Err(Error::Protocol(format!("result stream from bad sender {source}")));
    }
    let blocks = wire::read_result_stream_body(&mut conn, ctx.codec().entry_size())?;
    for b in blocks {
        ctx.results.append_block(b);
    }
    wire::write_ack(&mut conn)?;
    ctx.result_stream_complete(thread, "recv", source)
}

/// Accept connections, read each preamble, and push a typed record. Exits
/// when the listener is shut down (normal termination or abort).
pub fn listener_loop(ctx: &Arc<NodeCtx>) -> Result<()> {
    loop {
        let mut conn = match ctx.listener.accept() {
            Ok(c) => c,
            Err(_) => return Ok(()),
        };
        match read_preamble(&mut conn) {
            Ok(pre) if pre.kind == KIND_PARTITION => {
                ctx.q_recv.push(RecvEvent::PartitionReady(InboundStream { conn, preamble: pre }))?;
            }
            Ok(pre) if pre.kind == KIND_RESULT => {
                ctx.q_recv.push(RecvEvent::ResultReady(InboundStream { conn, preamble: pre }))?;
            }
            Ok(pre) => {
                log::warn!(
                    "node {}: dropping connection with unknown stream kind {}",
                    ctx.node_id,
                    pre.kind
                );
            }
            Err(e) => {
                log::warn!("node {}: dropping connection with bad preamble: {e}", ctx.node_id);
            }
        }
    }
}
