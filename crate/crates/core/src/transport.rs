//! Byte-stream transport behind the shuffle: real TCP sockets for process
//! deployments and a monitor-based in-memory network for simulation. Both
//! present plain blocking `Read`/`Write` streams with socket-like EOF and
//! broken-pipe semantics.

use std::collections::{HashMap, VecDeque};
use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crate::config::RetryPolicy;
use crate::error::{Error, Result};
use crate::sync::{Clock, Monitor, SchedHandle};

pub trait Conn: Read + Write + Send {}
impl<T: Read + Write + Send> Conn for T {}

pub trait Listener: Send + Sync {
    /// Block until a connection arrives. Returns `Aborted` after `shutdown`.
    fn accept(&self) -> Result<Box<dyn Conn>>;
    fn shutdown(&self);
    fn local_sport(&self) -> u16;
}

pub trait Transport: Send + Sync {
    fn listen(&self, ip: &str, sport: u16) -> Result<Box<dyn Listener>>;
    fn connect(&self, ip: &str, sport: u16) -> Result<Box<dyn Conn>>;
}

/// Dial with exponential backoff so nodes may start in any order.
pub fn connect_with_retry(
    transport: &dyn Transport,
    ip: &str,
    sport: u16,
    policy: &RetryPolicy,
    clock: &Clock,
) -> Result<Box<dyn Conn>> {
    let mut backoff_ms = policy.initial_backoff_ms;
    let mut last = String::new();
    for attempt in 1..=policy.max_attempts {
        match transport.connect(ip, sport) {
            Ok(c) => return Ok(c),
            Err(Error::Deadlock(m)) => return Err(Error::Deadlock(m)),
            Err(e) => {
                last = e.to_string();
                if attempt < policy.max_attempts {
                    log::debug!("connect {ip}:{sport} attempt {attempt} failed ({last}), retrying in {backoff_ms} ms");
                    clock.sleep(Duration::from_millis(backoff_ms))?;
                    backoff_ms = backoff_ms.saturating_mul(policy.backoff_factor as u64);
                }
            }
        }
    }
    Err(Error::Transport(format!(
        "gave up connecting to {ip}:{sport} after {} attempts: {last}",
        policy.max_attempts
    )))
}

// ---------------------------------------------------------------------------
// TCP

pub struct TcpTransport;

struct TcpListenerWrap {
    inner: TcpListener,
    closing: Arc<AtomicBool>,
    sport: u16,
}

impl Listener for TcpListenerWrap {
    fn accept(&self) -> Result<Box<dyn Conn>> {
        loop {
            if self.closing.load(Ordering::SeqCst) {
                return Err(Error::Aborted("listener shut down".into()));
            }
            let (stream, _peer) = self.inner.accept().map_err(Error::Io)?;
            if self.closing.load(Ordering::SeqCst) {
                return Err(Error::Aborted("listener shut down".into()));
            }
            stream.set_nodelay(true).ok();
            return Ok(Box::new(stream));
        }
    }

    fn shutdown(&self) {
        self.closing.store(true, Ordering::SeqCst);
        // Unblock a pending accept with a throwaway connection to ourselves.
        let _ = TcpStream::connect(("127.0.0.1", self.sport));
    }

    fn local_sport(&self) -> u16 {
        self.sport
    }
}

impl Transport for TcpTransport {
    fn listen(&self, ip: &str, sport: u16) -> Result<Box<dyn Listener>> {
        let inner = TcpListener::bind((ip, sport)).map_err(Error::Io)?;
        let sport = inner.local_addr().map_err(Error::Io)?.port();
        Ok(Box::new(TcpListenerWrap { inner, closing: Arc::new(AtomicBool::new(false)), sport }))
    }

    fn connect(&self, ip: &str, sport: u16) -> Result<Box<dyn Conn>> {
        let stream = TcpStream::connect((ip, sport))
            .map_err(|e| Error::Transport(format!("connect {ip}:{sport}: {e}")))?;
        stream.set_nodelay(true).ok();
        Ok(Box::new(stream))
    }
}

// ---------------------------------------------------------------------------
// In-memory network

const PIPE_CAPACITY: usize = 64 * 1024;

struct PipeBuf {
    data: VecDeque<u8>,
    write_closed: bool,
    read_closed: bool,
}

fn new_pipe(label: &str, sched: SchedHandle) -> Arc<Monitor<PipeBuf>> {
    Arc::new(Monitor::new(
        label,
        PipeBuf { data: VecDeque::new(), write_closed: false, read_closed: false },
        sched,
    ))
}

fn to_io(e: Error) -> io::Error {
    io::Error::other(e.to_string())
}

/// One end of an in-memory duplex stream.
pub struct MemConn {
    tx: Arc<Monitor<PipeBuf>>,
    rx: Arc<Monitor<PipeBuf>>,
}

pub fn mem_pair(label: &str, sched: SchedHandle) -> (MemConn, MemConn) {
    let ab = new_pipe(&format!("{label}:fwd"), sched.clone());
    let ba = new_pipe(&format!("{label}:rev"), sched);
    (
        MemConn { tx: Arc::clone(&ab), rx: Arc::clone(&ba) },
        MemConn { tx: ba, rx: ab },
    )
}

impl Read for MemConn {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        let n = self
            .rx
            .wait_until(|p| {
                if !p.data.is_empty() {
                    let n = buf.len().min(p.data.len());
                    let (a, b) = p.data.as_slices();
                    let na = n.min(a.len());
                    buf[..na].copy_from_slice(&a[..na]);
                    if n > na {
                        buf[na..n].copy_from_slice(&b[..n - na]);
                    }
                    p.data.drain(..n);
                    Some(n)
                } else if p.write_closed {
                    Some(0)
                } else {
                    None
                }
            })
            .map_err(to_io)?;
        if n > 0 {
            self.rx.notify(); // space freed for the writer
        }
        Ok(n)
    }
}

impl Write for MemConn {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        let n = self
            .tx
            .wait_until(|p| {
                if p.read_closed {
                    return Some(Err(io::Error::new(io::ErrorKind::BrokenPipe, "peer closed")));
                }
                let space = PIPE_CAPACITY - p.data.len();
                if space == 0 {
                    return None;
                }
                let n = space.min(buf.len());
                p.data.extend(&buf[..n]);
                Some(Ok(n))
            })
            .map_err(to_io)??;
        self.tx.notify();
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Drop for MemConn {
    fn drop(&mut self) {
        self.tx.with_notify(|p| p.write_closed = true);
        self.rx.with_notify(|p| p.read_closed = true);
    }
}

struct AcceptState {
    pending: VecDeque<MemConn>,
    closed: bool,
}

struct MemListenerInner {
    queue: Monitor<AcceptState>,
    sport: u16,
}

struct MemListener {
    inner: Arc<MemListenerInner>,
}

impl Listener for MemListener {
    fn accept(&self) -> Result<Box<dyn Conn>> {
        let conn = self.inner.queue.wait_until(|s| {
            if let Some(c) = s.pending.pop_front() {
                Some(Ok(c))
            } else if s.closed {
                Some(Err(Error::Aborted("listener shut down".into())))
            } else {
                None
            }
        })??;
        Ok(Box::new(conn))
    }

    fn shutdown(&self) {
        self.inner.queue.with_notify(|s| s.closed = true);
    }

    fn local_sport(&self) -> u16 {
        self.inner.sport
    }
}

struct MemNet {
    registry: Monitor<HashMap<(String, u16), Arc<MemListenerInner>>>,
    sched: SchedHandle,
}

/// Whole-cluster loopback network. Cloning shares the namespace; separate
/// instances are fully isolated, so concurrent tests never collide on ports.
/// A connect blocks until the target binds rather than refusing, which keeps
/// startup order off the schedule-sensitive path; a missing listener shows up
/// as a deadlock diagnosis instead of a flaky refusal.
#[derive(Clone)]
pub struct MemoryTransport {
    net: Arc<MemNet>,
}

impl MemoryTransport {
    pub fn new(sched: SchedHandle) -> Self {
        MemoryTransport {
            net: Arc::new(MemNet {
                registry: Monitor::new("mem-net", HashMap::new(), sched.clone()),
                sched,
            }),
        }
    }
}

impl Transport for MemoryTransport {
    fn listen(&self, ip: &str, sport: u16) -> Result<Box<dyn Listener>> {
        assert!(sport != 0, "in-memory network needs explicit ports");
        let inner = Arc::new(MemListenerInner {
            queue: Monitor::new(
                &format!("accept:{ip}:{sport}"),
                AcceptState { pending: VecDeque::new(), closed: false },
                self.net.sched.clone(),
            ),
            sport,
        });
        let key = (ip.to_string(), sport);
        let inserted = self.net.registry.with_notify(|reg| {
            if reg.contains_key(&key) {
                false
            } else {
                reg.insert(key.clone(), Arc::clone(&inner));
                true
            }
        });
        if !inserted {
            return Err(Error::Transport(format!("address {ip}:{sport} already bound")));
        }
        Ok(Box::new(MemListener { inner }))
    }

    fn connect(&self, ip: &str, sport: u16) -> Result<Box<dyn Conn>> {
        let key = (ip.to_string(), sport);
        let target = self
            .net
            .registry
            .wait_until(|reg| reg.get(&key).map(Arc::clone))?;
        let (client, server) = mem_pair(&format!("pipe:{ip}:{sport}"), self.net.sched.clone());
        let accepted = target.queue.with_notify(|s| {
            if s.closed {
                false
            } else {
                s.pending.push_back(server);
                true
            }
        });
        if !accepted {
            return Err(Error::Transport(format!("{ip}:{sport} no longer accepting")));
        }
        Ok(Box::new(client))
    }
}
