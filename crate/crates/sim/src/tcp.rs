//! Real-socket transport for [`Process`] handlers.
//!
//! Frames are `[u32 len][u32 src][payload]`, big-endian, where `len`
//! counts the source id and payload. Each process owns one listener; a
//! reader thread per inbound connection feeds a channel, and the handler
//! runs serially on the calling thread.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use crate::{Context, MsgId, ProcId, Process, Tick};

const MAX_FRAME: usize = 16 << 20;

pub fn write_frame(w: &mut impl Write, src: ProcId, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len() + 4)
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "payload too large"))?;
    let mut buf = Vec::with_capacity(payload.len() + 8);
    buf.extend_from_slice(&len.to_be_bytes());
    buf.extend_from_slice(&src.to_be_bytes());
    buf.extend_from_slice(payload);
    w.write_all(&buf)?;
    w.flush()
}

pub fn read_frame(r: &mut impl Read) -> io::Result<(ProcId, Vec<u8>)> {
    let mut hdr = [0u8; 4];
    r.read_exact(&mut hdr)?;
    let len = u32::from_be_bytes(hdr) as usize;
    if !(4..=MAX_FRAME).contains(&len) {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "bad frame length",
        ));
    }
    r.read_exact(&mut hdr)?;
    let src = u32::from_be_bytes(hdr);
    let mut payload = vec![0u8; len - 4];
    r.read_exact(&mut payload)?;
    Ok((src, payload))
}

fn accept_loop(listener: TcpListener, tx: Sender<(ProcId, Vec<u8>)>) {
    for conn in listener.incoming() {
        let Ok(mut stream) = conn else { continue };
        let tx = tx.clone();
        thread::spawn(move || {
            while let Ok(frame) = read_frame(&mut stream) {
                if tx.send(frame).is_err() {
                    return;
                }
            }
        });
    }
}

struct NetCtx<'a> {
    me: ProcId,
    start: Instant,
    peers: &'a [SocketAddr],
    conns: &'a mut HashMap<ProcId, TcpStream>,
    timers: &'a mut BinaryHeap<Reverse<(Instant, u64, u64)>>,
    timer_seq: &'a mut u64,
    msg: Option<MsgId>,
}

impl NetCtx<'_> {
    fn stream(&mut self, dst: ProcId) -> io::Result<&mut TcpStream> {
        if !self.conns.contains_key(&dst) {
            let addr = self
                .peers
                .get(dst as usize)
                .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("no peer {dst}")))?;
            let s = TcpStream::connect(addr)?;
            s.set_nodelay(true)?;
            self.conns.insert(dst, s);
        }
        Ok(self.conns.get_mut(&dst).expect("inserted above"))
    }
}

impl Context for NetCtx<'_> {
    fn me(&self) -> ProcId {
        self.me
    }

    /// Milliseconds since the node started.
    fn now(&self) -> Tick {
        self.start.elapsed().as_millis() as Tick
    }

    fn n(&self) -> usize {
        self.peers.len()
    }

    fn send(&mut self, dst: ProcId, payload: Vec<u8>) {
        let me = self.me;
        let res = self.stream(dst).and_then(|s| write_frame(s, me, &payload));
        if let Err(e) = res {
            log::warn!("node {me}: send to {dst} failed: {e}");
            self.conns.remove(&dst);
        }
    }

    fn set_timer(&mut self, after: Tick, tag: u64) {
        *self.timer_seq += 1;
        let at = Instant::now() + Duration::from_millis(after);
        self.timers.push(Reverse((at, *self.timer_seq, tag)));
    }

    fn note(&mut self, text: String) {
        log::info!("node {}: {text}", self.me);
    }

    fn current_msg(&self) -> Option<MsgId> {
        self.msg
    }
}

/// `stop` may depend on state outside the process, so it is re-checked at
/// least this often even when no event arrives.
const STOP_POLL: Duration = Duration::from_millis(20);

/// One process bound to a listener, reachable by peers at `peers[id]`.
pub struct TcpNode<P> {
    me: ProcId,
    peers: Vec<SocketAddr>,
    process: P,
    rx: Receiver<(ProcId, Vec<u8>)>,
}

impl<P: Process> TcpNode<P> {
    /// Starts accepting connections on `listener` immediately; handlers
    /// run only once [`TcpNode::run`] is called.
    pub fn new(me: ProcId, listener: TcpListener, peers: Vec<SocketAddr>, process: P) -> Self {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || accept_loop(listener, tx));
        Self {
            me,
            peers,
            process,
            rx,
        }
    }

    /// Drives the handler until `stop` holds or `limit` elapses. Returns
    /// the process either way, plus whether `stop` was reached.
    pub fn run(mut self, mut stop: impl FnMut(&P) -> bool, limit: Duration) -> (P, bool) {
        let start = Instant::now();
        let deadline = start + limit;
        let mut conns = HashMap::new();
        let mut timers = BinaryHeap::new();
        let mut timer_seq = 0u64;
        let mut received: MsgId = 0;
        macro_rules! ctx {
            ($msg:expr) => {
                NetCtx {
                    me: self.me,
                    start,
                    peers: &self.peers,
                    conns: &mut conns,
                    timers: &mut timers,
                    timer_seq: &mut timer_seq,
                    msg: $msg,
                }
            };
        }
        self.process.on_start(&mut ctx!(None));
        loop {
            if stop(&self.process) {
                return (self.process, true);
            }
            let now = Instant::now();
            if now >= deadline {
                return (self.process, false);
            }
            if let Some(Reverse((at, _, tag))) = timers.peek().copied() {
                if at <= now {
                    timers.pop();
                    self.process.on_timer(&mut ctx!(None), tag);
                    continue;
                }
            }
            let wake = timers
                .peek()
                .map(|Reverse((at, _, _))| *at)
                .unwrap_or(deadline)
                .min(deadline)
                .min(now + STOP_POLL);
            match self.rx.recv_timeout(wake.saturating_duration_since(now)) {
                Ok((src, payload)) => {
                    received += 1;
                    self.process
                        .on_message(&mut ctx!(Some(received)), src, &payload);
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return (self.process, false),
            }
        }
    }
}

/// Binds `n` listeners on localhost and returns them with their addresses.
pub fn bind_local(n: usize) -> io::Result<(Vec<TcpListener>, Vec<SocketAddr>)> {
    let listeners: Vec<TcpListener> = (0..n)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<io::Result<_>>()?;
    let addrs = listeners
        .iter()
        .map(|l| l.local_addr())
        .collect::<io::Result<_>>()?;
    Ok((listeners, addrs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, 7, b"abc").unwrap();
        assert_eq!(&buf[..8], &[0, 0, 0, 7, 0, 0, 0, 7]);
        assert_eq!(
            read_frame(&mut buf.as_slice()).unwrap(),
            (7, b"abc".to_vec())
        );
    }
}
