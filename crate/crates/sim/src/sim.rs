use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::plan::FaultPlan;
use crate::trace::{EventKind, Trace, TraceEvent};
use crate::{Context, MsgId, ProcId, Process, Script, Tick};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("event budget of {budget} exhausted at tick {time} before the stop condition held")]
    Livelock { budget: u64, time: Tick },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    /// The stop condition held.
    Stopped { events: u64, time: Tick },
    /// No events remain.
    Quiescent { events: u64, time: Tick },
}

impl Outcome {
    pub fn time(&self) -> Tick {
        match self {
            Outcome::Stopped { time, .. } | Outcome::Quiescent { time, .. } => *time,
        }
    }
}

/// Counters of the faults the network actually applied.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NetStats {
    pub sent: u64,
    pub dropped: u64,
    pub duplicated: u64,
    pub reordered: u64,
}

enum Pending {
    Start(ProcId),
    Deliver {
        src: ProcId,
        dst: ProcId,
        msg: MsgId,
        payload: Vec<u8>,
    },
    Timer {
        pid: ProcId,
        tag: u64,
    },
}

struct Queued {
    time: Tick,
    seq: u64,
    ev: Pending,
}

impl PartialEq for Queued {
    fn eq(&self, o: &Self) -> bool {
        (self.time, self.seq) == (o.time, o.seq)
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for Queued {
    // Reversed so the max-heap pops the earliest (time, seq).
    fn cmp(&self, o: &Self) -> Ordering {
        (o.time, o.seq).cmp(&(self.time, self.seq))
    }
}

enum Effect {
    Send(ProcId, Vec<u8>),
    Timer(Tick, u64),
    Note(String),
}

struct Ctx {
    me: ProcId,
    now: Tick,
    n: usize,
    msg: Option<MsgId>,
    effects: Vec<Effect>,
}

impl Context for Ctx {
    fn me(&self) -> ProcId {
        self.me
    }

    fn now(&self) -> Tick {
        self.now
    }

    fn n(&self) -> usize {
        self.n
    }

    fn send(&mut self, dst: ProcId, payload: Vec<u8>) {
        self.effects.push(Effect::Send(dst, payload));
    }

    fn set_timer(&mut self, after: Tick, tag: u64) {
        self.effects.push(Effect::Timer(after, tag));
    }

    fn note(&mut self, text: String) {
        self.effects.push(Effect::Note(text));
    }

    fn current_msg(&self) -> Option<MsgId> {
        self.msg
    }
}

fn digest(payload: &[u8]) -> String {
    hex::encode(Sha256::digest(payload))
}

/// Single-threaded discrete-event executor over a fixed process set.
pub struct Simulator<P> {
    procs: Vec<P>,
    scripts: Vec<Option<Box<dyn Script>>>,
    plan: FaultPlan,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Queued>,
    now: Tick,
    queue_seq: u64,
    trace_seq: u64,
    next_msg: MsgId,
    link_last: HashMap<(ProcId, ProcId), Tick>,
    trace: Trace,
    processed: u64,
    started: bool,
    stats: NetStats,
}

impl<P: Process> Simulator<P> {
    pub fn new(procs: Vec<P>, plan: FaultPlan) -> Self {
        let n = procs.len();
        Self {
            procs,
            scripts: (0..n).map(|_| None).collect(),
            rng: ChaCha8Rng::seed_from_u64(plan.seed),
            plan,
            queue: BinaryHeap::new(),
            now: 0,
            queue_seq: 0,
            trace_seq: 0,
            next_msg: 0,
            link_last: HashMap::new(),
            trace: Trace::default(),
            processed: 0,
            started: false,
            stats: NetStats::default(),
        }
    }

    /// Wraps process `pid` in a Byzantine script.
    pub fn inject(&mut self, pid: ProcId, script: Box<dyn Script>) {
        self.scripts[pid as usize] = Some(script);
    }

    pub fn processes(&self) -> &[P] {
        &self.procs
    }

    pub fn processes_mut(&mut self) -> &mut [P] {
        &mut self.procs
    }

    pub fn plan(&self) -> &FaultPlan {
        &self.plan
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn stats(&self) -> NetStats {
        self.stats
    }

    pub fn into_parts(self) -> (Vec<P>, Trace) {
        (self.procs, self.trace)
    }

    /// Injects a message from outside the process set, e.g. a client
    /// command, delivered to `dst` after the normal link delay from `src`.
    pub fn post(&mut self, src: ProcId, dst: ProcId, payload: Vec<u8>) {
        self.transmit(src, dst, payload);
    }

    /// Schedules a timer on `pid` as if the process had set it.
    pub fn schedule_timer(&mut self, pid: ProcId, after: Tick, tag: u64) {
        let at = self.now + after;
        self.enqueue(at, Pending::Timer { pid, tag });
    }

    fn enqueue(&mut self, time: Tick, ev: Pending) {
        self.queue_seq += 1;
        self.queue.push(Queued {
            time,
            seq: self.queue_seq,
            ev,
        });
    }

    fn record(
        &mut self,
        kind: EventKind,
        src: ProcId,
        dst: ProcId,
        msg: Option<MsgId>,
        payload: Option<&[u8]>,
        note: Option<String>,
    ) {
        self.trace_seq += 1;
        let keep = self.plan.record_payloads;
        self.trace.events.push(TraceEvent {
            seq: self.trace_seq,
            time: self.now,
            kind,
            src,
            dst,
            msg,
            digest: payload.map(digest),
            payload: payload.filter(|_| keep).map(hex::encode),
            note,
        });
    }

    fn sample_delay(&mut self, src: ProcId, dst: ProcId) -> Tick {
        let (lo, hi) = self.plan.delay_bounds(src, dst);
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        self.rng.random_range(lo..=hi)
    }

    fn transmit(&mut self, src: ProcId, dst: ProcId, payload: Vec<u8>) {
        self.next_msg += 1;
        let msg = self.next_msg;
        self.stats.sent += 1;
        self.record(EventKind::Send, src, dst, Some(msg), Some(&payload), None);

        // Draw every random quantity up front so the stream consumed per
        // message is independent of which faults fire.
        let drop_roll: f64 = self.rng.random();
        let delay = self.sample_delay(src, dst);
        let reorder_roll: f64 = self.rng.random();
        let extra = self.rng.random_range(0..=self.plan.reorder_extra);
        let dup_roll: f64 = self.rng.random();
        let dup_delay = self.sample_delay(src, dst);

        if drop_roll < self.plan.drop_prob {
            self.stats.dropped += 1;
            self.record(EventKind::Drop, src, dst, Some(msg), Some(&payload), None);
            return;
        }
        let base = self.now + delay;
        let at = if reorder_roll < self.plan.reorder_prob {
            self.stats.reordered += 1;
            base + extra
        } else {
            let last = self.link_last.entry((src, dst)).or_insert(0);
            let at = base.max(*last);
            *last = at;
            at
        };
        if dup_roll < self.plan.duplicate_prob {
            self.stats.duplicated += 1;
            self.enqueue(
                at + dup_delay,
                Pending::Deliver {
                    src,
                    dst,
                    msg,
                    payload: payload.clone(),
                },
            );
        }
        self.enqueue(
            at,
            Pending::Deliver {
                src,
                dst,
                msg,
                payload,
            },
        );
    }

    fn apply(&mut self, me: ProcId, effects: Vec<Effect>) {
        for e in effects {
            match e {
                Effect::Send(dst, payload) => {
                    let outgoing = match self.scripts[me as usize].as_mut() {
                        Some(s) => s.outbound(self.now, dst, payload),
                        None => vec![(dst, payload)],
                    };
                    for (d, p) in outgoing {
                        if (d as usize) < self.procs.len() {
                            self.transmit(me, d, p);
                        }
                    }
                }
                Effect::Timer(after, tag) => {
                    let at = self.now + after;
                    self.enqueue(at, Pending::Timer { pid: me, tag });
                }
                Effect::Note(text) => self.record(EventKind::Note, me, me, None, None, Some(text)),
            }
        }
    }

    fn ctx(&self, me: ProcId, msg: Option<MsgId>) -> Ctx {
        Ctx {
            me,
            now: self.now,
            n: self.procs.len(),
            msg,
            effects: Vec::new(),
        }
    }

    fn step(&mut self, q: Queued) {
        self.now = q.time;
        match q.ev {
            Pending::Start(pid) => {
                let mut ctx = self.ctx(pid, None);
                self.procs[pid as usize].on_start(&mut ctx);
                self.apply(pid, ctx.effects);
            }
            Pending::Deliver {
                src,
                dst,
                msg,
                payload,
            } => {
                self.record(
                    EventKind::Deliver,
                    src,
                    dst,
                    Some(msg),
                    Some(&payload),
                    None,
                );
                let payload = match self.scripts[dst as usize].as_mut() {
                    Some(s) => s.inbound(self.now, src, payload),
                    None => Some(payload),
                };
                if let Some(payload) = payload {
                    let mut ctx = self.ctx(dst, Some(msg));
                    self.procs[dst as usize].on_message(&mut ctx, src, &payload);
                    self.apply(dst, ctx.effects);
                }
            }
            Pending::Timer { pid, tag } => {
                self.record(
                    EventKind::Timer,
                    pid,
                    pid,
                    None,
                    None,
                    Some(tag.to_string()),
                );
                let mut ctx = self.ctx(pid, None);
                self.procs[pid as usize].on_timer(&mut ctx, tag);
                self.apply(pid, ctx.effects);
            }
        }
    }

    /// Processes events until `stop` holds (checked before each event),
    /// the queue drains, or the event budget runs out.
    pub fn run(&mut self, mut stop: impl FnMut(&[P], Tick) -> bool) -> Result<Outcome, SimError> {
        if !self.started {
            self.started = true;
            for pid in 0..self.procs.len() as ProcId {
                self.enqueue(0, Pending::Start(pid));
            }
        }
        loop {
            if stop(&self.procs, self.now) {
                return Ok(Outcome::Stopped {
                    events: self.processed,
                    time: self.now,
                });
            }
            let Some(q) = self.queue.pop() else {
                return Ok(Outcome::Quiescent {
                    events: self.processed,
                    time: self.now,
                });
            };
            if self.processed >= self.plan.max_events {
                self.queue.push(q);
                return Err(SimError::Livelock {
                    budget: self.plan.max_events,
                    time: self.now,
                });
            }
            self.processed += 1;
            self.step(q);
        }
    }

    pub fn run_to_quiescence(&mut self) -> Result<Outcome, SimError> {
        self.run(|_, _| false)
    }
}
