//! Causal message delivery as a middlebox over the simulator.
//!
//! Egress attaches a freshly proven clock to every application payload.
//! Ingress verifies it and discards anything that happened before what the
//! process already knows (reject-stale rather than buffer-and-wait).
//!
//! Merging is lazy: delivered clocks are held in a pending set and folded
//! into the next egress `Update(self, local, pending)`. A send therefore
//! costs one proof regardless of how many messages arrived before it, and
//! a process that only receives never touches the backend.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use vlc_core::codec::{put_bytes, DecodeError, Reader};
use vlc_core::keys::{sha256, Digest};
use vlc_core::{ClockClient, ClockOrdering, ClockValue, EntityId, Vlc};
use vlc_sim::{Context, EventKind, MsgId, ProcId, Process, Tick, Trace};

use crate::common::entity;

/// Application payload with the sender's clock attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub sender: EntityId,
    pub clock: Vlc,
    pub payload: Vec<u8>,
}

impl Envelope {
    /// `sender ‖ clock ‖ payload`, each length-prefixed. The clock field is
    /// the canonical value followed by its proofs.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_bytes(&mut out, self.sender.as_bytes());
        put_bytes(&mut out, &self.clock.to_bytes());
        put_bytes(&mut out, &self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let sender =
            EntityId::new(r.bytes()?).map_err(|e| DecodeError::invalid("sender", e.to_string()))?;
        let clock = Vlc::from_bytes(r.bytes()?)?;
        let payload = r.bytes()?.to_vec();
        r.finish()?;
        Ok(Self {
            sender,
            clock,
            payload,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Discard {
    Malformed,
    InvalidProof,
    Stale,
    Duplicate,
}

impl Discard {
    pub fn name(self) -> &'static str {
        match self {
            Discard::Malformed => "malformed",
            Discard::InvalidProof => "invalid-proof",
            Discard::Stale => "stale",
            Discard::Duplicate => "duplicate",
        }
    }
}

impl fmt::Display for Discard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One application-level delivery.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub msg: Option<MsgId>,
    pub sender: EntityId,
    pub clock: ClockValue,
    pub payload: Vec<u8>,
}

/// What a process does when a step fires.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Act {
    Send {
        dst: ProcId,
        payload: Vec<u8>,
    },
    /// A local event: advances the clock without sending.
    Local,
}

impl Act {
    pub fn send(dst: ProcId, payload: &str) -> Self {
        Act::Send {
            dst,
            payload: payload.as_bytes().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trigger {
    At(Tick),
    /// Fires on every delivery of exactly this payload.
    OnDeliver(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub trigger: Trigger,
    pub acts: Vec<Act>,
}

impl Step {
    pub fn at(t: Tick, acts: Vec<Act>) -> Self {
        Self {
            trigger: Trigger::At(t),
            acts,
        }
    }

    pub fn on(payload: &str, acts: Vec<Act>) -> Self {
        Self {
            trigger: Trigger::OnDeliver(payload.as_bytes().to_vec()),
            acts,
        }
    }
}

/// Random-looking but deterministic chatter: each process starts `initial`
/// chains and every delivered chain message is forwarded until its hop
/// budget runs out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gossip {
    pub initial: u32,
    pub hops: u8,
}

const GOSSIP_TAG: u8 = b'g';

fn gossip_payload(hops: u8, origin: ProcId, seq: u32) -> Vec<u8> {
    let mut p = vec![GOSSIP_TAG, hops];
    p.extend_from_slice(&origin.to_be_bytes());
    p.extend_from_slice(&seq.to_be_bytes());
    p
}

/// Picks a peer other than `me` from a payload digest.
fn pick_peer(me: ProcId, n: usize, salt: &[u8]) -> ProcId {
    let d = sha256(salt);
    let r = u64::from_be_bytes(d[..8].try_into().expect("8 bytes")) % (n as u64 - 1);
    let p = r as ProcId;
    if p >= me {
        p + 1
    } else {
        p
    }
}

/// The per-process middlebox plus a tiny scripted application on top.
pub struct CausalNode {
    pid: ProcId,
    me: EntityId,
    client: ClockClient,
    /// When false the node accepts clocks without checking proofs. Only
    /// used as a negative control to show what verification prevents.
    check_proofs: bool,
    local: Vlc,
    pending: Vec<Vlc>,
    /// `local ⊔ pending`: everything this process has delivered or issued.
    knowledge: ClockValue,
    seen: HashSet<Digest>,
    steps: Vec<Step>,
    gossip: Option<Gossip>,
    pub delivered: Vec<Delivery>,
    /// Transport id, reason and (if decodable) the application payload.
    pub discarded: Vec<(Option<MsgId>, Discard, Vec<u8>)>,
    /// Clock attached to each send, in send order.
    pub sent: Vec<(ProcId, ClockValue, Vec<u8>)>,
    pub send_failures: u32,
}

impl CausalNode {
    pub fn new(pid: ProcId, client: ClockClient) -> Self {
        Self {
            pid,
            me: entity(pid),
            client,
            check_proofs: true,
            local: Vlc::genesis(),
            pending: Vec::new(),
            knowledge: ClockValue::new(),
            seen: HashSet::new(),
            steps: Vec::new(),
            gossip: None,
            delivered: Vec::new(),
            discarded: Vec::new(),
            sent: Vec::new(),
            send_failures: 0,
        }
    }

    pub fn with_steps(mut self, steps: Vec<Step>) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_gossip(mut self, g: Gossip) -> Self {
        self.gossip = Some(g);
        self
    }

    pub fn without_proof_checks(mut self) -> Self {
        self.check_proofs = false;
        self
    }

    pub fn local(&self) -> &Vlc {
        &self.local
    }

    pub fn knowledge(&self) -> &ClockValue {
        &self.knowledge
    }

    /// Folds pending deliveries into a new own clock.
    fn advance(&mut self) -> Result<(), vlc_core::ClientError> {
        let next = self
            .client
            .update(&self.me, &self.local, &self.pending, &[])?;
        self.knowledge = next.value().clone();
        self.local = next;
        self.pending.clear();
        Ok(())
    }

    /// Egress: proves a fresh clock and sends the envelope.
    pub fn send(&mut self, ctx: &mut dyn Context, dst: ProcId, payload: Vec<u8>) {
        if let Err(e) = self.advance() {
            self.send_failures += 1;
            ctx.note(format!("send-failed dst={dst} error={e}"));
            return;
        }
        let env = Envelope {
            sender: self.me.clone(),
            clock: self.local.clone(),
            payload,
        };
        self.sent
            .push((dst, self.local.value().clone(), env.payload.clone()));
        ctx.send(dst, env.to_bytes());
    }

    fn local_event(&mut self, ctx: &mut dyn Context) {
        if let Err(e) = self.advance() {
            self.send_failures += 1;
            ctx.note(format!("local-failed error={e}"));
        }
    }

    /// Ingress decision, without side effects on the application.
    fn admit(&mut self, bytes: &[u8]) -> Result<Envelope, Discard> {
        let env = Envelope::from_bytes(bytes).map_err(|_| Discard::Malformed)?;
        let digest = sha256(bytes);
        if self.seen.contains(&digest) {
            return Err(Discard::Duplicate);
        }
        if self.check_proofs && !self.client.verify(&env.clock) {
            return Err(Discard::InvalidProof);
        }
        if env.clock.value().compare(&self.knowledge) == ClockOrdering::Before {
            return Err(Discard::Stale);
        }
        self.seen.insert(digest);
        Ok(env)
    }

    fn run_acts(&mut self, ctx: &mut dyn Context, acts: Vec<Act>) {
        for act in acts {
            match act {
                Act::Send { dst, payload } => self.send(ctx, dst, payload),
                Act::Local => self.local_event(ctx),
            }
        }
    }
}

impl Process for CausalNode {
    fn on_start(&mut self, ctx: &mut dyn Context) {
        for (i, s) in self.steps.iter().enumerate() {
            if let Trigger::At(t) = s.trigger {
                ctx.set_timer(t, i as u64);
            }
        }
        if let Some(g) = self.gossip {
            if ctx.n() > 1 {
                for seq in 0..g.initial {
                    let p = gossip_payload(g.hops, self.pid, seq);
                    let dst = pick_peer(self.pid, ctx.n(), &p);
                    self.send(ctx, dst, p);
                }
            }
        }
    }

    fn on_message(&mut self, ctx: &mut dyn Context, _src: ProcId, bytes: &[u8]) {
        let msg = ctx.current_msg();
        let msg_tag = msg.map_or("-".to_string(), |m| m.to_string());
        let env = match self.admit(bytes) {
            Ok(env) => env,
            Err(reason) => {
                ctx.note(format!("discard msg={msg_tag} reason={reason}"));
                let payload = Envelope::from_bytes(bytes)
                    .map(|e| e.payload)
                    .unwrap_or_default();
                self.discarded.push((msg, reason, payload));
                return;
            }
        };
        ctx.note(format!(
            "deliver msg={msg_tag} clock={}",
            hex::encode(env.clock.value().to_bytes())
        ));
        self.knowledge.merge(env.clock.value());
        self.pending.push(env.clock.clone());
        self.delivered.push(Delivery {
            msg,
            sender: env.sender,
            clock: env.clock.value().clone(),
            payload: env.payload.clone(),
        });

        let fired: Vec<Vec<Act>> = self
            .steps
            .iter()
            .filter(|s| s.trigger == Trigger::OnDeliver(env.payload.clone()))
            .map(|s| s.acts.clone())
            .collect();
        for acts in fired {
            self.run_acts(ctx, acts);
        }

        if let (Some(_), [GOSSIP_TAG, hops, rest @ ..]) = (self.gossip, env.payload.as_slice()) {
            if *hops > 0 && ctx.n() > 1 {
                let mut p = vec![GOSSIP_TAG, hops - 1];
                p.extend_from_slice(rest);
                let mut salt = p.clone();
                salt.extend_from_slice(&self.pid.to_be_bytes());
                let dst = pick_peer(self.pid, ctx.n(), &salt);
                self.send(ctx, dst, p);
            }
        }
    }

    fn on_timer(&mut self, ctx: &mut dyn Context, tag: u64) {
        if let Some(step) = self.steps.get(tag as usize) {
            let acts = step.acts.clone();
            self.run_acts(ctx, acts);
        }
    }
}

/// A delivery order that contradicts causality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalViolation {
    pub process: ProcId,
    /// Delivered first.
    pub first: MsgId,
    /// Delivered later although it precedes `first`.
    pub later: MsgId,
    pub rule: ViolationRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationRule {
    /// `send(later) ≺ send(first)` in the transport-level happened-before.
    Transport,
    /// `clock(later) ≺ clock(first)`.
    Clock,
}

impl fmt::Display for CausalViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rule = match self.rule {
            ViolationRule::Transport => "transport",
            ViolationRule::Clock => "clock",
        };
        write!(
            f,
            "process {} delivered msg {} after msg {} ({rule} order)",
            self.process, self.later, self.first
        )
    }
}

struct TraceDelivery {
    msg: MsgId,
    clock: Option<ClockValue>,
}

fn parse_note(note: &str) -> Option<TraceDelivery> {
    let rest = note.strip_prefix("deliver ")?;
    let mut msg = None;
    let mut clock = None;
    for field in rest.split(' ') {
        if let Some(m) = field.strip_prefix("msg=") {
            msg = m.parse().ok();
        } else if let Some(c) = field.strip_prefix("clock=") {
            clock = hex::decode(c)
                .ok()
                .and_then(|b| ClockValue::from_bytes(&b).ok());
        }
    }
    Some(TraceDelivery { msg: msg?, clock })
}

/// Ground-truth checker over a recorded trace.
///
/// Builds the transport happened-before relation from send and receive
/// events (receipt counts even if the middlebox then discards), then checks
/// every pair of application deliveries at each process in `receivers`.
pub fn check_trace(trace: &Trace, receivers: &[ProcId]) -> Vec<CausalViolation> {
    let n = trace
        .events
        .iter()
        .map(|e| e.src.max(e.dst) as usize + 1)
        .max()
        .unwrap_or(0);
    let mut vc = vec![vec![0u32; n]; n];
    let mut stamp: BTreeMap<MsgId, Vec<u32>> = BTreeMap::new();
    let mut deliveries: Vec<Vec<TraceDelivery>> = (0..n).map(|_| Vec::new()).collect();
    for e in &trace.events {
        match e.kind {
            EventKind::Send => {
                let p = e.src as usize;
                vc[p][p] += 1;
                if let Some(m) = e.msg {
                    stamp.insert(m, vc[p].clone());
                }
            }
            EventKind::Deliver => {
                let q = e.dst as usize;
                if let Some(s) = e.msg.and_then(|m| stamp.get(&m)) {
                    for (a, b) in vc[q].iter_mut().zip(s) {
                        *a = (*a).max(*b);
                    }
                }
                vc[q][q] += 1;
            }
            EventKind::Note => {
                if let Some(d) = e.note.as_deref().and_then(parse_note) {
                    deliveries[e.src as usize].push(d);
                }
            }
            EventKind::Drop | EventKind::Timer => {}
        }
    }
    let precedes = |a: &[u32], b: &[u32]| a != b && a.iter().zip(b).all(|(x, y)| x <= y);
    let mut out = Vec::new();
    for &p in receivers {
        let Some(ds) = deliveries.get(p as usize) else {
            continue;
        };
        for (i, first) in ds.iter().enumerate() {
            for later in &ds[i + 1..] {
                if let (Some(a), Some(b)) = (stamp.get(&later.msg), stamp.get(&first.msg)) {
                    if precedes(a, b) {
                        out.push(CausalViolation {
                            process: p,
                            first: first.msg,
                            later: later.msg,
                            rule: ViolationRule::Transport,
                        });
                    }
                }
                if let (Some(a), Some(b)) = (&later.clock, &first.clock) {
                    if a.compare(b) == ClockOrdering::Before {
                        out.push(CausalViolation {
                            process: p,
                            first: first.msg,
                            later: later.msg,
                            rule: ViolationRule::Clock,
                        });
                    }
                }
            }
        }
    }
    out
}
