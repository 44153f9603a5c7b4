//! Byzantine-tolerant mutual exclusion with offline-checkable acquisition
//! proofs.
//!
//! Every message carries the sender's verifiable clock and a signature.
//! A process acquires once its own Request is the ⋖-smallest in its queue
//! and every peer has sent it something ordered after that Request. It then
//! hands a resource owner an [`AcquisitionProof`]: its Request plus one
//! Reply or Release from each peer, checkable by [`check_acquisition`]
//! without talking to anyone.
//!
//! Clock merging is lazy, as in [`crate::causal`]: received clocks are
//! folded into the next clock the process mints, and all messages sent from
//! one event handler share that clock.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;
use vlc_core::codec::{put_bytes, put_u32, put_u8, DecodeError, Reader};
use vlc_core::keys::{tagged_hash, SIGNATURE_LEN};
use vlc_core::{
    BackendKind, ClockClient, ClockOrdering, ClockValue, EntityId, FrontendKind, KeyPair,
    PublicKey, Verifier, Vlc,
};
use vlc_sim::{Context, EventKind, FaultPlan, ProcId, Process, SimError, Simulator, Tick, Trace};

use crate::common::{entity, process_deployment};
use crate::link::ReliableLink;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum MsgKind {
    Request = 1,
    Reply = 2,
    Release = 3,
    Query = 4,
    Ack = 5,
}

impl MsgKind {
    pub const ALL: [MsgKind; 5] = [
        MsgKind::Request,
        MsgKind::Reply,
        MsgKind::Release,
        MsgKind::Query,
        MsgKind::Ack,
    ];

    fn from_byte(b: u8) -> Result<Self, DecodeError> {
        Self::ALL
            .into_iter()
            .find(|k| *k as u8 == b)
            .ok_or_else(|| DecodeError::invalid("mutex message kind", b.to_string()))
    }

    pub fn name(self) -> &'static str {
        match self {
            MsgKind::Request => "request",
            MsgKind::Reply => "reply",
            MsgKind::Release => "release",
            MsgKind::Query => "query",
            MsgKind::Ack => "ack",
        }
    }
}

/// A signed protocol message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MutexMsg {
    pub kind: MsgKind,
    pub sender: EntityId,
    pub clock: Vlc,
    /// Reply only: the Request clock being answered.
    pub re: Option<ClockValue>,
    /// Reply only: queued Requests ⋖-before `re`, with their requesters.
    pub reply_clocks: Vec<(EntityId, ClockValue)>,
    pub sig: [u8; SIGNATURE_LEN],
}

fn entity_from(r: &mut Reader<'_>) -> Result<EntityId, DecodeError> {
    EntityId::new(r.bytes()?).map_err(|e| DecodeError::invalid("entity id", e.to_string()))
}

impl MutexMsg {
    /// `kind ‖ sender ‖ clock ‖ (Reply: re ‖ count ‖ (id ‖ clock)*)`.
    fn body(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_u8(&mut out, self.kind as u8);
        put_bytes(&mut out, self.sender.as_bytes());
        put_bytes(&mut out, &self.clock.to_bytes());
        if self.kind == MsgKind::Reply {
            self.re.clone().unwrap_or_default().encode_into(&mut out);
            put_u32(&mut out, self.reply_clocks.len() as u32);
            for (id, c) in &self.reply_clocks {
                put_bytes(&mut out, id.as_bytes());
                c.encode_into(&mut out);
            }
        }
        out
    }

    fn digest(&self) -> [u8; 32] {
        tagged_hash(b"CHRONO/MUTEX/v1", &[&self.body()])
    }

    pub fn signed(
        kind: MsgKind,
        sender: EntityId,
        clock: Vlc,
        re: Option<ClockValue>,
        reply_clocks: Vec<(EntityId, ClockValue)>,
        key: &KeyPair,
    ) -> Self {
        let mut m = Self {
            kind,
            sender,
            clock,
            re: if kind == MsgKind::Reply {
                Some(re.unwrap_or_default())
            } else {
                None
            },
            reply_clocks: if kind == MsgKind::Reply {
                reply_clocks
            } else {
                Vec::new()
            },
            sig: [0; SIGNATURE_LEN],
        };
        m.sig = key.sign(&m.digest());
        m
    }

    pub fn value(&self) -> &ClockValue {
        self.clock.value()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.body();
        out.extend_from_slice(&self.sig);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let kind = MsgKind::from_byte(r.u8()?)?;
        let sender = entity_from(&mut r)?;
        let clock = Vlc::from_bytes(r.bytes()?)?;
        let (re, reply_clocks) = if kind == MsgKind::Reply {
            let re = ClockValue::decode_from(&mut r)?;
            let n = r.u32()? as usize;
            let mut list = Vec::with_capacity(n.min(1024));
            for _ in 0..n {
                let id = entity_from(&mut r)?;
                list.push((id, ClockValue::decode_from(&mut r)?));
            }
            (Some(re), list)
        } else {
            (None, Vec::new())
        };
        let sig = r.array::<SIGNATURE_LEN>()?;
        r.finish()?;
        Ok(Self {
            kind,
            sender,
            clock,
            re,
            reply_clocks,
            sig,
        })
    }
}

/// Who may take part, with their message-signing keys.
#[derive(Debug, Clone)]
pub struct Roster {
    pub members: Vec<(EntityId, PublicKey)>,
    pub verifier: Arc<Verifier>,
}

impl Roster {
    pub fn index_of(&self, id: &EntityId) -> Option<ProcId> {
        self.members
            .iter()
            .position(|(m, _)| m == id)
            .map(|i| i as ProcId)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Signature by the claimed sender and a verifying clock.
    pub fn authentic(&self, m: &MutexMsg) -> bool {
        let Some(i) = self.index_of(&m.sender) else {
            return false;
        };
        self.members[i as usize].1.verify(&m.digest(), &m.sig) && self.verifier.verify(&m.clock)
    }
}

fn total(a: &ClockValue, b: &ClockValue) -> Ordering {
    a.total_cmp(b)
}

fn after(a: &ClockValue, b: &ClockValue) -> bool {
    a.compare(b) == ClockOrdering::After
}

/// What a lock holder shows the resource owner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcquisitionProof {
    pub request: MutexMsg,
    /// One Reply or Release per other roster member.
    pub entries: Vec<MutexMsg>,
}

impl AcquisitionProof {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_bytes(&mut out, &self.request.to_bytes());
        put_u32(&mut out, self.entries.len() as u32);
        for e in &self.entries {
            put_bytes(&mut out, &e.to_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let request = MutexMsg::from_bytes(r.bytes()?)?;
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            entries.push(MutexMsg::from_bytes(r.bytes()?)?);
        }
        r.finish()?;
        Ok(Self { request, entries })
    }

    pub fn entry(&self, id: &EntityId) -> Option<&MutexMsg> {
        self.entries.iter().find(|e| &e.sender == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProofError {
    #[error("request is not an authentic Request from a roster member")]
    BadRequest,
    #[error("entry from {0} is not authentic")]
    Unauthentic(EntityId),
    #[error("entry from {0} is neither Reply nor Release")]
    WrongKind(EntityId),
    #[error("more than one entry from {0}")]
    Duplicate(EntityId),
    #[error("no entry from {0}")]
    Missing(EntityId),
    #[error("reply from {0} answers a different request or is not ordered after it")]
    UnboundReply(EntityId),
    #[error("reply lists a request of {0} but the proof has no Release from it ordered after that request")]
    MissingRelease(EntityId),
    #[error("release from {0} is not ordered after the request")]
    StaleRelease(EntityId),
}

/// Checks an acquisition proof offline.
///
/// - the Request and every entry are signed by their sender and carry a
///   verifying clock;
/// - there is exactly one entry per other roster member;
/// - each Reply answers this Request and is ordered after it by ≺;
/// - for each `(x, c)` in any included Reply's list, the entry from `x` is
///   a Release ordered after `c` by ≺;
/// - every other Release is ordered after the Request by ⋖.
pub fn check_acquisition(roster: &Roster, proof: &AcquisitionProof) -> Result<(), ProofError> {
    let req = &proof.request;
    if req.kind != MsgKind::Request || !roster.authentic(req) {
        return Err(ProofError::BadRequest);
    }
    let c_r = req.value();
    let mut by_sender: BTreeMap<&EntityId, &MutexMsg> = BTreeMap::new();
    for e in &proof.entries {
        if e.sender == req.sender || !roster.authentic(e) {
            return Err(ProofError::Unauthentic(e.sender.clone()));
        }
        if !matches!(e.kind, MsgKind::Reply | MsgKind::Release) {
            return Err(ProofError::WrongKind(e.sender.clone()));
        }
        if by_sender.insert(&e.sender, e).is_some() {
            return Err(ProofError::Duplicate(e.sender.clone()));
        }
    }
    for (id, _) in &roster.members {
        if *id != req.sender && !by_sender.contains_key(id) {
            return Err(ProofError::Missing(id.clone()));
        }
    }
    let mut demanded: BTreeSet<&EntityId> = BTreeSet::new();
    for e in by_sender.values().filter(|e| e.kind == MsgKind::Reply) {
        if e.re.as_ref() != Some(c_r) || !after(e.value(), c_r) {
            return Err(ProofError::UnboundReply(e.sender.clone()));
        }
        for (x, c) in &e.reply_clocks {
            match by_sender.get(x) {
                Some(rel) if rel.kind == MsgKind::Release && after(rel.value(), c) => {
                    demanded.insert(x);
                }
                _ => return Err(ProofError::MissingRelease(x.clone())),
            }
        }
    }
    for e in by_sender.values().filter(|e| e.kind == MsgKind::Release) {
        if !demanded.contains(&e.sender) && total(e.value(), c_r) != Ordering::Greater {
            return Err(ProofError::StaleRelease(e.sender.clone()));
        }
    }
    Ok(())
}

/// One granted critical section.
#[derive(Debug, Clone)]
pub struct Grant {
    pub holder: ProcId,
    pub round: u32,
    pub request: ClockValue,
    pub proof: AcquisitionProof,
    pub requested_at: Tick,
    pub granted_at: Tick,
    pub released_at: Option<Tick>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeConfig {
    /// When the first Request goes out; `None` for a process that never
    /// contends.
    pub first_request: Option<Tick>,
    pub rounds: u32,
    /// Ticks between grant and release.
    pub hold: Tick,
    /// Ticks between a release and the next Request.
    pub gap: Tick,
    /// Byzantine: rebroadcast the previous Request after each Release.
    pub replay_after_release: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MutexError {
    #[error("a request is already pending")]
    AlreadyPending,
    #[error("backend refused the clock: {0}")]
    Backend(String),
}

struct OwnRequest {
    msg: MutexMsg,
    at: Tick,
    replies: BTreeMap<ProcId, MutexMsg>,
    after: BTreeSet<ProcId>,
}

const TAG_REQUEST: u64 = 1;
const TAG_RELEASE: u64 = 2;
const TAG_QUERY: u64 = 3;

pub struct MutexNode {
    pid: ProcId,
    me: EntityId,
    client: ClockClient,
    roster: Arc<Roster>,
    cfg: NodeConfig,
    link: ReliableLink,
    local: Vlc,
    pending: Vec<Vlc>,
    fresh: bool,
    queue: BTreeMap<ProcId, MutexMsg>,
    latest: BTreeMap<ProcId, ClockValue>,
    released: BTreeMap<ProcId, MutexMsg>,
    awaiting: Vec<MutexMsg>,
    queried: BTreeMap<ProcId, ClockValue>,
    /// Queries wait this long, since contenders usually speak up on their own.
    query_delay: Tick,
    query_armed: bool,
    own: Option<OwnRequest>,
    last_request: Option<MutexMsg>,
    holding: bool,
    rounds_done: u32,
    pub grants: Vec<Grant>,
    pub sent: BTreeMap<MsgKind, u64>,
    pub dropped: u64,
    pub ignored_requests: u64,
    pub errors: Vec<String>,
    /// Every authentic message received, in arrival order.
    pub log: Vec<MutexMsg>,
}

impl MutexNode {
    pub fn new(
        pid: ProcId,
        client: ClockClient,
        roster: Arc<Roster>,
        cfg: NodeConfig,
        rto: Tick,
    ) -> Self {
        Self {
            pid,
            me: entity(pid),
            client,
            roster,
            cfg,
            link: ReliableLink::new(rto),
            local: Vlc::genesis(),
            pending: Vec::new(),
            fresh: false,
            queue: BTreeMap::new(),
            latest: BTreeMap::new(),
            released: BTreeMap::new(),
            awaiting: Vec::new(),
            queried: BTreeMap::new(),
            query_delay: rto,
            query_armed: false,
            own: None,
            last_request: None,
            holding: false,
            rounds_done: 0,
            grants: Vec::new(),
            sent: BTreeMap::new(),
            dropped: 0,
            ignored_requests: 0,
            errors: Vec::new(),
            log: Vec::new(),
        }
    }

    /// All configured rounds were granted and released.
    pub fn finished(&self) -> bool {
        self.cfg.first_request.is_none() || (self.rounds_done >= self.cfg.rounds && !self.holding)
    }

    pub fn idle(&self) -> bool {
        self.link.idle()
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    /// A clock for the messages of the current handler.
    fn mint(&mut self) -> Result<Vlc, MutexError> {
        if !self.fresh {
            let next = self
                .client
                .update(&self.me, &self.local, &self.pending, &[])
                .map_err(|e| MutexError::Backend(e.to_string()))?;
            self.local = next;
            self.pending.clear();
            self.fresh = true;
        }
        Ok(self.local.clone())
    }

    fn make(
        &mut self,
        kind: MsgKind,
        re: Option<ClockValue>,
        list: Vec<(EntityId, ClockValue)>,
    ) -> Result<MutexMsg, MutexError> {
        let clock = self.mint()?;
        Ok(MutexMsg::signed(
            kind,
            self.me.clone(),
            clock,
            re,
            list,
            self.client.key(),
        ))
    }

    fn send(&mut self, ctx: &mut dyn Context, dst: ProcId, m: &MutexMsg) {
        *self.sent.entry(m.kind).or_default() += 1;
        self.link.send(ctx, dst, m.to_bytes());
    }

    fn broadcast(&mut self, ctx: &mut dyn Context, m: &MutexMsg) {
        for q in 0..self.roster.len() as ProcId {
            if q != self.pid {
                self.send(ctx, q, m);
            }
        }
    }

    /// Broadcasts a Request and queues it locally.
    pub fn request(&mut self, ctx: &mut dyn Context) -> Result<(), MutexError> {
        if self.own.is_some() || self.holding {
            return Err(MutexError::AlreadyPending);
        }
        let m = self.make(MsgKind::Request, None, vec![])?;
        ctx.note(format!(
            "request clock={}",
            hex::encode(m.value().to_bytes())
        ));
        self.queue.insert(self.pid, m.clone());
        self.own = Some(OwnRequest {
            msg: m.clone(),
            at: ctx.now(),
            replies: BTreeMap::new(),
            after: BTreeSet::new(),
        });
        self.last_request = Some(m.clone());
        self.broadcast(ctx, &m);
        Ok(())
    }

    fn release(&mut self, ctx: &mut dyn Context) {
        if !self.holding {
            return;
        }
        let m = match self.make(MsgKind::Release, None, vec![]) {
            Ok(m) => m,
            Err(e) => {
                self.errors.push(e.to_string());
                return;
            }
        };
        self.holding = false;
        self.queue.remove(&self.pid);
        self.released.insert(self.pid, m.clone());
        self.rounds_done += 1;
        if let Some(g) = self.grants.last_mut() {
            g.released_at = Some(ctx.now());
        }
        ctx.note("release".to_string());
        self.broadcast(ctx, &m);
        if self.cfg.replay_after_release {
            if let Some(old) = self.last_request.clone() {
                ctx.note("replay request".to_string());
                self.broadcast(ctx, &old);
            }
        }
        if self.rounds_done < self.cfg.rounds {
            ctx.set_timer(self.cfg.gap, TAG_REQUEST);
        }
        self.serve_awaiting(ctx, false);
    }

    fn handle(&mut self, ctx: &mut dyn Context, src: ProcId, m: MutexMsg) {
        if self.roster.index_of(&m.sender) != Some(src) || !self.roster.authentic(&m) {
            self.dropped += 1;
            ctx.note(format!("drop {} from {src}: not authentic", m.kind.name()));
            return;
        }
        self.log.push(m.clone());
        let c = m.value().clone();
        self.latest.insert(src, c.clone());
        self.pending.push(m.clock.clone());
        // Anything sent from here on must be ordered after `m`.
        self.fresh = false;
        if let Some(own) = &mut self.own {
            if after(&c, own.msg.value()) {
                own.after.insert(src);
            }
        }
        match m.kind {
            MsgKind::Request => self.on_request(ctx, src, m),
            MsgKind::Reply => {
                if let Some(own) = &mut self.own {
                    if m.re.as_ref() == Some(own.msg.value()) && after(&c, own.msg.value()) {
                        own.replies.insert(src, m);
                    }
                }
            }
            MsgKind::Release => self.on_release(ctx, src, m),
            MsgKind::Query => match self.make(MsgKind::Ack, None, vec![]) {
                Ok(ack) => self.send(ctx, src, &ack),
                Err(e) => self.errors.push(e.to_string()),
            },
            MsgKind::Ack => {}
        }
        self.serve_awaiting(ctx, false);
        self.try_acquire(ctx);
    }

    fn on_request(&mut self, ctx: &mut dyn Context, src: ProcId, m: MutexMsg) {
        let stale = self
            .released
            .get(&src)
            .is_some_and(|rel| !after(m.value(), rel.value()));
        if self.queue.contains_key(&src) || stale {
            self.ignored_requests += 1;
            ctx.note(format!("ignore request from {src}"));
            return;
        }
        self.queue.insert(src, m.clone());
        self.awaiting.push(m);
    }

    fn on_release(&mut self, ctx: &mut dyn Context, src: ProcId, m: MutexMsg) {
        if let Some(q) = self.queue.get(&src) {
            if !after(m.value(), q.value()) {
                self.dropped += 1;
                ctx.note(format!("drop release from {src}: not after its request"));
                return;
            }
        }
        self.queue.remove(&src);
        self.awaiting.retain(|r| r.sender != m.sender);
        self.released.insert(src, m);
    }

    /// Replies to every queued Request whose wait condition now holds.
    /// Peers we know too little about are queried once `may_query` is set;
    /// until then a timer is armed.
    fn serve_awaiting(&mut self, ctx: &mut dyn Context, may_query: bool) {
        let mut still = Vec::new();
        let awaiting = std::mem::take(&mut self.awaiting);
        for r in awaiting {
            let rid = self.roster.index_of(&r.sender).expect("authenticated");
            let c_r = r.value().clone();
            // A smaller own request goes first; the Release answers later.
            if self
                .queue
                .get(&self.pid)
                .is_some_and(|own| total(own.value(), &c_r) == Ordering::Less)
            {
                still.push(r);
                continue;
            }
            let unknown: Vec<ProcId> = (0..self.roster.len() as ProcId)
                .filter(|&q| q != self.pid && q != rid)
                .filter(|q| {
                    !self.queue.contains_key(q)
                        && !self.latest.get(q).is_some_and(|l| after(l, &c_r))
                })
                .collect();
            if unknown.is_empty() {
                let list: Vec<(EntityId, ClockValue)> = self
                    .queue
                    .iter()
                    .filter(|(q, req)| {
                        **q != rid && **q != self.pid && total(req.value(), &c_r) == Ordering::Less
                    })
                    .map(|(_, req)| (req.sender.clone(), req.value().clone()))
                    .collect();
                match self.make(MsgKind::Reply, Some(c_r), list) {
                    Ok(reply) => self.send(ctx, rid, &reply),
                    Err(e) => self.errors.push(e.to_string()),
                }
                continue;
            }
            if !may_query {
                if !self.query_armed {
                    self.query_armed = true;
                    ctx.set_timer(self.query_delay, TAG_QUERY);
                }
                still.push(r);
                continue;
            }
            for q in unknown {
                if self.queried.get(&q).is_some_and(|qc| after(qc, &c_r)) {
                    continue;
                }
                match self.make(MsgKind::Query, None, vec![]) {
                    Ok(query) => {
                        self.queried.insert(q, query.value().clone());
                        self.send(ctx, q, &query);
                    }
                    Err(e) => self.errors.push(e.to_string()),
                }
            }
            still.push(r);
        }
        self.awaiting = still;
    }

    /// Whether using Releases from exactly `s` (and Replies from everyone
    /// else) satisfies the proof rules, judged on clocks alone.
    fn fits(&self, own: &OwnRequest, s: &BTreeSet<ProcId>) -> bool {
        let c_r = own.msg.value();
        let mut demanded = BTreeSet::new();
        for q in (0..self.roster.len() as ProcId).filter(|&q| q != self.pid && !s.contains(&q)) {
            let Some(reply) = own.replies.get(&q) else {
                return false;
            };
            for (x, c) in &reply.reply_clocks {
                let Some(xi) = self.roster.index_of(x) else {
                    return false;
                };
                match self.released.get(&xi) {
                    Some(rel) if s.contains(&xi) && after(rel.value(), c) => {
                        demanded.insert(xi);
                    }
                    _ => return false,
                }
            }
        }
        s.iter().all(|q| {
            self.released.get(q).is_some_and(|rel| {
                demanded.contains(q) || total(rel.value(), c_r) == Ordering::Greater
            })
        })
    }

    fn build(&self, own: &OwnRequest, s: &BTreeSet<ProcId>) -> Option<AcquisitionProof> {
        let mut entries = Vec::new();
        for q in (0..self.roster.len() as ProcId).filter(|&q| q != self.pid) {
            let m = if s.contains(&q) {
                self.released.get(&q)?
            } else {
                own.replies.get(&q)?
            };
            entries.push(m.clone());
        }
        Some(AcquisitionProof {
            request: own.msg.clone(),
            entries,
        })
    }

    /// Builds the proof for the pending Request if some choice of Reply or
    /// Release per peer satisfies the rules.
    ///
    /// Peers without a Reply must contribute a Release; the rest are
    /// searched, fewest Releases first. Rosters are small enough that the
    /// subset search stays cheap.
    fn assemble(&self) -> Option<AcquisitionProof> {
        let own = self.own.as_ref()?;
        let others: Vec<ProcId> = (0..self.roster.len() as ProcId)
            .filter(|&q| q != self.pid)
            .collect();
        let forced: BTreeSet<ProcId> = others
            .iter()
            .copied()
            .filter(|q| !own.replies.contains_key(q))
            .collect();
        let free: Vec<ProcId> = others
            .iter()
            .copied()
            .filter(|q| own.replies.contains_key(q) && self.released.contains_key(q))
            .collect();
        let mut masks: Vec<u32> = (0..1u32 << free.len()).collect();
        masks.sort_by_key(|m| (m.count_ones(), *m));
        for mask in masks {
            let mut s = forced.clone();
            s.extend(
                free.iter()
                    .enumerate()
                    .filter(|(i, _)| mask & (1 << i) != 0)
                    .map(|(_, &q)| q),
            );
            if self.fits(own, &s) {
                let proof = self.build(own, &s)?;
                return check_acquisition(&self.roster, &proof)
                    .is_ok()
                    .then_some(proof);
            }
        }
        None
    }

    fn try_acquire(&mut self, ctx: &mut dyn Context) {
        if self.holding {
            return;
        }
        let Some(own) = &self.own else { return };
        let c = own.msg.value();
        let smallest = self
            .queue
            .iter()
            .all(|(q, r)| *q == self.pid || total(c, r.value()) == Ordering::Less);
        let heard =
            (0..self.roster.len() as ProcId).all(|q| q == self.pid || own.after.contains(&q));
        if !smallest || !heard {
            return;
        }
        let Some(proof) = self.assemble() else { return };
        let own = self.own.take().expect("checked above");
        ctx.note(format!(
            "grant clock={}",
            hex::encode(own.msg.value().to_bytes())
        ));
        self.holding = true;
        self.grants.push(Grant {
            holder: self.pid,
            round: self.rounds_done,
            request: own.msg.value().clone(),
            proof,
            requested_at: own.at,
            granted_at: ctx.now(),
            released_at: None,
        });
        ctx.set_timer(self.cfg.hold, TAG_RELEASE);
    }
}

impl Process for MutexNode {
    fn on_start(&mut self, ctx: &mut dyn Context) {
        if let Some(t) = self.cfg.first_request {
            if self.cfg.rounds > 0 {
                ctx.set_timer(t, TAG_REQUEST);
            }
        }
    }

    fn on_message(&mut self, ctx: &mut dyn Context, src: ProcId, raw: &[u8]) {
        self.fresh = false;
        for payload in self.link.receive(ctx, src, raw) {
            match MutexMsg::from_bytes(&payload) {
                Ok(m) => self.handle(ctx, src, m),
                Err(e) => {
                    self.dropped += 1;
                    ctx.note(format!("drop malformed from {src}: {e}"));
                }
            }
        }
    }

    fn on_timer(&mut self, ctx: &mut dyn Context, tag: u64) {
        self.fresh = false;
        if self.link.on_timer(ctx, tag) {
            return;
        }
        match tag {
            TAG_REQUEST => {
                if let Err(e) = self.request(ctx) {
                    self.errors.push(e.to_string());
                }
                self.serve_awaiting(ctx, false);
                self.try_acquire(ctx);
            }
            TAG_RELEASE => self.release(ctx),
            TAG_QUERY => {
                self.query_armed = false;
                self.serve_awaiting(ctx, true);
                self.try_acquire(ctx);
            }
            _ => {}
        }
    }
}

/// Exclusion and ordering faults found by [`check_run`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum MutexViolation {
    /// Two holders at once, by trace order.
    Overlap {
        first: ProcId,
        second: ProcId,
    },
    /// Request clocks ordered by ≺ but granted the other way round.
    OrderInverted {
        earlier: ProcId,
        later: ProcId,
    },
    /// An honest grant's proof failed the offline check.
    BadProof {
        holder: ProcId,
        reason: String,
    },
    /// Two valid proofs where the later does not account for the earlier.
    ConflictingProofs {
        first: ProcId,
        second: ProcId,
    },
    Starved {
        process: ProcId,
    },
}

impl fmt::Display for MutexViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MutexViolation::Overlap { first, second } => {
                write!(f, "{second} acquired while {first} held the lock")
            }
            MutexViolation::OrderInverted { earlier, later } => {
                write!(
                    f,
                    "{later} granted before {earlier} despite a later request clock"
                )
            }
            MutexViolation::BadProof { holder, reason } => {
                write!(f, "proof of {holder} rejected: {reason}")
            }
            MutexViolation::ConflictingProofs { first, second } => {
                write!(
                    f,
                    "proof of {second} does not account for the grant of {first}"
                )
            }
            MutexViolation::Starved { process } => write!(f, "{process} was never granted"),
        }
    }
}

struct TraceGrant {
    holder: ProcId,
    clock: ClockValue,
}

/// Holder intervals from the trace must be disjoint and granted in ≺ order.
pub fn check_exclusion_trace(trace: &Trace) -> Vec<MutexViolation> {
    let mut out = Vec::new();
    let mut holder: Option<ProcId> = None;
    let mut grants: Vec<TraceGrant> = Vec::new();
    for e in trace.events.iter().filter(|e| e.kind == EventKind::Note) {
        let note = e.note.as_deref().unwrap_or("");
        if let Some(hexclock) = note.strip_prefix("grant clock=") {
            if let Some(h) = holder {
                out.push(MutexViolation::Overlap {
                    first: h,
                    second: e.src,
                });
            }
            holder = Some(e.src);
            if let Some(clock) = hex::decode(hexclock)
                .ok()
                .and_then(|b| ClockValue::from_bytes(&b).ok())
            {
                grants.push(TraceGrant {
                    holder: e.src,
                    clock,
                });
            }
        } else if note == "release" && holder == Some(e.src) {
            holder = None;
        }
    }
    for (i, g) in grants.iter().enumerate() {
        for later in &grants[i + 1..] {
            if later.clock.compare(&g.clock) == ClockOrdering::Before {
                out.push(MutexViolation::OrderInverted {
                    earlier: later.holder,
                    later: g.holder,
                });
            }
        }
    }
    out
}

/// Offline checks over the proofs of every grant: each must pass
/// [`check_acquisition`], and for two grants with `c_a ⋖ c_b` the later
/// proof's entry from `a` must be ordered after `c_a`, i.e. `a` had
/// finished with its request by the time it vouched for `b`.
pub fn check_proofs(roster: &Roster, grants: &[Grant]) -> Vec<MutexViolation> {
    let mut out = Vec::new();
    for g in grants {
        if let Err(e) = check_acquisition(roster, &g.proof) {
            out.push(MutexViolation::BadProof {
                holder: g.holder,
                reason: e.to_string(),
            });
        }
    }
    let mut sorted: Vec<&Grant> = grants.iter().collect();
    sorted.sort_by(|a, b| total(&a.request, &b.request));
    for (i, a) in sorted.iter().enumerate() {
        for b in &sorted[i + 1..] {
            if a.holder == b.holder {
                continue;
            }
            let ok = b
                .proof
                .entry(&entity(a.holder))
                .is_some_and(|e| after(e.value(), &a.request));
            if !ok {
                out.push(MutexViolation::ConflictingProofs {
                    first: a.holder,
                    second: b.holder,
                });
            }
        }
    }
    out
}

/// One simulated mutex run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MutexConfig {
    pub n: usize,
    pub contenders: usize,
    pub rounds: u32,
    pub backend: BackendKind,
    pub seed: u64,
    /// Requests start uniformly in `[0, spread)`.
    pub spread: Tick,
    pub hold: Tick,
}

impl MutexConfig {
    pub fn new(n: usize, contenders: usize, backend: BackendKind, seed: u64) -> Self {
        Self {
            n,
            contenders: contenders.min(n),
            rounds: 1,
            backend,
            seed,
            spread: 40,
            hold: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MutexReport {
    pub grants: Vec<Grant>,
    pub violations: Vec<MutexViolation>,
    /// Protocol messages sent, per kind; link acknowledgements and
    /// retransmissions excluded.
    pub messages: BTreeMap<MsgKind, u64>,
    pub retransmissions: u64,
    /// Every authentic message any process received.
    pub history: Vec<MutexMsg>,
    /// Requests receivers ignored as duplicates or replays.
    pub ignored_requests: u64,
    pub finished: bool,
    pub end_time: Tick,
    pub trace: Trace,
    pub roster: Arc<Roster>,
}

impl MutexReport {
    pub fn total_messages(&self) -> u64 {
        self.messages.values().sum()
    }

    pub fn ok(&self) -> bool {
        self.finished && self.violations.is_empty()
    }
}

pub fn roster_for(clients: &[ClockClient], verifier: Arc<Verifier>) -> Arc<Roster> {
    Arc::new(Roster {
        members: clients
            .iter()
            .enumerate()
            .map(|(i, c)| (entity(i as ProcId), c.public()))
            .collect(),
        verifier,
    })
}

/// Runs the protocol under `plan` (its seed is replaced by `cfg.seed`).
pub fn run_mutex(
    cfg: &MutexConfig,
    plan: &FaultPlan,
    replay_by: Option<ProcId>,
) -> Result<MutexReport, SimError> {
    let label = format!("mutex/{}/{}", cfg.n, cfg.backend.name());
    let (d, clients) = process_deployment(
        cfg.backend,
        &[FrontendKind::Update, FrontendKind::Mono],
        cfg.n,
        &label,
    );
    let roster = roster_for(&clients, d.verifier().clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d75_7465_78);
    // Long enough that a reordered frame and its acknowledgement usually
    // make it back before the first retransmission.
    let rto = 2 * plan.delay_max.max(plan.delay_min) + plan.reorder_extra + 2;
    let procs: Vec<MutexNode> = clients
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let first = (i < cfg.contenders).then(|| rng.random_range(0..cfg.spread.max(1)));
            let node_cfg = NodeConfig {
                first_request: first,
                rounds: cfg.rounds,
                hold: cfg.hold,
                gap: 3 + i as Tick,
                replay_after_release: replay_by == Some(i as ProcId),
            };
            MutexNode::new(i as ProcId, c, roster.clone(), node_cfg, rto)
        })
        .collect();
    let plan = FaultPlan {
        seed: cfg.seed,
        ..plan.clone()
    };
    let mut sim = Simulator::new(procs, plan);
    let outcome = sim.run(|ps, _| ps.iter().all(|p| p.finished() && p.idle()))?;
    let end_time = outcome.time();
    let (procs, trace) = sim.into_parts();

    let mut grants: Vec<Grant> = procs
        .iter()
        .flat_map(|p| p.grants.iter().cloned())
        .collect();
    grants.sort_by_key(|g| g.granted_at);
    let mut violations = check_exclusion_trace(&trace);
    violations.extend(check_proofs(&roster, &grants));
    let finished = procs.iter().all(|p| p.finished());
    for p in procs.iter().filter(|p| !p.finished()) {
        violations.push(MutexViolation::Starved { process: p.pid });
    }
    let mut messages = BTreeMap::new();
    for p in &procs {
        for (k, v) in &p.sent {
            *messages.entry(*k).or_default() += v;
        }
    }
    Ok(MutexReport {
        grants,
        violations,
        messages,
        retransmissions: procs.iter().map(|p| p.link.retransmissions).sum(),
        history: procs.iter().flat_map(|p| p.log.iter().cloned()).collect(),
        ignored_requests: procs.iter().map(|p| p.ignored_requests).sum(),
        finished,
        end_time,
        trace,
        roster,
    })
}

/// The three fault plans the mutex is exercised under.
pub fn standard_plans() -> Vec<(&'static str, FaultPlan)> {
    vec![
        (
            "jitter",
            FaultPlan {
                delay_min: 1,
                delay_max: 20,
                ..FaultPlan::default()
            },
        ),
        (
            "reorder-dup",
            FaultPlan {
                delay_min: 1,
                delay_max: 10,
                reorder_prob: 0.2,
                duplicate_prob: 0.1,
                ..FaultPlan::default()
            },
        ),
        (
            "lossy",
            FaultPlan {
                delay_min: 1,
                delay_max: 10,
                reorder_prob: 0.1,
                drop_prob: 0.1,
                duplicate_prob: 0.05,
                ..FaultPlan::default()
            },
        ),
    ]
}

/// Tampered copies of an honest proof. Each must fail the offline check.
///
/// - `omit-release`: drops the entry of a process whose Release the proof
///   needs (or any entry if none is needed);
/// - `stale-entry`: swaps one entry for another authentic message of the
///   same sender that does not belong to this request;
/// - `forged-clock`: bumps an entry's clock value without re-proving or
///   re-signing it.
pub fn tampered_variants(
    proof: &AcquisitionProof,
    history: &[MutexMsg],
) -> Vec<(&'static str, AcquisitionProof)> {
    let mut out = Vec::new();

    let mut omit = proof.clone();
    let target = proof
        .entries
        .iter()
        .flat_map(|e| e.reply_clocks.iter().map(|(x, _)| x.clone()))
        .next()
        .or_else(|| proof.entries.first().map(|e| e.sender.clone()));
    if let Some(t) = target {
        omit.entries.retain(|e| e.sender != t);
    }
    out.push(("omit-release", omit));

    let c_r = proof.request.value();
    let mut stale = proof.clone();
    'swap: for (i, e) in proof.entries.iter().enumerate() {
        // Prefer a Release ⋖-before the request; otherwise a Reply to
        // somebody else's request.
        let older_release = history.iter().find(|m| {
            m.sender == e.sender
                && m.kind == MsgKind::Release
                && total(m.value(), c_r) == Ordering::Less
        });
        let foreign_reply = history.iter().find(|m| {
            m.sender == e.sender && m.kind == MsgKind::Reply && m.re.as_ref() != Some(c_r)
        });
        if let Some(m) = older_release.or(foreign_reply) {
            stale.entries[i] = m.clone();
            break 'swap;
        }
    }
    out.push(("stale-entry", stale));

    let mut forged = proof.clone();
    if let Some(e) = forged.entries.first_mut() {
        let bumped = e.value().update(&e.sender, &[]);
        e.clock = e.clock.with_value(bumped);
    }
    out.push(("forged-clock", forged));
    out
}
