//! Causally consistent, fully replicated key-value store.
//!
//! Keys are split statically across servers. The owner of a key serves its
//! Puts and mints each new version with a proven Update over the key's
//! current clock plus the stored clocks of whatever the client depends on.
//! Any server serves Gets. Owners push every new entry to the other
//! servers, which install it once its dependencies are present and park it
//! otherwise.
//!
//! Clients keep a dependency clock per session and accept a reply only if
//! its clock verifies and respects that dependency clock, so safety does
//! not rest on server honesty.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use vlc_core::codec::{put_bytes, put_u32, put_u64, put_u8, DecodeError, Reader};
use vlc_core::frontend::AppPredicate;
use vlc_core::keys::{sha256, tagged_hash, Digest, SIGNATURE_LEN};
use vlc_core::{
    BackendKind, ClockClient, ClockOrdering, ClockValue, DeploymentBuilder, EntityId, FrontendKind,
    KeyPair, PermissionTable, ProveRequest, PublicKey, Verifier, Vlc,
};
use vlc_sim::tcp::{bind_local, TcpNode};
use vlc_sim::{Context, FaultPlan, ProcId, Process, SimError, Simulator, Tick, Trace};

use crate::common::default_validators;
use crate::link::ReliableLink;

/// Largest accepted value.
pub const MAX_VALUE: usize = 64 * 1024;

/// Prefix of every value a forging server makes up.
pub const FORGED_PREFIX: &[u8] = b"forged:";

pub fn key_name(i: usize) -> EntityId {
    EntityId::named(&format!("k{i:04}"))
}

fn entity_from(r: &mut Reader<'_>) -> Result<EntityId, DecodeError> {
    EntityId::new(r.bytes()?).map_err(|e| DecodeError::invalid("entity id", e.to_string()))
}

/// Static key-range → owner map. Ranges start at the listed key and run
/// up to the next start; the first range starts at the empty key, so
/// coverage is total and ranges are disjoint by construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionMap {
    starts: Vec<(Vec<u8>, ProcId)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PartitionError {
    #[error("no ranges")]
    Empty,
    #[error("first range must start at the empty key")]
    Uncovered,
    #[error("range starts must be strictly increasing")]
    Overlap,
}

impl PartitionMap {
    pub fn new(starts: Vec<(Vec<u8>, ProcId)>) -> Result<Self, PartitionError> {
        let first = starts.first().ok_or(PartitionError::Empty)?;
        if !first.0.is_empty() {
            return Err(PartitionError::Uncovered);
        }
        if starts.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(PartitionError::Overlap);
        }
        Ok(Self { starts })
    }

    /// Splits sorted `keys` into `servers` contiguous runs of near-equal
    /// size.
    pub fn even(keys: &[EntityId], servers: usize) -> Self {
        let servers = servers.max(1);
        let mut sorted: Vec<&EntityId> = keys.iter().collect();
        sorted.sort();
        let chunk = sorted.len().div_ceil(servers).max(1);
        let mut starts = vec![(Vec::new(), 0)];
        for s in 1..servers {
            if let Some(k) = sorted.get(s * chunk) {
                starts.push((k.as_bytes().to_vec(), s as ProcId));
            }
        }
        Self { starts }
    }

    pub fn owner(&self, key: &EntityId) -> ProcId {
        let i = self
            .starts
            .partition_point(|(s, _)| s.as_slice() <= key.as_bytes());
        self.starts[i - 1].1
    }

    pub fn ranges(&self) -> &[(Vec<u8>, ProcId)] {
        &self.starts
    }
}

/// A stored value with its versioned dependency clock. `vclock[key]` is
/// the version; the other entries are what the write depended on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionedEntry {
    pub key: EntityId,
    pub value: Vec<u8>,
    pub vclock: Vlc,
    /// Server that minted the version.
    pub origin: ProcId,
    pub sig: [u8; SIGNATURE_LEN],
}

impl VersionedEntry {
    fn digest(key: &EntityId, value: &[u8], vclock: &ClockValue, origin: ProcId) -> Digest {
        let mut body = Vec::new();
        put_bytes(&mut body, key.as_bytes());
        body.extend_from_slice(&sha256(value));
        vclock.encode_into(&mut body);
        put_u32(&mut body, origin);
        tagged_hash(b"CHRONO/STORE/ENTRY/v1", &[&body])
    }

    pub fn signed(
        key: EntityId,
        value: Vec<u8>,
        vclock: Vlc,
        origin: ProcId,
        signer: &KeyPair,
    ) -> Self {
        let sig = signer.sign(&Self::digest(&key, &value, vclock.value(), origin));
        Self {
            key,
            value,
            vclock,
            origin,
            sig,
        }
    }

    pub fn version(&self) -> u64 {
        self.vclock.value().get(&self.key)
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        put_bytes(out, self.key.as_bytes());
        put_bytes(out, &self.value);
        put_bytes(out, &self.vclock.to_bytes());
        put_u32(out, self.origin);
        out.extend_from_slice(&self.sig);
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            key: entity_from(r)?,
            value: r.bytes()?.to_vec(),
            vclock: Vlc::from_bytes(r.bytes()?)?,
            origin: r.u32()?,
            sig: r.array()?,
        })
    }
}

/// Errors seen by clients and servers.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("read returned an older version than the session depends on")]
    StaleRead,
    #[error("write reply is not ordered after the session's dependencies")]
    CausalityViolated,
    #[error("server is not up to date with the request's dependencies")]
    NotUpToDate,
    #[error("server does not own the key")]
    WrongOwner,
    #[error("reply does not carry a verifying clock and origin signature")]
    InvalidProof,
    #[error("malformed or unauthenticated request")]
    BadRequest,
    #[error("validators refused the update: {0}")]
    Rejected(String),
}

impl StoreError {
    pub fn name(&self) -> &'static str {
        match self {
            StoreError::StaleRead => "stale-read",
            StoreError::CausalityViolated => "causality-violated",
            StoreError::NotUpToDate => "not-up-to-date",
            StoreError::WrongOwner => "wrong-owner",
            StoreError::InvalidProof => "invalid-proof",
            StoreError::BadRequest => "bad-request",
            StoreError::Rejected(_) => "rejected",
        }
    }

    fn code(&self) -> u8 {
        match self {
            StoreError::StaleRead => 1,
            StoreError::CausalityViolated => 2,
            StoreError::NotUpToDate => 3,
            StoreError::WrongOwner => 4,
            StoreError::InvalidProof => 5,
            StoreError::BadRequest => 6,
            StoreError::Rejected(_) => 7,
        }
    }

    fn from_code(code: u8, detail: String) -> Result<Self, DecodeError> {
        Ok(match code {
            1 => StoreError::StaleRead,
            2 => StoreError::CausalityViolated,
            3 => StoreError::NotUpToDate,
            4 => StoreError::WrongOwner,
            5 => StoreError::InvalidProof,
            6 => StoreError::BadRequest,
            7 => StoreError::Rejected(detail),
            _ => return Err(DecodeError::invalid("store error", format!("code {code}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum OpKind {
    Get = 1,
    Put = 2,
}

/// What a client signs for one request. The value enters only by hash so
/// the same authorization can travel to the validators as `aux`.
fn request_digest(
    op: OpKind,
    id: u64,
    client: u32,
    key: &EntityId,
    value_hash: &Digest,
    dep: &ClockValue,
) -> Digest {
    let mut body = Vec::new();
    put_u8(&mut body, op as u8);
    put_u64(&mut body, id);
    put_u32(&mut body, client);
    put_bytes(&mut body, key.as_bytes());
    body.extend_from_slice(value_hash);
    dep.encode_into(&mut body);
    tagged_hash(b"CHRONO/STORE/REQ/v1", &[&body])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub op: OpKind,
    pub id: u64,
    pub client: u32,
    pub key: EntityId,
    pub value: Vec<u8>,
    pub dep: ClockValue,
    pub sig: [u8; SIGNATURE_LEN],
}

impl Request {
    pub fn signed(
        op: OpKind,
        id: u64,
        client: u32,
        key: EntityId,
        value: Vec<u8>,
        dep: ClockValue,
        signer: &KeyPair,
    ) -> Self {
        let sig = signer.sign(&request_digest(op, id, client, &key, &sha256(&value), &dep));
        Self {
            op,
            id,
            client,
            key,
            value,
            dep,
            sig,
        }
    }

    pub fn digest(&self) -> Digest {
        request_digest(
            self.op,
            self.id,
            self.client,
            &self.key,
            &sha256(&self.value),
            &self.dep,
        )
    }

    /// The client's authorization, as passed to the validators.
    pub fn auth(&self) -> PutAuth {
        PutAuth {
            client: self.client,
            id: self.id,
            value_hash: sha256(&self.value),
            dep: self.dep.clone(),
            sig: self.sig,
        }
    }
}

/// A client's signed Put authorization, carried to the APP frontend in
/// `aux`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PutAuth {
    pub client: u32,
    pub id: u64,
    pub value_hash: Digest,
    pub dep: ClockValue,
    pub sig: [u8; SIGNATURE_LEN],
}

impl PutAuth {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_u32(&mut out, self.client);
        put_u64(&mut out, self.id);
        out.extend_from_slice(&self.value_hash);
        self.dep.encode_into(&mut out);
        out.extend_from_slice(&self.sig);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let a = Self {
            client: r.u32()?,
            id: r.u64()?,
            value_hash: r.array()?,
            dep: ClockValue::decode_from(&mut r)?,
            sig: r.array()?,
        };
        r.finish()?;
        Ok(a)
    }

    pub fn verify(&self, key: &EntityId, client_key: &PublicKey) -> bool {
        client_key.verify(
            &request_digest(
                OpKind::Put,
                self.id,
                self.client,
                key,
                &self.value_hash,
                &self.dep,
            ),
            &self.sig,
        )
    }
}

/// Per-client write permissions by key prefix, enforced by the APP
/// frontend.
#[derive(Debug, Clone, Default)]
pub struct KeyAcl {
    pub clients: Vec<(PublicKey, Vec<Vec<u8>>)>,
}

impl KeyAcl {
    pub fn allows(&self, client: u32, key: &EntityId) -> bool {
        self.clients
            .get(client as usize)
            .is_some_and(|(_, prefixes)| prefixes.iter().any(|p| key.as_bytes().starts_with(p)))
    }

    /// The APP predicate: `aux` must hold a Put authorization signed by a
    /// listed client for this key, and the client must hold a matching
    /// prefix.
    pub fn predicate(self: Arc<Self>) -> AppPredicate {
        Arc::new(move |req: &ProveRequest| {
            let auth = PutAuth::from_bytes(&req.aux)
                .map_err(|e| format!("no client authorization: {e}"))?;
            let (pk, _) = self
                .clients
                .get(auth.client as usize)
                .ok_or_else(|| format!("unknown client {}", auth.client))?;
            if !auth.verify(&req.id, pk) {
                return Err("client signature does not match".into());
            }
            if !self.allows(auth.client, &req.id) {
                return Err(format!("client {} may not write {}", auth.client, req.id));
            }
            Ok(())
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub id: u64,
    pub result: Result<Option<VersionedEntry>, StoreError>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StoreMsg {
    Request(Request),
    Reply(Reply),
    Propagate(VersionedEntry),
}

impl StoreMsg {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            StoreMsg::Request(q) => {
                put_u8(&mut out, 1);
                put_u8(&mut out, q.op as u8);
                put_u64(&mut out, q.id);
                put_u32(&mut out, q.client);
                put_bytes(&mut out, q.key.as_bytes());
                put_bytes(&mut out, &q.value);
                q.dep.encode_into(&mut out);
                out.extend_from_slice(&q.sig);
            }
            StoreMsg::Reply(r) => {
                put_u8(&mut out, 2);
                put_u64(&mut out, r.id);
                match &r.result {
                    Ok(None) => put_u8(&mut out, 0),
                    Ok(Some(e)) => {
                        put_u8(&mut out, 0xff);
                        e.encode_into(&mut out);
                    }
                    Err(err) => {
                        put_u8(&mut out, err.code());
                        let detail = match err {
                            StoreError::Rejected(d) => d.as_bytes(),
                            _ => &[],
                        };
                        put_bytes(&mut out, detail);
                    }
                }
            }
            StoreMsg::Propagate(e) => {
                put_u8(&mut out, 3);
                e.encode_into(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let msg = match r.u8()? {
            1 => {
                let op = match r.u8()? {
                    1 => OpKind::Get,
                    2 => OpKind::Put,
                    b => return Err(DecodeError::invalid("op", format!("{b}"))),
                };
                StoreMsg::Request(Request {
                    op,
                    id: r.u64()?,
                    client: r.u32()?,
                    key: entity_from(&mut r)?,
                    value: r.bytes()?.to_vec(),
                    dep: ClockValue::decode_from(&mut r)?,
                    sig: r.array()?,
                })
            }
            2 => {
                let id = r.u64()?;
                let result = match r.u8()? {
                    0 => Ok(None),
                    0xff => Ok(Some(VersionedEntry::decode_from(&mut r)?)),
                    code => {
                        let detail = String::from_utf8_lossy(r.bytes()?).into_owned();
                        Err(StoreError::from_code(code, detail)?)
                    }
                };
                StoreMsg::Reply(Reply { id, result })
            }
            3 => StoreMsg::Propagate(VersionedEntry::decode_from(&mut r)?),
            t => return Err(DecodeError::invalid("store message", format!("tag {t}"))),
        };
        r.finish()?;
        Ok(msg)
    }
}

/// Public configuration every participant agrees on.
#[derive(Debug)]
pub struct Cluster {
    pub servers: Vec<PublicKey>,
    pub clients: Vec<PublicKey>,
    pub partition: PartitionMap,
    pub verifier: Arc<Verifier>,
}

impl Cluster {
    /// The entry claims a version minted by the key's owner, is signed by
    /// it and carries a verifying clock.
    pub fn check_entry(&self, e: &VersionedEntry) -> Result<(), StoreError> {
        let origin_ok = self.partition.owner(&e.key) == e.origin
            && self.servers.get(e.origin as usize).is_some_and(|pk| {
                pk.verify(
                    &VersionedEntry::digest(&e.key, &e.value, e.vclock.value(), e.origin),
                    &e.sig,
                )
            });
        if origin_ok && e.version() >= 1 && self.verifier.verify(&e.vclock) {
            Ok(())
        } else {
            Err(StoreError::InvalidProof)
        }
    }
}

/// A client session: the dependency clock plus the acceptance rules.
#[derive(Debug, Clone, Default)]
pub struct Session {
    dep: ClockValue,
}

impl Session {
    pub fn dep(&self) -> &ClockValue {
        &self.dep
    }

    /// Accepts a Get result for `key`. A missing entry reads as version 0.
    pub fn accept_get(
        &mut self,
        cluster: &Cluster,
        key: &EntityId,
        got: Option<&VersionedEntry>,
    ) -> Result<u64, StoreError> {
        let need = self.dep.get(key);
        let Some(e) = got else {
            return if need == 0 {
                Ok(0)
            } else {
                Err(StoreError::StaleRead)
            };
        };
        if &e.key != key {
            return Err(StoreError::InvalidProof);
        }
        cluster.check_entry(e)?;
        if e.version() < need {
            return Err(StoreError::StaleRead);
        }
        self.dep.merge(e.vclock.value());
        Ok(e.version())
    }

    /// Accepts a Put reply: the new clock must dominate the session's
    /// dependency clock.
    pub fn accept_put(
        &mut self,
        cluster: &Cluster,
        key: &EntityId,
        value: &[u8],
        e: &VersionedEntry,
    ) -> Result<u64, StoreError> {
        if &e.key != key || e.value != value {
            return Err(StoreError::InvalidProof);
        }
        cluster.check_entry(e)?;
        if e.vclock.value().compare(&self.dep) != ClockOrdering::After {
            return Err(StoreError::CausalityViolated);
        }
        self.dep.merge(e.vclock.value());
        Ok(e.version())
    }
}

/// How a server behaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ServerMode {
    Honest,
    /// Answers every request with a made-up value under a clock that does
    /// not verify.
    Forge,
}

/// Result of offering a propagated entry to a replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Apply {
    /// Installed, together with this many parked entries it unblocked.
    Installed(usize),
    Pending,
    /// Not newer than the local version.
    Stale,
    Invalid,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ServerStats {
    pub puts: u64,
    pub gets: u64,
    pub installed: u64,
    pub pended: u64,
    pub stale: u64,
    pub invalid: u64,
    pub refused: u64,
}

pub struct Server {
    pub idx: ProcId,
    key: KeyPair,
    client: ClockClient,
    cluster: Arc<Cluster>,
    mode: ServerMode,
    store: BTreeMap<EntityId, VersionedEntry>,
    /// Parked entries, indexed by the key whose version they wait for.
    pending: BTreeMap<EntityId, Vec<VersionedEntry>>,
    forged: u64,
    pub stats: ServerStats,
}

impl fmt::Debug for Server {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Server")
            .field("idx", &self.idx)
            .field("mode", &self.mode)
            .field("keys", &self.store.len())
            .field("pending", &self.pending_len())
            .finish()
    }
}

impl Server {
    pub fn new(
        idx: ProcId,
        key: KeyPair,
        client: ClockClient,
        cluster: Arc<Cluster>,
        mode: ServerMode,
    ) -> Self {
        Self {
            idx,
            key,
            client,
            cluster,
            mode,
            store: BTreeMap::new(),
            pending: BTreeMap::new(),
            forged: 0,
            stats: ServerStats::default(),
        }
    }

    /// The server's handle on the validators.
    pub fn clock_client(&self) -> &ClockClient {
        &self.client
    }

    pub fn mode(&self) -> ServerMode {
        self.mode
    }

    pub fn version(&self, key: &EntityId) -> u64 {
        self.store.get(key).map_or(0, VersionedEntry::version)
    }

    pub fn entry(&self, key: &EntityId) -> Option<&VersionedEntry> {
        self.store.get(key)
    }

    pub fn versions(&self) -> BTreeMap<EntityId, u64> {
        self.store
            .iter()
            .map(|(k, e)| (k.clone(), e.version()))
            .collect()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.values().map(Vec::len).sum()
    }

    /// Every key in `c` is present locally at version `c[key]` or later.
    pub fn up_to_date(&self, c: &ClockValue) -> bool {
        c.iter().all(|(id, v)| self.version(id) >= v)
    }

    fn first_unmet(&self, e: &VersionedEntry) -> Option<EntityId> {
        e.vclock
            .value()
            .iter()
            .find(|(id, v)| *id != &e.key && self.version(id) < *v)
            .map(|(id, _)| id.clone())
    }

    /// Handles one client request. An accepted Put is stored here; the
    /// caller propagates it.
    pub fn serve(&mut self, req: &Request) -> Result<Option<VersionedEntry>, StoreError> {
        if self.mode == ServerMode::Forge {
            return Ok(Some(self.forge(req)));
        }
        let authentic = self
            .cluster
            .clients
            .get(req.client as usize)
            .is_some_and(|pk| pk.verify(&req.digest(), &req.sig));
        if !authentic {
            self.stats.refused += 1;
            return Err(StoreError::BadRequest);
        }
        match req.op {
            OpKind::Get => {
                if !self.up_to_date(&req.dep) {
                    self.stats.refused += 1;
                    return Err(StoreError::NotUpToDate);
                }
                self.stats.gets += 1;
                Ok(self.store.get(&req.key).cloned())
            }
            OpKind::Put => self
                .put(req)
                .map(Some)
                .inspect_err(|_| self.stats.refused += 1),
        }
    }

    fn put(&mut self, req: &Request) -> Result<VersionedEntry, StoreError> {
        if self.cluster.partition.owner(&req.key) != self.idx {
            return Err(StoreError::WrongOwner);
        }
        if req.value.len() > MAX_VALUE {
            return Err(StoreError::BadRequest);
        }
        if !self.up_to_date(&req.dep) {
            return Err(StoreError::NotUpToDate);
        }
        let base = self
            .store
            .get(&req.key)
            .map_or_else(Vlc::genesis, |e| e.vclock.clone());
        // Merge only the stored clocks that add something the base lacks;
        // the result then dominates the client's dependency clock.
        let mut acc = base.value().clone();
        let mut merged = Vec::new();
        for (id, need) in req.dep.iter() {
            if id == &req.key || acc.get(id) >= need {
                continue;
            }
            let e = self.store.get(id).expect("up-to-date implies present");
            acc.merge(e.vclock.value());
            merged.push(e.vclock.clone());
        }
        let vclock = self
            .client
            .update(&req.key, &base, &merged, &req.auth().to_bytes())
            .map_err(|e| StoreError::Rejected(e.to_string()))?;
        let entry = VersionedEntry::signed(
            req.key.clone(),
            req.value.clone(),
            vclock,
            self.idx,
            &self.key,
        );
        self.store.insert(req.key.clone(), entry.clone());
        self.stats.puts += 1;
        Ok(entry)
    }

    fn forge(&mut self, req: &Request) -> VersionedEntry {
        self.forged += 1;
        let value = [FORGED_PREFIX, format!("{}", self.forged).as_bytes()].concat();
        let mut raised = req.dep.clone();
        raised.merge(&ClockValue::from_entries([(
            req.key.clone(),
            req.dep.get(&req.key) + 1,
        )]));
        // Alternate between a clock with no proofs and a real stored clock
        // whose value was bumped; neither verifies.
        let vclock = match self.store.get(&req.key) {
            Some(e) if self.forged % 2 == 0 => e.vclock.with_value(raised.merged(e.vclock.value())),
            _ => Vlc::unproven(raised),
        };
        let origin = self.cluster.partition.owner(&req.key);
        VersionedEntry::signed(req.key.clone(), value, vclock, origin, &self.key)
    }

    /// Offers a propagated entry. Installs it when its dependencies are
    /// present, parks it otherwise, and installs parked entries it
    /// unblocks.
    pub fn apply_remote(&mut self, e: VersionedEntry) -> Apply {
        if self.cluster.check_entry(&e).is_err() {
            self.stats.invalid += 1;
            return Apply::Invalid;
        }
        if e.version() <= self.version(&e.key) {
            self.stats.stale += 1;
            return Apply::Stale;
        }
        if let Some(wait) = self.first_unmet(&e) {
            self.stats.pended += 1;
            self.pending.entry(wait).or_default().push(e);
            return Apply::Pending;
        }
        let mut work = vec![e.key.clone()];
        self.install(e);
        let mut unblocked = 0;
        while let Some(k) = work.pop() {
            for p in self.pending.remove(&k).unwrap_or_default() {
                if p.version() <= self.version(&p.key) {
                    self.stats.stale += 1;
                } else if let Some(wait) = self.first_unmet(&p) {
                    self.pending.entry(wait).or_default().push(p);
                } else {
                    work.push(p.key.clone());
                    self.install(p);
                    unblocked += 1;
                }
            }
        }
        Apply::Installed(unblocked)
    }

    fn install(&mut self, e: VersionedEntry) {
        self.stats.installed += 1;
        self.store.insert(e.key.clone(), e);
    }
}

/// Two verifying entries for one key and version that differ: evidence
/// that the owner forked the key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForkEvidence {
    pub key: EntityId,
    pub version: u64,
    pub a: VersionedEntry,
    pub b: VersionedEntry,
}

pub fn detect_forks(cluster: &Cluster, entries: &[VersionedEntry]) -> Vec<ForkEvidence> {
    let mut seen: BTreeMap<(EntityId, u64), &VersionedEntry> = BTreeMap::new();
    let mut out = Vec::new();
    for e in entries.iter().filter(|e| cluster.check_entry(e).is_ok()) {
        match seen.get(&(e.key.clone(), e.version())) {
            Some(first) if *first != e => out.push(ForkEvidence {
                key: e.key.clone(),
                version: e.version(),
                a: (*first).clone(),
                b: e.clone(),
            }),
            Some(_) => {}
            None => {
                seen.insert((e.key.clone(), e.version()), e);
            }
        }
    }
    out
}

/// Static shape of a store deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreConfig {
    pub servers: usize,
    pub clients: usize,
    /// Operations across all clients.
    pub ops: u64,
    pub write_ratio: f64,
    pub keys: usize,
    pub backend: BackendKind,
    pub seed: u64,
    /// Every server forges.
    pub byzantine: bool,
    /// Enforce a per-client key ACL through the APP frontend.
    pub acl: bool,
    /// Include the MONO frontend (on by default; off only to show forks).
    pub mono: bool,
    /// Service time of a Get and a Put at a server, in ticks.
    pub get_cost: Tick,
    pub put_cost: Tick,
    /// Attempts per operation before the client gives up on it.
    pub max_attempts: u32,
}

impl StoreConfig {
    pub fn new(servers: usize, clients: usize, ops: u64, write_ratio: f64, seed: u64) -> Self {
        Self {
            servers,
            clients,
            ops,
            write_ratio,
            keys: 32,
            backend: BackendKind::Quorum,
            seed,
            byzantine: false,
            acl: false,
            mono: true,
            get_cost: 1,
            put_cost: 8,
            max_attempts: 8,
        }
    }

    pub fn key_list(&self) -> Vec<EntityId> {
        (0..self.keys).map(key_name).collect()
    }
}

/// Key-derivation label of the cluster `cfg` describes.
pub fn cluster_label(cfg: &StoreConfig) -> String {
    format!("store/{}/{}", cfg.servers, cfg.backend.name())
}

pub fn server_key(label: &str, i: usize) -> KeyPair {
    KeyPair::from_seed(format!("{label}/server/{i}").as_bytes())
}

pub fn client_key(label: &str, i: usize) -> KeyPair {
    KeyPair::from_seed(format!("{label}/client/{i}").as_bytes())
}

/// With ACLs on, client `i` may write keys whose index is congruent to
/// `i` modulo the client count, plus nothing else.
pub fn acl_for(cfg: &StoreConfig, clients: &[PublicKey]) -> KeyAcl {
    let keys = cfg.key_list();
    KeyAcl {
        clients: clients
            .iter()
            .enumerate()
            .map(|(i, pk)| {
                let prefixes = keys
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| k % clients.len() == i)
                    .map(|(_, key)| key.as_bytes().to_vec())
                    .collect();
                (*pk, prefixes)
            })
            .collect(),
    }
}

/// Builds the shared cluster view, the servers and the client keys.
pub fn build_cluster(cfg: &StoreConfig, label: &str) -> (Arc<Cluster>, Vec<Server>, Vec<KeyPair>) {
    let keys = cfg.key_list();
    let partition = PartitionMap::even(&keys, cfg.servers);
    let server_keys: Vec<KeyPair> = (0..cfg.servers).map(|i| server_key(label, i)).collect();
    let client_keys: Vec<KeyPair> = (0..cfg.clients).map(|i| client_key(label, i)).collect();
    let client_pks: Vec<PublicKey> = client_keys.iter().map(KeyPair::public).collect();
    let mut perms = PermissionTable::new();
    for k in &keys {
        perms.grant(k.clone(), server_keys[partition.owner(k) as usize].public());
    }
    let mut kinds = vec![if cfg.acl {
        FrontendKind::App
    } else {
        FrontendKind::Update
    }];
    if cfg.mono {
        kinds.push(FrontendKind::Mono);
    }
    let (n, f) = default_validators(cfg.backend);
    let mut builder = DeploymentBuilder::new(cfg.backend)
        .kinds(&kinds)
        .validators(n, f)
        .permissions(perms)
        .label(label);
    if cfg.acl {
        builder = builder.app("key-acl", Arc::new(acl_for(cfg, &client_pks)).predicate());
    }
    let d = Arc::new(builder.build().expect("default validator sets are valid"));
    let cluster = Arc::new(Cluster {
        servers: server_keys.iter().map(KeyPair::public).collect(),
        clients: client_pks,
        partition,
        verifier: d.verifier().clone(),
    });
    let mode = if cfg.byzantine {
        ServerMode::Forge
    } else {
        ServerMode::Honest
    };
    let servers = server_keys
        .into_iter()
        .enumerate()
        .map(|(i, k)| {
            Server::new(
                i as ProcId,
                k.clone(),
                ClockClient::new(k, d.clone()),
                cluster.clone(),
                mode,
            )
        })
        .collect();
    (cluster, servers, client_keys)
}

const TAG_SERVE: u64 = 1;
const TAG_RETRY: u64 = 2;

struct InFlight {
    op: OpKind,
    key: EntityId,
    value: Vec<u8>,
    attempt: u32,
    started: Tick,
    req_id: u64,
}

/// Client-side counters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ClientStats {
    pub gets: u64,
    pub puts: u64,
    pub failed: u64,
    pub accepted_forged: u64,
    pub rejects: BTreeMap<String, u64>,
}

pub struct ClientNode {
    idx: u32,
    key: KeyPair,
    cluster: Arc<Cluster>,
    session: Session,
    rng: ChaCha8Rng,
    keys: Arc<Vec<EntityId>>,
    ops: u64,
    write_ratio: f64,
    max_attempts: u32,
    issued: u64,
    next_id: u64,
    current: Option<InFlight>,
    pub stats: ClientStats,
    /// Ticks from first send to acceptance, per completed operation.
    pub latencies: Vec<Tick>,
}

impl ClientNode {
    fn done(&self) -> bool {
        self.issued >= self.ops && self.current.is_none()
    }

    fn servers(&self) -> usize {
        self.cluster.servers.len()
    }

    fn next_op(&mut self, ctx: &mut dyn Context) {
        if self.issued >= self.ops {
            return;
        }
        self.issued += 1;
        let key = self.keys[self.rng.random_range(0..self.keys.len())].clone();
        let write = self.rng.random_bool(self.write_ratio.clamp(0.0, 1.0));
        let (op, value) = if write {
            (
                OpKind::Put,
                format!("c{}-{}", self.idx, self.issued).into_bytes(),
            )
        } else {
            (OpKind::Get, Vec::new())
        };
        self.current = Some(InFlight {
            op,
            key,
            value,
            attempt: 0,
            started: ctx.now(),
            req_id: 0,
        });
    }

    /// Sends the current operation's next attempt and returns the server
    /// it went to.
    fn send_current(&mut self, link: &mut ReliableLink, ctx: &mut dyn Context) {
        let servers = self.servers();
        let id = self.next_id;
        self.next_id += 1;
        let Some(cur) = &mut self.current else { return };
        cur.req_id = id;
        let dst = match cur.op {
            OpKind::Put => self.cluster.partition.owner(&cur.key),
            // Home server first, then the others in turn.
            OpKind::Get => ((self.idx as usize + cur.attempt as usize) % servers) as ProcId,
        };
        let req = Request::signed(
            cur.op,
            id,
            self.idx,
            cur.key.clone(),
            cur.value.clone(),
            self.session.dep().clone(),
            &self.key,
        );
        link.send(ctx, dst, StoreMsg::Request(req).to_bytes());
    }

    fn on_reply(&mut self, link: &mut ReliableLink, ctx: &mut dyn Context, reply: Reply) {
        let Some(cur) = &self.current else { return };
        if reply.id != cur.req_id {
            return;
        }
        let outcome = match (&reply.result, cur.op) {
            (Err(e), _) => Err(e.clone()),
            (Ok(got), OpKind::Get) => {
                self.session
                    .accept_get(&self.cluster, &cur.key, got.as_ref())
            }
            (Ok(Some(e)), OpKind::Put) => {
                self.session
                    .accept_put(&self.cluster, &cur.key, &cur.value, e)
            }
            (Ok(None), OpKind::Put) => Err(StoreError::InvalidProof),
        };
        let cur = self.current.take().expect("checked above");
        match outcome {
            Ok(version) => {
                let entry = reply.result.ok().flatten();
                if entry
                    .as_ref()
                    .is_some_and(|e| e.value.starts_with(FORGED_PREFIX))
                {
                    self.stats.accepted_forged += 1;
                }
                let clock = entry.map(|e| e.vclock.value().clone()).unwrap_or_default();
                let name = match cur.op {
                    OpKind::Get => {
                        self.stats.gets += 1;
                        "get"
                    }
                    OpKind::Put => {
                        self.stats.puts += 1;
                        "put"
                    }
                };
                ctx.note(format!(
                    "{name} key={} version={version} clock={}",
                    cur.key.to_hex(),
                    hex::encode(clock.to_bytes())
                ));
                self.latencies.push(ctx.now() - cur.started);
                self.next_op(ctx);
                self.send_current(link, ctx);
            }
            Err(e) => {
                *self.stats.rejects.entry(e.name().to_string()).or_default() += 1;
                ctx.note(format!(
                    "reject key={} reason={}",
                    cur.key.to_hex(),
                    e.name()
                ));
                if cur.attempt + 1 >= self.max_attempts {
                    self.stats.failed += 1;
                    ctx.note(format!("give-up key={}", cur.key.to_hex()));
                    self.next_op(ctx);
                    self.send_current(link, ctx);
                } else {
                    self.current = Some(InFlight {
                        attempt: cur.attempt + 1,
                        ..cur
                    });
                    // Back off so propagation can catch the replica up.
                    ctx.set_timer(2 + 2 * cur.attempt as Tick, TAG_RETRY);
                }
            }
        }
    }
}

pub struct ServerNode {
    pub server: Server,
    queue: VecDeque<(ProcId, Request)>,
    busy: bool,
    get_cost: Tick,
    put_cost: Tick,
}

impl ServerNode {
    fn cost(&self, op: OpKind) -> Tick {
        match op {
            OpKind::Get => self.get_cost,
            OpKind::Put => self.put_cost,
        }
    }

    fn start_next(&mut self, ctx: &mut dyn Context) {
        if let Some((_, req)) = self.queue.front() {
            self.busy = true;
            ctx.set_timer(self.cost(req.op).max(1), TAG_SERVE);
        } else {
            self.busy = false;
        }
    }

    fn finish_one(&mut self, link: &mut ReliableLink, ctx: &mut dyn Context) {
        let Some((src, req)) = self.queue.pop_front() else {
            return;
        };
        let result = self.server.serve(&req);
        if let (OpKind::Put, Ok(Some(e))) = (req.op, &result) {
            if self.server.mode() == ServerMode::Honest {
                ctx.note(format!(
                    "commit key={} version={}",
                    e.key.to_hex(),
                    e.version()
                ));
                let bytes = StoreMsg::Propagate(e.clone()).to_bytes();
                for q in (0..self.server.cluster.servers.len() as ProcId)
                    .filter(|&q| q != self.server.idx)
                {
                    link.send(ctx, q, bytes.clone());
                }
            }
        }
        link.send(
            ctx,
            src,
            StoreMsg::Reply(Reply { id: req.id, result }).to_bytes(),
        );
        self.start_next(ctx);
    }
}

pub enum Role {
    Server(ServerNode),
    Client(ClientNode),
}

/// One simulated store participant: servers are processes `0..S`,
/// clients follow.
pub struct StoreNode {
    pub role: Role,
    link: ReliableLink,
}

impl StoreNode {
    pub fn is_client(&self) -> bool {
        matches!(self.role, Role::Client(_))
    }

    /// Nothing queued, nothing parked and every sent frame acknowledged.
    pub fn quiet(&self) -> bool {
        let parked = match &self.role {
            Role::Server(s) => s.server.pending_len(),
            Role::Client(_) => 0,
        };
        parked == 0 && self.finished()
    }

    pub fn finished(&self) -> bool {
        let role_done = match &self.role {
            Role::Server(s) => s.queue.is_empty() && !s.busy,
            Role::Client(c) => c.done(),
        };
        role_done && self.link.idle()
    }
}

impl Process for StoreNode {
    fn on_start(&mut self, ctx: &mut dyn Context) {
        if let Role::Client(c) = &mut self.role {
            c.next_op(ctx);
            c.send_current(&mut self.link, ctx);
        }
    }

    fn on_message(&mut self, ctx: &mut dyn Context, src: ProcId, raw: &[u8]) {
        for payload in self.link.receive(ctx, src, raw) {
            let msg = match StoreMsg::from_bytes(&payload) {
                Ok(m) => m,
                Err(e) => {
                    ctx.note(format!("drop malformed from {src}: {e}"));
                    continue;
                }
            };
            match (&mut self.role, msg) {
                (Role::Server(s), StoreMsg::Request(req)) => {
                    s.queue.push_back((src, req));
                    if !s.busy {
                        s.start_next(ctx);
                    }
                }
                (Role::Server(s), StoreMsg::Propagate(e)) => {
                    let (key, version) = (e.key.to_hex(), e.version());
                    match s.server.apply_remote(e) {
                        Apply::Installed(n) => {
                            ctx.note(format!("install key={key} version={version} unblocked={n}"))
                        }
                        Apply::Pending => ctx.note(format!("pend key={key} version={version}")),
                        Apply::Stale => {}
                        Apply::Invalid => ctx.note(format!("invalid entry from {src}")),
                    }
                }
                (Role::Client(c), StoreMsg::Reply(r)) => c.on_reply(&mut self.link, ctx, r),
                (_, m) => ctx.note(format!("unexpected {} from {src}", msg_name(&m))),
            }
        }
    }

    fn on_timer(&mut self, ctx: &mut dyn Context, tag: u64) {
        if self.link.on_timer(ctx, tag) {
            return;
        }
        match (&mut self.role, tag) {
            (Role::Server(s), TAG_SERVE) => s.finish_one(&mut self.link, ctx),
            (Role::Client(c), TAG_RETRY) => c.send_current(&mut self.link, ctx),
            _ => {}
        }
    }
}

fn msg_name(m: &StoreMsg) -> &'static str {
    match m {
        StoreMsg::Request(_) => "request",
        StoreMsg::Reply(_) => "reply",
        StoreMsg::Propagate(_) => "propagate",
    }
}

/// A session that read a key below a version it already depended on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StoreViolation {
    pub client: ProcId,
    pub op_index: usize,
    pub key: String,
    pub version: u64,
    pub required: u64,
}

impl fmt::Display for StoreViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "process {} op {}: key {} at version {} but the session already depended on version {}",
            self.client, self.op_index, self.key, self.version, self.required
        )
    }
}

/// Checks every session in a trace: each accepted read returns a version
/// at least as new as anything the session already depended on, and each
/// accepted write is newer than that.
pub fn check_sessions(trace: &Trace) -> Vec<StoreViolation> {
    let mut seen: BTreeMap<ProcId, (usize, ClockValue)> = BTreeMap::new();
    let mut out = Vec::new();
    for ev in &trace.events {
        let Some(note) = ev.note.as_deref() else {
            continue;
        };
        let Some((is_put, key, version, clock)) = parse_op_note(note) else {
            continue;
        };
        let (idx, dep) = seen.entry(ev.src).or_default();
        let required = dep.get(&key);
        let bad = if is_put {
            version <= required
        } else {
            version < required || clock.get(&key) != version
        };
        if bad {
            out.push(StoreViolation {
                client: ev.src,
                op_index: *idx,
                key: key.to_string(),
                version,
                required,
            });
        }
        dep.merge(&clock);
        *idx += 1;
    }
    out
}

fn parse_op_note(note: &str) -> Option<(bool, EntityId, u64, ClockValue)> {
    let (kind, rest) = note.split_once(' ')?;
    let is_put = match kind {
        "get" => false,
        "put" => true,
        _ => return None,
    };
    let mut key = None;
    let mut version = None;
    let mut clock = None;
    for part in rest.split(' ') {
        let (k, v) = part.split_once('=')?;
        match k {
            "key" => key = EntityId::from_hex(v).ok(),
            "version" => version = v.parse().ok(),
            "clock" => clock = ClockValue::from_bytes(&hex::decode(v).ok()?).ok(),
            _ => {}
        }
    }
    Some((is_put, key?, version?, clock?))
}

/// Everything a store run produced.
#[derive(Debug)]
pub struct StoreReport {
    pub completed: u64,
    pub failed: u64,
    pub accepted_forged: u64,
    pub rejects: BTreeMap<String, u64>,
    /// Sorted completion latencies in ticks.
    pub latencies: Vec<Tick>,
    pub end_time: Tick,
    pub violations: Vec<StoreViolation>,
    /// Honest servers hold identical key → version maps and nothing is
    /// parked.
    pub converged: bool,
    pub versions: Vec<BTreeMap<EntityId, u64>>,
    pub server_stats: Vec<ServerStats>,
    pub messages: u64,
    pub trace: Trace,
}

impl StoreReport {
    /// Completed operations per 1000 ticks.
    pub fn throughput(&self) -> f64 {
        if self.end_time == 0 {
            return 0.0;
        }
        self.completed as f64 * 1000.0 / self.end_time as f64
    }

    /// Latency at quantile `q` in `[0, 1]`, nearest rank.
    pub fn latency(&self, q: f64) -> Tick {
        if self.latencies.is_empty() {
            return 0;
        }
        let rank =
            ((q * self.latencies.len() as f64).ceil() as usize).clamp(1, self.latencies.len());
        self.latencies[rank - 1]
    }
}

/// Builds every participant of a store run: servers `0..S`, then clients.
/// `rto` is the link retransmission timeout.
pub fn store_nodes(cfg: &StoreConfig, rto: Tick) -> Vec<StoreNode> {
    let (cluster, servers, client_keys) = build_cluster(cfg, &cluster_label(cfg));
    let keys = Arc::new(cfg.key_list());
    let mut procs: Vec<StoreNode> = servers
        .into_iter()
        .map(|server| StoreNode {
            role: Role::Server(ServerNode {
                server,
                queue: VecDeque::new(),
                busy: false,
                get_cost: cfg.get_cost,
                put_cost: cfg.put_cost,
            }),
            link: ReliableLink::new(rto),
        })
        .collect();
    let per_client = cfg.ops / cfg.clients.max(1) as u64;
    let extra = cfg.ops % cfg.clients.max(1) as u64;
    for (i, key) in client_keys.into_iter().enumerate() {
        procs.push(StoreNode {
            role: Role::Client(ClientNode {
                idx: i as u32,
                key,
                cluster: cluster.clone(),
                session: Session::default(),
                rng: ChaCha8Rng::seed_from_u64(
                    cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ i as u64,
                ),
                keys: keys.clone(),
                ops: per_client + u64::from((i as u64) < extra),
                write_ratio: cfg.write_ratio,
                max_attempts: cfg.max_attempts.max(1),
                issued: 0,
                next_id: 0,
                current: None,
                stats: ClientStats::default(),
                latencies: Vec::new(),
            }),
            link: ReliableLink::new(rto),
        });
    }
    procs
}

/// Client outcomes and replica state gathered from finished participants.
#[derive(Debug, Clone, Default)]
pub struct StoreSummary {
    pub completed: u64,
    pub failed: u64,
    pub accepted_forged: u64,
    pub rejects: BTreeMap<String, u64>,
    /// Sorted ascending.
    pub latencies: Vec<Tick>,
    /// Honest replicas agree on every key's version and hold nothing pending.
    pub converged: bool,
    pub versions: Vec<BTreeMap<EntityId, u64>>,
    pub server_stats: Vec<ServerStats>,
}

pub fn summarize<'a>(procs: impl IntoIterator<Item = &'a StoreNode>) -> StoreSummary {
    let mut sum = StoreSummary::default();
    let mut parked = 0;
    for p in procs {
        match &p.role {
            Role::Client(c) => {
                sum.completed += c.stats.gets + c.stats.puts;
                sum.failed += c.stats.failed;
                sum.accepted_forged += c.stats.accepted_forged;
                for (k, v) in &c.stats.rejects {
                    *sum.rejects.entry(k.clone()).or_default() += v;
                }
                sum.latencies.extend_from_slice(&c.latencies);
            }
            Role::Server(s) => {
                if s.server.mode() == ServerMode::Honest {
                    sum.versions.push(s.server.versions());
                    parked += s.server.pending_len();
                }
                sum.server_stats.push(s.server.stats.clone());
            }
        }
    }
    sum.latencies.sort_unstable();
    sum.converged = parked == 0 && sum.versions.windows(2).all(|w| w[0] == w[1]);
    sum
}

pub fn run_store(cfg: &StoreConfig, plan: &FaultPlan) -> Result<StoreReport, SimError> {
    let rto = 2 * plan.delay_max.max(plan.delay_min) + plan.reorder_extra + 2;
    let procs = store_nodes(cfg, rto);
    let plan = FaultPlan {
        seed: cfg.seed,
        ..plan.clone()
    };
    let mut sim = Simulator::new(procs, plan);
    let outcome = sim.run(|ps, _| ps.iter().all(StoreNode::finished))?;
    let messages = sim.stats().sent;
    let (procs, trace) = sim.into_parts();
    let sum = summarize(&procs);
    Ok(StoreReport {
        completed: sum.completed,
        failed: sum.failed,
        accepted_forged: sum.accepted_forged,
        rejects: sum.rejects,
        latencies: sum.latencies,
        end_time: outcome.time(),
        violations: check_sessions(&trace),
        converged: sum.converged,
        versions: sum.versions,
        server_stats: sum.server_stats,
        messages,
        trace,
    })
}

/// Rebuilds participant `id` of the cluster described by `cfg`. Every
/// participant derives the same keys and partition from the config, so
/// separate OS processes agree without exchanging anything.
pub fn store_node(cfg: &StoreConfig, id: ProcId, rto: Tick) -> Option<StoreNode> {
    store_nodes(cfg, rto).into_iter().nth(id as usize)
}

/// Retransmission timeout over real sockets, in milliseconds. TCP already
/// retransmits; this only covers reconnects.
pub const TCP_RTO: Tick = 500;

/// Runs the whole cluster over localhost sockets, one thread per
/// participant. Ticks are milliseconds. Servers stop once every client has
/// finished and they are quiet. Returns the summary and whether everything
/// stopped before `limit`.
pub fn run_store_tcp(cfg: &StoreConfig, limit: Duration) -> io::Result<(StoreSummary, bool)> {
    let procs = store_nodes(cfg, TCP_RTO);
    let (listeners, addrs) = bind_local(procs.len())?;
    let clients_done = Arc::new(AtomicUsize::new(0));
    let clients = procs.iter().filter(|p| p.is_client()).count();
    let handles: Vec<_> = procs
        .into_iter()
        .zip(listeners)
        .enumerate()
        .map(|(i, (p, l))| {
            let node = TcpNode::new(i as ProcId, l, addrs.clone(), p);
            let done = clients_done.clone();
            thread::spawn(move || {
                let mut counted = false;
                node.run(
                    |p: &StoreNode| {
                        if p.is_client() {
                            if p.finished() && !counted {
                                counted = true;
                                done.fetch_add(1, AtomicOrdering::SeqCst);
                            }
                            // Stay up to acknowledge late frames until all
                            // clients are through.
                            counted && done.load(AtomicOrdering::SeqCst) == clients
                        } else {
                            done.load(AtomicOrdering::SeqCst) == clients && p.quiet()
                        }
                    },
                    limit,
                )
            })
        })
        .collect();
    let mut nodes = Vec::new();
    let mut all_stopped = true;
    for h in handles {
        let (p, stopped) = h
            .join()
            .map_err(|_| io::Error::other("store node panicked"))?;
        all_stopped &= stopped;
        nodes.push(p);
    }
    Ok((summarize(&nodes), all_stopped))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_covers_every_key_once() {
        let keys: Vec<EntityId> = (0..10).map(key_name).collect();
        let p = PartitionMap::even(&keys, 3);
        let owners: Vec<ProcId> = keys.iter().map(|k| p.owner(k)).collect();
        assert_eq!(owners, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2]);
        assert_eq!(PartitionMap::new(vec![]), Err(PartitionError::Empty));
        assert_eq!(
            PartitionMap::new(vec![(b"a".to_vec(), 0)]),
            Err(PartitionError::Uncovered)
        );
        assert_eq!(
            PartitionMap::new(vec![(vec![], 0), (b"b".to_vec(), 1), (b"b".to_vec(), 2)]),
            Err(PartitionError::Overlap)
        );
    }

    #[test]
    fn messages_round_trip() {
        let k = KeyPair::from_seed(b"t");
        let req = Request::signed(
            OpKind::Put,
            7,
            1,
            key_name(3),
            b"v".to_vec(),
            vlc_core::clock(&[("k0001", 2)]),
            &k,
        );
        let m = StoreMsg::Request(req.clone());
        assert_eq!(StoreMsg::from_bytes(&m.to_bytes()).unwrap(), m);
        let e = VersionedEntry::signed(
            key_name(3),
            b"v".to_vec(),
            Vlc::unproven(vlc_core::clock(&[("k0003", 1)])),
            0,
            &k,
        );
        for result in [
            Ok(None),
            Ok(Some(e.clone())),
            Err(StoreError::NotUpToDate),
            Err(StoreError::Rejected("x".into())),
        ] {
            let m = StoreMsg::Reply(Reply { id: 3, result });
            assert_eq!(StoreMsg::from_bytes(&m.to_bytes()).unwrap(), m);
        }
        let m = StoreMsg::Propagate(e);
        assert_eq!(StoreMsg::from_bytes(&m.to_bytes()).unwrap(), m);
        let auth = req.auth();
        assert_eq!(PutAuth::from_bytes(&auth.to_bytes()).unwrap(), auth);
        assert!(auth.verify(&key_name(3), &k.public()));
        assert!(!auth.verify(&key_name(4), &k.public()));
    }

    #[test]
    fn op_notes_parse() {
        let key = key_name(2);
        let c = vlc_core::clock(&[("k0002", 3)]);
        let note = format!(
            "get key={} version=3 clock={}",
            key.to_hex(),
            hex::encode(c.to_bytes())
        );
        assert_eq!(parse_op_note(&note), Some((false, key, 3, c)));
        assert_eq!(parse_op_note("commit key=00 version=1"), None);
    }
}
