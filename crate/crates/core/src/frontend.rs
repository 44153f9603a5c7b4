//! Validator frontends: the semantic checks a backend runs before it
//! produces a proof for an `Update` request.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{ClockValue, EntityId};
use crate::codec::{put_bytes, put_u32, put_u8, DecodeError, Reader};
use crate::keys::{tagged_hash, Digest, KeyPair, PublicKey, SIGNATURE_LEN};
use crate::vlc::{Verifier, Vlc};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum FrontendKind {
    Update = 1,
    Mono = 2,
    App = 3,
}

impl FrontendKind {
    pub const ALL: [FrontendKind; 3] =
        [FrontendKind::Update, FrontendKind::Mono, FrontendKind::App];

    pub fn from_byte(b: u8) -> Result<Self, DecodeError> {
        match b {
            1 => Ok(Self::Update),
            2 => Ok(Self::Mono),
            3 => Ok(Self::App),
            other => Err(DecodeError::invalid("frontend kind", other.to_string())),
        }
    }

    /// Stateful kinds need quorum intersection; stateless kinds do not.
    pub fn is_stateful(self) -> bool {
        self == Self::Mono
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Update => "update",
            Self::Mono => "mono",
            Self::App => "app",
        }
    }
}

impl fmt::Display for FrontendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FrontendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "update" => Ok(Self::Update),
            "mono" => Ok(Self::Mono),
            "app" => Ok(Self::App),
            other => Err(format!("unknown frontend kind {other:?}")),
        }
    }
}

/// Why a frontend refused to prove a request.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Reject {
    #[error("input clock {0} does not verify")]
    InvalidInputClock(InputSlot),
    #[error("invoker key has no permission on id {0}")]
    PermissionDenied(EntityId),
    #[error("invoker signature does not verify")]
    BadSignature,
    #[error("stale base for {id}: base counter {base} below issued counter {issued}")]
    StaleBase {
        id: EntityId,
        base: u64,
        issued: u64,
    },
    #[error("application rule violated: {0}")]
    AppRuleViolation(String),
    #[error("request kind {got} sent to {expected} frontend")]
    WrongKind {
        expected: FrontendKind,
        got: FrontendKind,
    },
    #[error("frontend {0} is not enabled")]
    NotEnabled(FrontendKind),
}

/// Which input of a request failed verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputSlot {
    Base,
    Merged(usize),
}

impl fmt::Display for InputSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputSlot::Base => f.write_str("base"),
            InputSlot::Merged(i) => write!(f, "merged[{i}]"),
        }
    }
}

/// Stable wire code of a [`Reject`], used to match rejections across nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum RejectCode {
    InvalidInputClock = 1,
    PermissionDenied = 2,
    BadSignature = 3,
    StaleBase = 4,
    AppRuleViolation = 5,
    WrongKind = 6,
    NotEnabled = 7,
    /// A code this build does not know.
    Other = 255,
}

impl RejectCode {
    pub fn from_byte(b: u8) -> Self {
        match b {
            1 => Self::InvalidInputClock,
            2 => Self::PermissionDenied,
            3 => Self::BadSignature,
            4 => Self::StaleBase,
            5 => Self::AppRuleViolation,
            6 => Self::WrongKind,
            7 => Self::NotEnabled,
            _ => Self::Other,
        }
    }
}

impl Reject {
    pub fn code(&self) -> RejectCode {
        match self {
            Reject::InvalidInputClock(_) => RejectCode::InvalidInputClock,
            Reject::PermissionDenied(_) => RejectCode::PermissionDenied,
            Reject::BadSignature => RejectCode::BadSignature,
            Reject::StaleBase { .. } => RejectCode::StaleBase,
            Reject::AppRuleViolation(_) => RejectCode::AppRuleViolation,
            Reject::WrongKind { .. } => RejectCode::WrongKind,
            Reject::NotEnabled(_) => RejectCode::NotEnabled,
        }
    }
}

/// A signed `Update(id, base, merged)` invocation addressed to one frontend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProveRequest {
    pub kind: FrontendKind,
    pub id: EntityId,
    pub base: Vlc,
    pub merged: Vec<Vlc>,
    pub invoker: PublicKey,
    pub invoker_sig: [u8; SIGNATURE_LEN],
    /// Opaque application input, read only by the APP predicate.
    pub aux: Vec<u8>,
}

impl ProveRequest {
    /// `SHA-256("CHRONO/REQ/v1" ‖ kind ‖ id ‖ base ‖ count ‖ merged...)`
    /// over canonical clock values.
    pub fn signing_payload(
        kind: FrontendKind,
        id: &EntityId,
        base: &ClockValue,
        merged: &[&ClockValue],
    ) -> Digest {
        let mut body = Vec::new();
        put_u8(&mut body, kind as u8);
        id.encode_into(&mut body);
        base.encode_into(&mut body);
        put_u32(&mut body, merged.len() as u32);
        for m in merged {
            m.encode_into(&mut body);
        }
        tagged_hash(b"CHRONO/REQ/v1", &[&body])
    }

    pub fn signed(
        kind: FrontendKind,
        id: EntityId,
        base: Vlc,
        merged: Vec<Vlc>,
        aux: Vec<u8>,
        invoker: &KeyPair,
    ) -> Self {
        let values: Vec<&ClockValue> = merged.iter().map(Vlc::value).collect();
        let payload = Self::signing_payload(kind, &id, base.value(), &values);
        Self {
            kind,
            id,
            base,
            merged,
            invoker: invoker.public(),
            invoker_sig: invoker.sign(&payload),
            aux,
        }
    }

    pub fn payload(&self) -> Digest {
        let values: Vec<&ClockValue> = self.merged.iter().map(Vlc::value).collect();
        Self::signing_payload(self.kind, &self.id, self.base.value(), &values)
    }

    /// The clock value any honest frontend would output for this request.
    pub fn output_value(&self) -> ClockValue {
        let others: Vec<&ClockValue> = self.merged.iter().map(Vlc::value).collect();
        self.base.value().update(&self.id, &others)
    }

    /// Same invocation re-targeted at another frontend kind.
    pub fn for_kind(&self, kind: FrontendKind, invoker: &KeyPair) -> Self {
        Self::signed(
            kind,
            self.id.clone(),
            self.base.clone(),
            self.merged.clone(),
            self.aux.clone(),
            invoker,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_u8(&mut out, self.kind as u8);
        self.id.encode_into(&mut out);
        self.base.encode_into(&mut out);
        put_u32(&mut out, self.merged.len() as u32);
        for m in &self.merged {
            m.encode_into(&mut out);
        }
        out.extend_from_slice(self.invoker.as_bytes());
        out.extend_from_slice(&self.invoker_sig);
        put_bytes(&mut out, &self.aux);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let kind = FrontendKind::from_byte(r.u8()?)?;
        let id = EntityId::decode_from(&mut r)?;
        let base = Vlc::decode_from(&mut r)?;
        let n = r.u32()? as usize;
        if n > r.remaining() {
            return Err(DecodeError::invalid(
                "request",
                "merged count exceeds input",
            ));
        }
        let mut merged = Vec::with_capacity(n);
        for _ in 0..n {
            merged.push(Vlc::decode_from(&mut r)?);
        }
        let invoker = PublicKey::from_bytes(r.array()?)?;
        let invoker_sig = r.array()?;
        let aux = r.bytes()?.to_vec();
        r.finish()?;
        Ok(Self {
            kind,
            id,
            base,
            merged,
            invoker,
            invoker_sig,
            aux,
        })
    }
}

/// Which keys may invoke `Update` on which ids. Keys under the wildcard
/// may invoke on any id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PermissionTable {
    entries: BTreeMap<EntityId, BTreeSet<PublicKey>>,
    wildcard: BTreeSet<PublicKey>,
}

#[derive(Debug, Error)]
pub enum PermissionError {
    #[error("malformed permission file: {0}")]
    Malformed(String),
    #[error("permission file signed by untrusted key")]
    UntrustedSigner,
    #[error("permission file signature does not verify")]
    BadSignature,
}

#[derive(Serialize, Deserialize)]
struct SignedPermissionFile {
    entries: BTreeMap<String, Vec<PublicKey>>,
    signer: PublicKey,
    signature: String,
}

const WILDCARD: &str = "*";

impl PermissionTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn grant(&mut self, id: EntityId, key: PublicKey) {
        self.entries.entry(id).or_default().insert(key);
    }

    pub fn grant_all(&mut self, key: PublicKey) {
        self.wildcard.insert(key);
    }

    pub fn allows(&self, id: &EntityId, key: &PublicKey) -> bool {
        self.wildcard.contains(key) || self.entries.get(id).is_some_and(|s| s.contains(key))
    }

    fn digest(&self) -> Digest {
        let mut body = Vec::new();
        put_u32(&mut body, self.entries.len() as u32);
        for (id, keys) in &self.entries {
            id.encode_into(&mut body);
            put_u32(&mut body, keys.len() as u32);
            for k in keys {
                body.extend_from_slice(k.as_bytes());
            }
        }
        put_u32(&mut body, self.wildcard.len() as u32);
        for k in &self.wildcard {
            body.extend_from_slice(k.as_bytes());
        }
        tagged_hash(b"CHRONO/PERMS/v1", &[&body])
    }

    /// Serializes as JSON `{entries: {idhex: [pkhex]}, signer, signature}`;
    /// wildcard keys live under the `"*"` entry.
    pub fn to_signed_json(&self, signer: &KeyPair) -> String {
        let mut entries: BTreeMap<String, Vec<PublicKey>> = self
            .entries
            .iter()
            .map(|(id, keys)| (id.to_hex(), keys.iter().copied().collect()))
            .collect();
        if !self.wildcard.is_empty() {
            entries.insert(WILDCARD.to_owned(), self.wildcard.iter().copied().collect());
        }
        let file = SignedPermissionFile {
            entries,
            signer: signer.public(),
            signature: hex::encode(signer.sign(&self.digest())),
        };
        serde_json::to_string_pretty(&file).expect("permission table serializes")
    }

    pub fn from_signed_json(json: &str, trusted: &PublicKey) -> Result<Self, PermissionError> {
        let file: SignedPermissionFile =
            serde_json::from_str(json).map_err(|e| PermissionError::Malformed(e.to_string()))?;
        if &file.signer != trusted {
            return Err(PermissionError::UntrustedSigner);
        }
        let mut table = PermissionTable::new();
        for (id, keys) in file.entries {
            if id == WILDCARD {
                table.wildcard.extend(keys);
            } else {
                let id = EntityId::from_hex(&id)
                    .map_err(|e| PermissionError::Malformed(e.to_string()))?;
                table.entries.entry(id).or_default().extend(keys);
            }
        }
        let sig: [u8; SIGNATURE_LEN] = hex::decode(&file.signature)
            .ok()
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| PermissionError::Malformed("signature must be 64 hex bytes".into()))?;
        if !trusted.verify(&table.digest(), &sig) {
            return Err(PermissionError::BadSignature);
        }
        Ok(table)
    }
}

/// Highest counter issued per id by one MONO frontend instance.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MonoState {
    issued: BTreeMap<EntityId, u64>,
}

impl MonoState {
    pub fn get(&self, id: &EntityId) -> u64 {
        self.issued.get(id).copied().unwrap_or(0)
    }

    fn advance(&mut self, id: &EntityId, to: u64) {
        let slot = self.issued.entry(id.clone()).or_insert(0);
        *slot = (*slot).max(to);
    }
}

/// Pure application predicate over a request (including its `aux`).
pub type AppPredicate = Arc<dyn Fn(&ProveRequest) -> Result<(), String> + Send + Sync>;

pub fn allow_all() -> AppPredicate {
    Arc::new(|_| Ok(()))
}

/// Predicates registered at startup, looked up by application name.
#[derive(Clone, Default)]
pub struct AppRegistry {
    predicates: BTreeMap<String, AppPredicate>,
}

impl AppRegistry {
    pub fn with_builtins() -> Self {
        let mut r = Self::default();
        r.register("allow-all", allow_all());
        r
    }

    pub fn register(&mut self, name: &str, p: AppPredicate) {
        self.predicates.insert(name.to_owned(), p);
    }

    pub fn get(&self, name: &str) -> Option<AppPredicate> {
        self.predicates.get(name).cloned()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.predicates.keys().map(String::as_str)
    }
}

impl fmt::Debug for AppRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.predicates.keys()).finish()
    }
}

fn check_inputs(req: &ProveRequest, verify: &dyn Fn(&Vlc) -> bool) -> Result<(), Reject> {
    if !verify(&req.base) {
        return Err(Reject::InvalidInputClock(InputSlot::Base));
    }
    for (i, m) in req.merged.iter().enumerate() {
        if !verify(m) {
            return Err(Reject::InvalidInputClock(InputSlot::Merged(i)));
        }
    }
    Ok(())
}

fn check_invoker(req: &ProveRequest, perms: &PermissionTable) -> Result<(), Reject> {
    if !perms.allows(&req.id, &req.invoker) {
        return Err(Reject::PermissionDenied(req.id.clone()));
    }
    if !req.invoker.verify(&req.payload(), &req.invoker_sig) {
        return Err(Reject::BadSignature);
    }
    Ok(())
}

fn expect_kind(req: &ProveRequest, expected: FrontendKind) -> Result<(), Reject> {
    if req.kind != expected {
        return Err(Reject::WrongKind {
            expected,
            got: req.kind,
        });
    }
    Ok(())
}

/// Stateless UPDATE check: inputs verify and the invoker is permitted.
pub fn frontend_update(
    req: &ProveRequest,
    perms: &PermissionTable,
    verify: &dyn Fn(&Vlc) -> bool,
) -> Result<ClockValue, Reject> {
    expect_kind(req, FrontendKind::Update)?;
    check_inputs(req, verify)?;
    check_invoker(req, perms)?;
    Ok(req.output_value())
}

/// MONO check: UPDATE rules plus `base[id] >= issued[id]`. On success the
/// state records the output counter for `id`.
pub fn frontend_mono(
    req: &ProveRequest,
    perms: &PermissionTable,
    state: &mut MonoState,
    verify: &dyn Fn(&Vlc) -> bool,
) -> Result<ClockValue, Reject> {
    expect_kind(req, FrontendKind::Mono)?;
    check_inputs(req, verify)?;
    check_invoker(req, perms)?;
    let base = req.base.value().get(&req.id);
    let issued = state.get(&req.id);
    if base < issued {
        return Err(Reject::StaleBase {
            id: req.id.clone(),
            base,
            issued,
        });
    }
    let out = req.output_value();
    state.advance(&req.id, out.get(&req.id));
    Ok(out)
}

/// APP check: UPDATE rules plus the registered pure predicate.
pub fn frontend_app(
    req: &ProveRequest,
    perms: &PermissionTable,
    predicate: &AppPredicate,
    verify: &dyn Fn(&Vlc) -> bool,
) -> Result<ClockValue, Reject> {
    expect_kind(req, FrontendKind::App)?;
    check_inputs(req, verify)?;
    check_invoker(req, perms)?;
    predicate(req).map_err(Reject::AppRuleViolation)?;
    Ok(req.output_value())
}

/// Everything one validator (quorum node or enclave) needs to run the
/// frontends: permissions, predicate, an input verifier and MONO state.
pub struct FrontendHost {
    perms: Arc<PermissionTable>,
    app: Option<AppPredicate>,
    verifier: Arc<Verifier>,
    mono: Mutex<MonoState>,
}

impl FrontendHost {
    pub fn new(
        perms: Arc<PermissionTable>,
        app: Option<AppPredicate>,
        verifier: Arc<Verifier>,
    ) -> Self {
        Self {
            perms,
            app,
            verifier,
            mono: Mutex::new(MonoState::default()),
        }
    }

    pub fn verifier(&self) -> &Arc<Verifier> {
        &self.verifier
    }

    pub fn mono_state(&self) -> MonoState {
        self.mono.lock().expect("mono state poisoned").clone()
    }

    /// Runs the frontend matching `req.kind`. With `enforce_mono` false the
    /// MONO frontend runs against a throwaway empty state, which models a
    /// validator that lost or ignores its state.
    pub fn run(&self, req: &ProveRequest, enforce_mono: bool) -> Result<ClockValue, Reject> {
        if !self.verifier.kinds().contains(&req.kind) {
            return Err(Reject::NotEnabled(req.kind));
        }
        let verify = |v: &Vlc| self.verifier.verify(v);
        match req.kind {
            FrontendKind::Update => frontend_update(req, &self.perms, &verify),
            FrontendKind::Mono if enforce_mono => {
                let mut state = self.mono.lock().expect("mono state poisoned");
                frontend_mono(req, &self.perms, &mut state, &verify)
            }
            FrontendKind::Mono => {
                frontend_mono(req, &self.perms, &mut MonoState::default(), &verify)
            }
            FrontendKind::App => {
                let p = self.app.clone().unwrap_or_else(allow_all);
                frontend_app(req, &self.perms, &p, &verify)
            }
        }
    }
}

impl fmt::Debug for FrontendHost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FrontendHost")
            .field("kinds", &self.verifier.kinds())
            .field("app", &self.app.is_some())
            .finish_non_exhaustive()
    }
}
