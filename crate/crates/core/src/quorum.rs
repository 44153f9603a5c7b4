//! Quorum-certificate backend: `t`-of-`N` validator signatures over the
//! canonical output clock.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::ClockValue;
use crate::codec::{put_u16, put_u32, put_u8, DecodeError, Reader};
use crate::frontend::{FrontendHost, FrontendKind, ProveRequest};
use crate::keys::{sha256, tagged_hash, verify_all, Digest, KeyPair, PublicKey, SIGNATURE_LEN};
use crate::validator::{NodeReply, ProveError, RejectInfo, ValidatorEndpoint};

pub type NodeId = u32;

/// `SHA-256("CHRONO/QC/v1" ‖ kind ‖ canonical clock bytes)`.
pub fn sign_payload(kind: FrontendKind, value: &ClockValue) -> Digest {
    tagged_hash(b"CHRONO/QC/v1", &[&[kind as u8], &value.to_bytes()])
}

pub fn value_hash(value: &ClockValue) -> Digest {
    sha256(&value.to_bytes())
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("registry is empty")]
    Empty,
    #[error("{n} nodes cannot reach threshold {t} for {kind}")]
    TooFewNodes {
        n: usize,
        t: usize,
        kind: FrontendKind,
    },
}

/// Static validator membership and fault bound.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuorumConfig {
    pub f: usize,
    pub registry: BTreeMap<NodeId, PublicKey>,
}

impl QuorumConfig {
    pub fn new(f: usize, registry: BTreeMap<NodeId, PublicKey>) -> Result<Self, ConfigError> {
        if registry.is_empty() {
            return Err(ConfigError::Empty);
        }
        Ok(Self { f, registry })
    }

    pub fn n(&self) -> usize {
        self.registry.len()
    }

    pub fn t_stateless(&self) -> usize {
        self.f + 1
    }

    /// `⌈(N + f + 1) / 2⌉`: any two quorums overlap in at least `f + 1` nodes.
    pub fn t_stateful(&self) -> usize {
        (self.n() + self.f + 1).div_ceil(2)
    }

    pub fn threshold(&self, kind: FrontendKind) -> usize {
        if kind.is_stateful() {
            self.t_stateful()
        } else {
            self.t_stateless()
        }
    }

    /// Checks that every enabled kind's threshold is reachable.
    pub fn validate(&self, kinds: &[FrontendKind]) -> Result<(), ConfigError> {
        for &kind in kinds {
            let t = self.threshold(kind);
            if self.n() < t {
                return Err(ConfigError::TooFewNodes {
                    n: self.n(),
                    t,
                    kind,
                });
            }
        }
        Ok(())
    }

    /// `check(π)`: enough distinct registered signers, each signature valid
    /// over `(kind, value)`, and the cert's hash matching `value`.
    pub fn check_cert(&self, cert: &QuorumCert, value: &ClockValue) -> bool {
        if cert.value_hash != value_hash(value) {
            return false;
        }
        if cert.sigs.len() < self.threshold(cert.kind) {
            return false;
        }
        let payload = sign_payload(cert.kind, value);
        let mut items = Vec::with_capacity(cert.sigs.len());
        for (node, sig) in &cert.sigs {
            match self.registry.get(node) {
                Some(pk) => items.push((*pk, payload.as_slice(), *sig)),
                None => return false,
            }
        }
        verify_all(&items)
    }
}

/// Signatures from distinct nodes over one `(kind, value)` pair.
#[derive(Clone, PartialEq, Eq)]
pub struct QuorumCert {
    pub kind: FrontendKind,
    pub value_hash: Digest,
    pub sigs: BTreeMap<NodeId, [u8; SIGNATURE_LEN]>,
}

impl QuorumCert {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(35 + self.sigs.len() * 68);
        put_u8(&mut out, self.kind as u8);
        out.extend_from_slice(&self.value_hash);
        put_u16(&mut out, self.sigs.len() as u16);
        for (id, sig) in &self.sigs {
            put_u32(&mut out, *id);
            out.extend_from_slice(sig);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let kind = FrontendKind::from_byte(r.u8()?)?;
        let value_hash = r.array()?;
        let count = r.u16()?;
        let mut sigs = BTreeMap::new();
        let mut prev: Option<NodeId> = None;
        for _ in 0..count {
            let id = r.u32()?;
            if prev.is_some_and(|p| p >= id) {
                return Err(DecodeError::invalid(
                    "quorum cert",
                    "signer ids not strictly ascending",
                ));
            }
            prev = Some(id);
            sigs.insert(id, r.array()?);
        }
        r.finish()?;
        Ok(Self {
            kind,
            value_hash,
            sigs,
        })
    }
}

impl fmt::Debug for QuorumCert {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QuorumCert")
            .field("kind", &self.kind)
            .field("value_hash", &hex::encode(&self.value_hash[..6]))
            .field("signers", &self.sigs.keys().collect::<Vec<_>>())
            .finish()
    }
}

/// Behaviour of a validator node. Everything except `Honest` is a fault
/// injected for testing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultMode {
    #[default]
    Honest,
    /// Never replies.
    Silent,
    /// Signs a corrupted clock value.
    WrongValue,
    /// Honest to some invokers, corrupted to others.
    Equivocate,
    /// Runs MONO without its issued-counter state, so it signs forks.
    StaleState,
}

/// One quorum validator: signing key, frontend host and fault mode.
pub struct QuorumNode {
    id: NodeId,
    key: KeyPair,
    host: FrontendHost,
    mode: Mutex<FaultMode>,
}

impl QuorumNode {
    pub fn new(id: NodeId, key: KeyPair, host: FrontendHost) -> Self {
        Self {
            id,
            key,
            host,
            mode: Mutex::new(FaultMode::Honest),
        }
    }

    pub fn public(&self) -> PublicKey {
        self.key.public()
    }

    pub fn host(&self) -> &FrontendHost {
        &self.host
    }

    pub fn mode(&self) -> FaultMode {
        *self.mode.lock().expect("fault mode poisoned")
    }

    pub fn set_mode(&self, mode: FaultMode) {
        *self.mode.lock().expect("fault mode poisoned") = mode;
    }

    /// Signs an arbitrary value. Models a compromised node's key.
    pub fn sign_arbitrary(&self, kind: FrontendKind, value: &ClockValue) -> [u8; SIGNATURE_LEN] {
        self.key.sign(&sign_payload(kind, value))
    }

    fn corrupt(req: &ProveRequest) -> ClockValue {
        let mut v = req.output_value();
        let bumped = v.get(&req.id) + 1000;
        v = v.merged(&ClockValue::from_entries([(req.id.clone(), bumped)]));
        v
    }

    fn sig(&self, kind: FrontendKind, value: &ClockValue) -> NodeReply {
        NodeReply::Sig {
            node_id: self.id,
            sig: self.sign_arbitrary(kind, value),
        }
    }

    fn honest(&self, req: &ProveRequest, enforce_mono: bool) -> NodeReply {
        match self.host.run(req, enforce_mono) {
            Ok(v) => self.sig(req.kind, &v),
            Err(r) => NodeReply::Reject(RejectInfo::from(&r)),
        }
    }
}

impl ValidatorEndpoint for QuorumNode {
    fn node_id(&self) -> NodeId {
        self.id
    }

    fn prove(&self, req: &ProveRequest) -> Option<NodeReply> {
        let reply = match self.mode() {
            FaultMode::Honest => self.honest(req, true),
            FaultMode::Silent => return None,
            FaultMode::StaleState => self.honest(req, false),
            FaultMode::WrongValue => self.sig(req.kind, &Self::corrupt(req)),
            FaultMode::Equivocate => {
                if req.invoker.as_bytes()[0] % 2 == 0 {
                    self.honest(req, true)
                } else {
                    self.sig(req.kind, &Self::corrupt(req))
                }
            }
        };
        Some(reply)
    }
}

impl fmt::Debug for QuorumNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QuorumNode")
            .field("id", &self.id)
            .field("mode", &self.mode())
            .finish_non_exhaustive()
    }
}

/// Collects `t` matching signatures for `req`.
///
/// The expected output is computed locally; a partial signature counts only
/// if it verifies over that value. Nodes are contacted `t` at a time first,
/// then one by one, starting at `start` and wrapping around.
pub fn client_prove(
    cfg: &QuorumConfig,
    endpoints: &[Arc<dyn ValidatorEndpoint>],
    req: &ProveRequest,
    start: usize,
) -> Result<QuorumCert, ProveError> {
    let t = cfg.threshold(req.kind);
    let expected = req.output_value();
    let payload = sign_payload(req.kind, &expected);
    let mut sigs = BTreeMap::new();
    let mut rejects: Vec<RejectInfo> = Vec::new();
    let n = endpoints.len();
    for step in 0..n {
        if sigs.len() >= t {
            break;
        }
        // Stop once the remaining nodes cannot complete the quorum.
        if sigs.len() + (n - step) < t {
            break;
        }
        let ep = &endpoints[(start + step) % n];
        match ep.prove(req) {
            Some(NodeReply::Sig { node_id, sig }) => {
                let valid = node_id == ep.node_id()
                    && cfg
                        .registry
                        .get(&node_id)
                        .is_some_and(|pk| pk.verify(&payload, &sig));
                if valid {
                    sigs.insert(node_id, sig);
                } else {
                    log::debug!("node {} returned a non-matching signature", ep.node_id());
                }
            }
            Some(NodeReply::Reject(info)) => rejects.push(info),
            Some(NodeReply::Attest(_)) | None => {}
        }
    }
    if sigs.len() >= t {
        while sigs.len() > t {
            sigs.pop_last();
        }
        return Ok(QuorumCert {
            kind: req.kind,
            value_hash: value_hash(&expected),
            sigs,
        });
    }
    Err(ProveError::classify(
        rejects,
        cfg.f + 1,
        req.kind,
        sigs.len(),
        t,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: u32, f: usize) -> QuorumConfig {
        let reg = (0..n)
            .map(|i| (i, KeyPair::from_seed(&i.to_be_bytes()).public()))
            .collect();
        QuorumConfig::new(f, reg).unwrap()
    }

    #[test]
    fn thresholds() {
        let c = cfg(5, 1);
        assert_eq!(c.threshold(FrontendKind::Update), 2);
        assert_eq!(c.threshold(FrontendKind::App), 2);
        assert_eq!(c.threshold(FrontendKind::Mono), 4);
        assert_eq!(cfg(4, 1).t_stateful(), 3);
        assert_eq!(cfg(1, 0).t_stateless(), 1);
        assert_eq!(cfg(1, 0).t_stateful(), 1);
    }

    #[test]
    fn validate_rejects_unreachable_threshold() {
        assert!(cfg(2, 1).validate(&FrontendKind::ALL).is_ok());
        assert_eq!(
            cfg(2, 2).validate(&[FrontendKind::Update]),
            Err(ConfigError::TooFewNodes {
                n: 2,
                t: 3,
                kind: FrontendKind::Update
            })
        );
    }

    #[test]
    fn cert_round_trip() {
        let v = crate::clock::clock(&[("A", 1)]);
        let c = cfg(3, 1);
        let sigs = (0..2u32)
            .map(|i| {
                (
                    i,
                    KeyPair::from_seed(&i.to_be_bytes())
                        .sign(&sign_payload(FrontendKind::Update, &v)),
                )
            })
            .collect();
        let cert = QuorumCert {
            kind: FrontendKind::Update,
            value_hash: value_hash(&v),
            sigs,
        };
        assert!(c.check_cert(&cert, &v));
        assert_eq!(QuorumCert::from_bytes(&cert.to_bytes()).unwrap(), cert);
        assert!(!c.check_cert(&cert, &crate::clock::clock(&[("A", 2)])));
    }
}
