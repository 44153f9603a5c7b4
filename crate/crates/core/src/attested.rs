//! Attested backend. An in-process attestation platform holds a root key
//! and signs documents binding an enclave's code measurement to an output
//! clock; verifiers trust the root key and pin the expected measurement.
//!
//! The platform stands in for hardware: nothing stops host code from
//! reaching the root key, so the isolation assumption is a documented
//! trust boundary rather than an enforced one.

use std::fmt;
use std::sync::{Arc, Mutex};

use crate::clock::ClockValue;
use crate::codec::{put_u16, put_u32, put_u8, DecodeError, Reader};
use crate::frontend::{FrontendHost, FrontendKind, ProveRequest};
use crate::keys::{tagged_hash, Digest, KeyPair, PublicKey, SIGNATURE_LEN};
use crate::quorum::{value_hash, NodeId};
use crate::validator::{NodeReply, ProveError, RejectInfo, ValidatorEndpoint};

/// Code identity of an enclave: a version string plus its frontend config.
pub fn measurement(version: &str, kinds: &[FrontendKind], app: Option<&str>) -> Digest {
    let mut cfg = Vec::new();
    put_u32(&mut cfg, version.len() as u32);
    cfg.extend_from_slice(version.as_bytes());
    let mut kinds = kinds.to_vec();
    kinds.sort();
    kinds.dedup();
    put_u8(&mut cfg, kinds.len() as u8);
    for k in kinds {
        put_u8(&mut cfg, k as u8);
    }
    let app = app.unwrap_or("");
    put_u32(&mut cfg, app.len() as u32);
    cfg.extend_from_slice(app.as_bytes());
    tagged_hash(b"CHRONO/MEASURE/v1", &[&cfg])
}

fn doc_payload(
    kind: FrontendKind,
    enclave_id: NodeId,
    measurement: &Digest,
    user_data: &Digest,
) -> Digest {
    tagged_hash(
        b"CHRONO/ATTEST/v1",
        &[
            &[kind as u8],
            &enclave_id.to_be_bytes(),
            measurement,
            user_data,
        ],
    )
}

/// A root-signed statement: enclave `enclave_id` running `measurement`
/// produced `user_data` for a `kind` request.
#[derive(Clone, PartialEq, Eq)]
pub struct AttestationDoc {
    pub kind: FrontendKind,
    pub enclave_id: NodeId,
    pub measurement: Digest,
    pub user_data: Digest,
    pub sig: [u8; SIGNATURE_LEN],
}

impl AttestationDoc {
    pub fn verify(&self, root: &PublicKey) -> bool {
        root.verify(
            &doc_payload(
                self.kind,
                self.enclave_id,
                &self.measurement,
                &self.user_data,
            ),
            &self.sig,
        )
    }
}

impl fmt::Debug for AttestationDoc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AttestationDoc")
            .field("kind", &self.kind)
            .field("enclave", &self.enclave_id)
            .field("measurement", &hex::encode(&self.measurement[..6]))
            .finish_non_exhaustive()
    }
}

/// Stand-in for the attestation hardware.
pub struct AttestationPlatform {
    root: KeyPair,
}

impl AttestationPlatform {
    pub fn new(root: KeyPair) -> Self {
        Self { root }
    }

    pub fn root_public(&self) -> PublicKey {
        self.root.public()
    }

    pub fn attest(
        &self,
        kind: FrontendKind,
        enclave_id: NodeId,
        measurement: Digest,
        user_data: Digest,
    ) -> AttestationDoc {
        AttestationDoc {
            kind,
            enclave_id,
            measurement,
            user_data,
            sig: self
                .root
                .sign(&doc_payload(kind, enclave_id, &measurement, &user_data)),
        }
    }
}

impl fmt::Debug for AttestationPlatform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AttestationPlatform")
            .field("root", &self.root.public())
            .finish()
    }
}

/// One or more documents over the same output clock, from distinct enclaves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestedCert {
    pub kind: FrontendKind,
    /// Sorted by strictly ascending `enclave_id`; every doc has `kind`.
    pub docs: Vec<AttestationDoc>,
}

impl AttestedCert {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(3 + self.docs.len() * 132);
        put_u8(&mut out, self.kind as u8);
        put_u16(&mut out, self.docs.len() as u16);
        for d in &self.docs {
            put_u32(&mut out, d.enclave_id);
            out.extend_from_slice(&d.measurement);
            out.extend_from_slice(&d.user_data);
            out.extend_from_slice(&d.sig);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let kind = FrontendKind::from_byte(r.u8()?)?;
        let count = r.u16()?;
        let mut docs: Vec<AttestationDoc> = Vec::with_capacity(count.min(64) as usize);
        for _ in 0..count {
            let enclave_id = r.u32()?;
            if docs.last().is_some_and(|d| d.enclave_id >= enclave_id) {
                return Err(DecodeError::invalid(
                    "attested cert",
                    "enclave ids not strictly ascending",
                ));
            }
            docs.push(AttestationDoc {
                kind,
                enclave_id,
                measurement: r.array()?,
                user_data: r.array()?,
                sig: r.array()?,
            });
        }
        r.finish()?;
        Ok(Self { kind, docs })
    }
}

/// What a verifier pins: the platform root key, the expected measurement
/// and the enclave count that sets the MONO majority.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestedTrust {
    pub root: PublicKey,
    pub measurement: Digest,
    pub n: usize,
}

impl AttestedTrust {
    /// One document for stateless kinds; `⌈(N + 1) / 2⌉` for MONO.
    pub fn threshold(&self, kind: FrontendKind) -> usize {
        if kind.is_stateful() {
            (self.n + 1).div_ceil(2)
        } else {
            1
        }
    }

    pub fn check_doc(
        &self,
        doc: &AttestationDoc,
        kind: FrontendKind,
        value_digest: &Digest,
    ) -> bool {
        doc.kind == kind
            && (doc.enclave_id as usize) < self.n
            && doc.measurement == self.measurement
            && &doc.user_data == value_digest
            && doc.verify(&self.root)
    }

    pub fn check_cert(&self, cert: &AttestedCert, value: &ClockValue) -> bool {
        if cert.docs.len() < self.threshold(cert.kind) {
            return false;
        }
        let digest = value_hash(value);
        let ascending = cert
            .docs
            .windows(2)
            .all(|w| w[0].enclave_id < w[1].enclave_id);
        ascending
            && cert
                .docs
                .iter()
                .all(|d| self.check_doc(d, cert.kind, &digest))
    }
}

/// An enclave: frontend logic plus access to the attestation platform
/// under a fixed measurement.
pub struct Enclave {
    id: NodeId,
    measurement: Digest,
    platform: Arc<AttestationPlatform>,
    host: FrontendHost,
    offline: Mutex<bool>,
}

impl Enclave {
    pub fn new(
        id: NodeId,
        measurement: Digest,
        platform: Arc<AttestationPlatform>,
        host: FrontendHost,
    ) -> Self {
        Self {
            id,
            measurement,
            platform,
            host,
            offline: Mutex::new(false),
        }
    }

    pub fn measurement(&self) -> Digest {
        self.measurement
    }

    pub fn host(&self) -> &FrontendHost {
        &self.host
    }

    /// An offline enclave never replies (crash, not Byzantine).
    pub fn set_offline(&self, offline: bool) {
        *self.offline.lock().expect("enclave flag poisoned") = offline;
    }
}

impl ValidatorEndpoint for Enclave {
    fn node_id(&self) -> NodeId {
        self.id
    }

    fn prove(&self, req: &ProveRequest) -> Option<NodeReply> {
        if *self.offline.lock().expect("enclave flag poisoned") {
            return None;
        }
        Some(match self.host.run(req, true) {
            Ok(v) => NodeReply::Attest(self.platform.attest(
                req.kind,
                self.id,
                self.measurement,
                value_hash(&v),
            )),
            Err(r) => NodeReply::Reject(RejectInfo::from(&r)),
        })
    }
}

impl fmt::Debug for Enclave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Enclave")
            .field("id", &self.id)
            .finish_non_exhaustive()
    }
}

/// Collects `threshold(kind)` matching documents from distinct enclaves.
pub fn attested_client_prove(
    trust: &AttestedTrust,
    endpoints: &[Arc<dyn ValidatorEndpoint>],
    req: &ProveRequest,
    start: usize,
) -> Result<AttestedCert, ProveError> {
    let t = trust.threshold(req.kind);
    let digest = value_hash(&req.output_value());
    let mut docs: Vec<AttestationDoc> = Vec::new();
    let mut rejects = Vec::new();
    let n = endpoints.len();
    for step in 0..n {
        if docs.len() >= t || docs.len() + (n - step) < t {
            break;
        }
        let ep = &endpoints[(start + step) % n];
        match ep.prove(req) {
            Some(NodeReply::Attest(doc)) => {
                let fresh = docs.iter().all(|d| d.enclave_id != doc.enclave_id);
                if fresh
                    && doc.enclave_id == ep.node_id()
                    && trust.check_doc(&doc, req.kind, &digest)
                {
                    docs.push(doc);
                } else {
                    log::debug!("enclave {} returned an unusable document", ep.node_id());
                }
            }
            Some(NodeReply::Reject(info)) => rejects.push(info),
            Some(NodeReply::Sig { .. }) | None => {}
        }
    }
    if docs.len() >= t {
        docs.sort_by_key(|d| d.enclave_id);
        docs.truncate(t);
        return Ok(AttestedCert {
            kind: req.kind,
            docs,
        });
    }
    // Enclaves are trusted, so a single rejection is authoritative.
    Err(ProveError::classify(rejects, 1, req.kind, docs.len(), t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::clock;

    fn setup() -> (AttestationPlatform, AttestedTrust) {
        let platform = AttestationPlatform::new(KeyPair::from_seed(b"root"));
        let m = measurement("v1", &[FrontendKind::Update], None);
        let trust = AttestedTrust {
            root: platform.root_public(),
            measurement: m,
            n: 3,
        };
        (platform, trust)
    }

    #[test]
    fn measurement_depends_on_config() {
        let a = measurement("v1", &[FrontendKind::Update, FrontendKind::Mono], None);
        let b = measurement("v1", &[FrontendKind::Mono, FrontendKind::Update], None);
        assert_eq!(a, b);
        assert_ne!(
            a,
            measurement("v2", &[FrontendKind::Update, FrontendKind::Mono], None)
        );
        assert_ne!(
            a,
            measurement(
                "v1",
                &[FrontendKind::Update, FrontendKind::Mono],
                Some("acl")
            )
        );
    }

    #[test]
    fn thresholds() {
        let (_, trust) = setup();
        assert_eq!(trust.threshold(FrontendKind::Update), 1);
        assert_eq!(trust.threshold(FrontendKind::Mono), 2);
    }

    #[test]
    fn cert_checks_and_round_trips() {
        let (platform, trust) = setup();
        let v = clock(&[("A", 1)]);
        let doc = platform.attest(FrontendKind::Update, 0, trust.measurement, value_hash(&v));
        let cert = AttestedCert {
            kind: FrontendKind::Update,
            docs: vec![doc],
        };
        assert!(trust.check_cert(&cert, &v));
        assert_eq!(AttestedCert::from_bytes(&cert.to_bytes()).unwrap(), cert);
        assert!(!trust.check_cert(&cert, &clock(&[("A", 2)])));
    }

    #[test]
    fn measurement_mismatch_fails() {
        let (platform, trust) = setup();
        let v = clock(&[("A", 1)]);
        let other = measurement("evil", &[FrontendKind::Update], None);
        let cert = AttestedCert {
            kind: FrontendKind::Update,
            docs: vec![platform.attest(FrontendKind::Update, 0, other, value_hash(&v))],
        };
        assert!(!trust.check_cert(&cert, &v));
    }

    #[test]
    fn forged_signature_fails() {
        let (_, trust) = setup();
        let v = clock(&[("A", 1)]);
        let fake = AttestationPlatform::new(KeyPair::from_seed(b"not-root"));
        let cert = AttestedCert {
            kind: FrontendKind::Update,
            docs: vec![fake.attest(FrontendKind::Update, 0, trust.measurement, value_hash(&v))],
        };
        assert!(!trust.check_cert(&cert, &v));
    }

    #[test]
    fn mono_needs_majority_of_distinct_enclaves() {
        let (platform, mut trust) = setup();
        trust.measurement = measurement("v1", &[FrontendKind::Mono], None);
        let v = clock(&[("A", 1)]);
        let doc = |id| platform.attest(FrontendKind::Mono, id, trust.measurement, value_hash(&v));
        let one = AttestedCert {
            kind: FrontendKind::Mono,
            docs: vec![doc(1)],
        };
        assert!(!trust.check_cert(&one, &v));
        let two = AttestedCert {
            kind: FrontendKind::Mono,
            docs: vec![doc(0), doc(2)],
        };
        assert!(trust.check_cert(&two, &v));
        let dup = AttestedCert {
            kind: FrontendKind::Mono,
            docs: vec![doc(1), doc(1)],
        };
        assert!(!trust.check_cert(&dup, &v));
    }
}
