//! The verifiable logical clock: a clock value plus one typed proof per
//! enabled frontend kind, and the [`Verifier`] that checks them.

use std::collections::{BTreeMap, HashSet};
use std::sync::Mutex;

use crate::attested::{AttestedCert, AttestedTrust};
use crate::clock::{ClockOrdering, ClockValue};
use crate::codec::{put_bytes, put_u8, DecodeError, Reader};
use crate::frontend::FrontendKind;
use crate::keys::{tagged_hash, Digest};
use crate::quorum::{QuorumCert, QuorumConfig};

const PROOF_TAG_QC: u8 = 1;
const PROOF_TAG_ATTEST: u8 = 2;

/// A proof produced by one of the validator backends.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Proof {
    Quorum(QuorumCert),
    Attested(AttestedCert),
}

impl Proof {
    pub fn kind(&self) -> FrontendKind {
        match self {
            Proof::Quorum(c) => c.kind,
            Proof::Attested(c) => c.kind,
        }
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            Proof::Quorum(c) => {
                put_u8(out, PROOF_TAG_QC);
                put_bytes(out, &c.to_bytes());
            }
            Proof::Attested(c) => {
                put_u8(out, PROOF_TAG_ATTEST);
                put_bytes(out, &c.to_bytes());
            }
        }
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let tag = r.u8()?;
        let body = r.bytes()?;
        match tag {
            PROOF_TAG_QC => Ok(Proof::Quorum(QuorumCert::from_bytes(body)?)),
            PROOF_TAG_ATTEST => Ok(Proof::Attested(AttestedCert::from_bytes(body)?)),
            t => Err(DecodeError::invalid("proof tag", t.to_string())),
        }
    }
}

/// `⟨value, proofs⟩`. The genesis clock carries no proofs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vlc {
    value: ClockValue,
    proofs: BTreeMap<FrontendKind, Proof>,
}

impl Vlc {
    pub fn genesis() -> Self {
        Self::default()
    }

    pub fn new(value: ClockValue, proofs: BTreeMap<FrontendKind, Proof>) -> Self {
        Self { value, proofs }
    }

    /// A clock whose proofs are missing. Only useful to model forgeries.
    pub fn unproven(value: ClockValue) -> Self {
        Self {
            value,
            proofs: BTreeMap::new(),
        }
    }

    pub fn value(&self) -> &ClockValue {
        &self.value
    }

    pub fn proof(&self, kind: FrontendKind) -> Option<&Proof> {
        self.proofs.get(&kind)
    }

    pub fn proofs(&self) -> impl Iterator<Item = (FrontendKind, &Proof)> {
        self.proofs.iter().map(|(k, p)| (*k, p))
    }

    pub fn compare(&self, other: &Vlc) -> ClockOrdering {
        self.value.compare(&other.value)
    }

    /// Replaces the value while keeping the proofs. Used by adversary
    /// scripts; the result will not verify unless the value is unchanged.
    pub fn with_value(&self, value: ClockValue) -> Vlc {
        Vlc {
            value,
            proofs: self.proofs.clone(),
        }
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        self.value.encode_into(out);
        put_u8(out, self.proofs.len() as u8);
        for (kind, proof) in &self.proofs {
            put_u8(out, *kind as u8);
            proof.encode_into(out);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let value = ClockValue::decode_from(r)?;
        let n = r.u8()?;
        let mut proofs = BTreeMap::new();
        let mut prev: Option<FrontendKind> = None;
        for _ in 0..n {
            let kind = FrontendKind::from_byte(r.u8()?)?;
            if prev.is_some_and(|p| p >= kind) {
                return Err(DecodeError::invalid(
                    "vlc",
                    "proof kinds not strictly ascending",
                ));
            }
            prev = Some(kind);
            proofs.insert(kind, Proof::decode_from(r)?);
        }
        Ok(Self { value, proofs })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let v = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(v)
    }
}

const CACHE_LIMIT: usize = 200_000;

/// Checks clocks against a deployment's enabled frontend kinds and the
/// trust roots of its backends.
///
/// Successful checks are memoized by content digest; checking is a pure
/// function of the proof bytes so the memo cannot change a verdict.
#[derive(Debug)]
pub struct Verifier {
    kinds: Vec<FrontendKind>,
    quorum: Option<QuorumConfig>,
    attested: Option<AttestedTrust>,
    valid: Mutex<HashSet<Digest>>,
}

impl Verifier {
    pub fn new(
        kinds: Vec<FrontendKind>,
        quorum: Option<QuorumConfig>,
        attested: Option<AttestedTrust>,
    ) -> Self {
        let mut kinds = kinds;
        kinds.sort();
        kinds.dedup();
        Self {
            kinds,
            quorum,
            attested,
            valid: Mutex::new(HashSet::new()),
        }
    }

    pub fn kinds(&self) -> &[FrontendKind] {
        &self.kinds
    }

    pub fn quorum(&self) -> Option<&QuorumConfig> {
        self.quorum.as_ref()
    }

    pub fn attested(&self) -> Option<&AttestedTrust> {
        self.attested.as_ref()
    }

    /// `Verify(c)`: true iff `c` is genesis, or carries exactly one valid
    /// proof for each enabled kind and nothing else.
    pub fn verify(&self, vlc: &Vlc) -> bool {
        if vlc.value.is_empty() {
            return vlc.proofs.is_empty();
        }
        if vlc.proofs.len() != self.kinds.len() {
            return false;
        }
        self.kinds.iter().all(|kind| match vlc.proofs.get(kind) {
            Some(p) => self.check_proof(*kind, p, &vlc.value),
            None => false,
        })
    }

    /// `check(π)` for a single typed proof over `value`.
    pub fn check_proof(&self, kind: FrontendKind, proof: &Proof, value: &ClockValue) -> bool {
        if proof.kind() != kind {
            return false;
        }
        let mut proof_bytes = Vec::new();
        proof.encode_into(&mut proof_bytes);
        let key = tagged_hash(
            b"CHRONO/CHECKED/v1",
            &[&[kind as u8], &proof_bytes, &value.to_bytes()],
        );
        if self
            .valid
            .lock()
            .expect("verifier cache poisoned")
            .contains(&key)
        {
            return true;
        }
        let ok = match proof {
            Proof::Quorum(cert) => self
                .quorum
                .as_ref()
                .is_some_and(|cfg| cfg.check_cert(cert, value)),
            Proof::Attested(cert) => self
                .attested
                .as_ref()
                .is_some_and(|t| t.check_cert(cert, value)),
        };
        if ok {
            let mut cache = self.valid.lock().expect("verifier cache poisoned");
            if cache.len() >= CACHE_LIMIT {
                cache.clear();
            }
            cache.insert(key);
        }
        ok
    }
}
