//! Transport-neutral view of a single validator (quorum node or enclave).

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::attested::AttestationDoc;
use crate::frontend::{FrontendKind, ProveRequest, Reject, RejectCode};
use crate::keys::SIGNATURE_LEN;
use crate::quorum::NodeId;

/// A frontend rejection as seen by a remote client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectInfo {
    pub code: RejectCode,
    pub detail: String,
}

impl From<&Reject> for RejectInfo {
    fn from(r: &Reject) -> Self {
        Self {
            code: r.code(),
            detail: r.to_string(),
        }
    }
}

impl fmt::Display for RejectInfo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.code, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeReply {
    /// Partial signature from a quorum node.
    Sig {
        node_id: NodeId,
        sig: [u8; SIGNATURE_LEN],
    },
    /// Attestation document from an enclave.
    Attest(AttestationDoc),
    Reject(RejectInfo),
}

/// Anything that can answer a prove request: an in-process node, an
/// enclave, or a remote peer behind a socket. `None` models a timeout.
pub trait ValidatorEndpoint: Send + Sync {
    fn node_id(&self) -> NodeId;
    fn prove(&self, req: &ProveRequest) -> Option<NodeReply>;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProveError {
    #[error("validators rejected the request ({0})")]
    Rejected(RejectInfo),
    #[error("{kind}: collected {got} of {needed} matching proofs")]
    InsufficientQuorum {
        kind: FrontendKind,
        got: usize,
        needed: usize,
    },
}

impl ProveError {
    /// A rejection is reported only if at least `min_agree` validators
    /// returned the same code; otherwise the failure is a missing quorum.
    pub fn classify(
        rejects: Vec<RejectInfo>,
        min_agree: usize,
        kind: FrontendKind,
        got: usize,
        needed: usize,
    ) -> Self {
        let mut by_code: BTreeMap<RejectCode, (usize, RejectInfo)> = BTreeMap::new();
        for r in rejects {
            by_code.entry(r.code).or_insert((0, r)).0 += 1;
        }
        let best = by_code.into_values().max_by_key(|(count, _)| *count);
        match best {
            Some((count, info)) if count >= min_agree => ProveError::Rejected(info),
            _ => ProveError::InsufficientQuorum { kind, got, needed },
        }
    }

    pub fn reject_code(&self) -> Option<RejectCode> {
        match self {
            ProveError::Rejected(info) => Some(info.code),
            ProveError::InsufficientQuorum { .. } => None,
        }
    }
}
