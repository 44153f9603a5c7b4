//! Process-side entry point: turn `Update(id, base, merged)` into a fully
//! proven [`Vlc`].

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::clock::EntityId;
use crate::deploy::Deployment;
use crate::frontend::{FrontendKind, InputSlot, ProveRequest};
use crate::keys::{KeyPair, PublicKey};
use crate::validator::ProveError;
use crate::vlc::Vlc;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("input clock {0} does not verify")]
    InvalidInput(InputSlot),
    #[error("{kind} proof failed: {source}")]
    Prove {
        kind: FrontendKind,
        source: ProveError,
    },
}

/// Signs requests with the invoker key and collects one proof per enabled
/// frontend kind.
#[derive(Clone)]
pub struct ClockClient {
    key: KeyPair,
    deployment: Arc<Deployment>,
}

impl ClockClient {
    pub fn new(key: KeyPair, deployment: Arc<Deployment>) -> Self {
        Self { key, deployment }
    }

    pub fn public(&self) -> PublicKey {
        self.key.public()
    }

    pub fn key(&self) -> &KeyPair {
        &self.key
    }

    pub fn deployment(&self) -> &Arc<Deployment> {
        &self.deployment
    }

    pub fn verify(&self, vlc: &Vlc) -> bool {
        self.deployment.verifier().verify(vlc)
    }

    /// `Update(id, base, merged)`. Inputs are checked locally first so an
    /// invalid clock never reaches the validators.
    pub fn update(
        &self,
        id: &EntityId,
        base: &Vlc,
        merged: &[Vlc],
        aux: &[u8],
    ) -> Result<Vlc, ClientError> {
        if !self.verify(base) {
            return Err(ClientError::InvalidInput(InputSlot::Base));
        }
        for (i, m) in merged.iter().enumerate() {
            if !self.verify(m) {
                return Err(ClientError::InvalidInput(InputSlot::Merged(i)));
            }
        }
        self.update_unchecked(id, base, merged, aux)
    }

    /// Skips the local input check; validators still run it. Used to model
    /// a misbehaving invoker.
    pub fn update_unchecked(
        &self,
        id: &EntityId,
        base: &Vlc,
        merged: &[Vlc],
        aux: &[u8],
    ) -> Result<Vlc, ClientError> {
        let mut proofs = BTreeMap::new();
        let mut value = None;
        for &kind in self.deployment.kinds() {
            let req = ProveRequest::signed(
                kind,
                id.clone(),
                base.clone(),
                merged.to_vec(),
                aux.to_vec(),
                &self.key,
            );
            value.get_or_insert_with(|| req.output_value());
            let proof = self
                .deployment
                .prove(&req)
                .map_err(|source| ClientError::Prove { kind, source })?;
            proofs.insert(kind, proof);
        }
        let value = value.unwrap_or_else(|| {
            let others: Vec<_> = merged.iter().map(Vlc::value).collect();
            base.value().update(id, &others)
        });
        Ok(Vlc::new(value, proofs))
    }
}

impl std::fmt::Debug for ClockClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClockClient")
            .field("key", &self.key.public())
            .finish()
    }
}
