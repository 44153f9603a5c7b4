//! Ed25519 key handling and the hashing helpers used for signing payloads.

use std::fmt;

use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

use crate::codec::DecodeError;

pub type Digest = [u8; 32];

pub const SIGNATURE_LEN: usize = 64;

/// SHA-256 over a domain tag followed by each part in order.
pub fn tagged_hash(tag: &[u8], parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    h.update(tag);
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

pub fn sha256(bytes: &[u8]) -> Digest {
    Sha256::digest(bytes).into()
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey([u8; 32]);

impl PublicKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Result<Self, DecodeError> {
        VerifyingKey::from_bytes(&bytes)
            .map_err(|e| DecodeError::invalid("public key", e.to_string()))?;
        Ok(Self(bytes))
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, DecodeError> {
        let raw =
            hex::decode(s).map_err(|e| DecodeError::invalid("public key hex", e.to_string()))?;
        let arr: [u8; 32] = raw
            .try_into()
            .map_err(|_| DecodeError::invalid("public key", "expected 32 bytes"))?;
        Self::from_bytes(arr)
    }

    fn verifying_key(&self) -> Option<VerifyingKey> {
        VerifyingKey::from_bytes(&self.0).ok()
    }

    pub fn verify(&self, msg: &[u8], sig: &[u8; SIGNATURE_LEN]) -> bool {
        let Some(vk) = self.verifying_key() else {
            return false;
        };
        vk.verify_strict(msg, &Signature::from_bytes(sig)).is_ok()
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({}..)", &self.to_hex()[..12])
    }
}

impl Serialize for PublicKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for PublicKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
}

impl KeyPair {
    pub fn from_secret(secret: [u8; 32]) -> Self {
        Self {
            signing: SigningKey::from_bytes(&secret),
        }
    }

    /// Deterministic key derived from an arbitrary label. Used for
    /// simulation deployments and reproducible test fixtures.
    pub fn from_seed(label: &[u8]) -> Self {
        Self::from_secret(tagged_hash(b"CHRONO/KEY/v1", &[label]))
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn public(&self) -> PublicKey {
        PublicKey(self.signing.verifying_key().to_bytes())
    }

    pub fn sign(&self, msg: &[u8]) -> [u8; SIGNATURE_LEN] {
        self.signing.sign(msg).to_bytes()
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &self.public())
            .finish_non_exhaustive()
    }
}

/// Verifies every `(key, message, signature)` triple in one batch.
/// Returns false if any single signature is invalid.
pub fn verify_all(items: &[(PublicKey, &[u8], [u8; SIGNATURE_LEN])]) -> bool {
    match items.len() {
        0 => true,
        1 => items[0].0.verify(items[0].1, &items[0].2),
        _ => {
            let mut keys = Vec::with_capacity(items.len());
            for (pk, _, _) in items {
                match pk.verifying_key() {
                    Some(vk) if !vk.is_weak() => keys.push(vk),
                    _ => return false,
                }
            }
            let msgs: Vec<&[u8]> = items.iter().map(|(_, m, _)| *m).collect();
            let sigs: Vec<Signature> = items
                .iter()
                .map(|(_, _, s)| Signature::from_bytes(s))
                .collect();
            ed25519_dalek::verify_batch(&msgs, &sigs, &keys).is_ok()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_keys_are_deterministic() {
        assert_eq!(
            KeyPair::from_seed(b"a").public(),
            KeyPair::from_seed(b"a").public()
        );
        assert_ne!(
            KeyPair::from_seed(b"a").public(),
            KeyPair::from_seed(b"b").public()
        );
    }

    #[test]
    fn sign_and_verify() {
        let k = KeyPair::from_seed(b"k");
        let sig = k.sign(b"hello");
        assert!(k.public().verify(b"hello", &sig));
        assert!(!k.public().verify(b"hellp", &sig));
    }

    #[test]
    fn batch_rejects_one_bad_signature() {
        let keys: Vec<KeyPair> = (0..4u8).map(|i| KeyPair::from_seed(&[i])).collect();
        let msg = b"payload".as_slice();
        let mut items: Vec<_> = keys
            .iter()
            .map(|k| (k.public(), msg, k.sign(msg)))
            .collect();
        assert!(verify_all(&items));
        items[2].2[10] ^= 1;
        assert!(!verify_all(&items));
    }

    #[test]
    fn public_key_hex_round_trip() {
        let pk = KeyPair::from_seed(b"x").public();
        assert_eq!(PublicKey::from_hex(&pk.to_hex()).unwrap(), pk);
    }
}
