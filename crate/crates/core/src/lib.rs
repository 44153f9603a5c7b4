//! Verifiable logical clocks.
//!
//! A [`Vlc`] pairs a vector-clock value with typed proofs that the value
//! came from legitimate `Update` calls. Frontends decide whether an update
//! is legitimate; backends (quorum signatures or attested enclaves) turn
//! that decision into a proof anyone can check offline.

pub mod attested;
pub mod client;
pub mod clock;
pub mod codec;
pub mod deploy;
pub mod frontend;
pub mod keys;
pub mod quorum;
pub mod validator;
pub mod vlc;
pub mod wire;

pub use client::{ClientError, ClockClient};
pub use clock::{clock, ClockOrdering, ClockValue, EntityId};
pub use deploy::{BackendKind, Deployment, DeploymentBuilder};
pub use frontend::{FrontendKind, PermissionTable, ProveRequest, Reject, RejectCode};
pub use keys::{KeyPair, PublicKey};
pub use quorum::{FaultMode, QuorumCert, QuorumConfig};
pub use validator::ProveError;
pub use vlc::{Proof, Verifier, Vlc};
