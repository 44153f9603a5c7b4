//! Wiring a validator set: keys, frontend hosts, the verifier and the
//! backend-specific collection logic behind one `prove` call.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attested::{
    attested_client_prove, measurement, AttestationPlatform, AttestedTrust, Enclave,
};
use crate::frontend::{AppPredicate, FrontendHost, FrontendKind, PermissionTable, ProveRequest};
use crate::keys::KeyPair;
use crate::quorum::{client_prove, ConfigError, FaultMode, NodeId, QuorumConfig, QuorumNode};
use crate::validator::{ProveError, ValidatorEndpoint};
use crate::vlc::{Proof, Verifier};

pub const MEASUREMENT_VERSION: &str = "chrono-frontends/0.1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Quorum,
    Attested,
}

impl BackendKind {
    pub const ALL: [BackendKind; 2] = [BackendKind::Quorum, BackendKind::Attested];

    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Quorum => "quorum",
            BackendKind::Attested => "attested",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "quorum" => Ok(BackendKind::Quorum),
            "attested" => Ok(BackendKind::Attested),
            other => Err(format!(
                "unknown backend {other:?} (expected quorum or attested)"
            )),
        }
    }
}

/// Builder for a [`Deployment`]. Validator keys derive from `label`, so
/// equal builders produce identical deployments.
#[derive(Clone)]
pub struct DeploymentBuilder {
    backend: BackendKind,
    kinds: Vec<FrontendKind>,
    n: usize,
    f: usize,
    perms: PermissionTable,
    app: Option<(String, AppPredicate)>,
    label: String,
}

impl DeploymentBuilder {
    pub fn new(backend: BackendKind) -> Self {
        Self {
            backend,
            kinds: vec![FrontendKind::Update],
            n: 4,
            f: 1,
            perms: PermissionTable::new(),
            app: None,
            label: "chrono".into(),
        }
    }

    pub fn kinds(mut self, kinds: &[FrontendKind]) -> Self {
        self.kinds = kinds.to_vec();
        self
    }

    /// Validator count and, for the quorum backend, the fault bound.
    pub fn validators(mut self, n: usize, f: usize) -> Self {
        self.n = n;
        self.f = f;
        self
    }

    pub fn permissions(mut self, perms: PermissionTable) -> Self {
        self.perms = perms;
        self
    }

    pub fn app(mut self, name: &str, predicate: AppPredicate) -> Self {
        self.app = Some((name.to_owned(), predicate));
        self
    }

    pub fn label(mut self, label: &str) -> Self {
        self.label = label.to_owned();
        self
    }

    pub fn node_key(&self, i: NodeId) -> KeyPair {
        KeyPair::from_seed(format!("{}/node/{i}", self.label).as_bytes())
    }

    pub fn build(self) -> Result<Deployment, ConfigError> {
        if self.n == 0 {
            return Err(ConfigError::Empty);
        }
        let perms = Arc::new(self.perms.clone());
        let app_pred = self.app.as_ref().map(|(_, p)| p.clone());
        match self.backend {
            BackendKind::Quorum => {
                let keys: Vec<KeyPair> = (0..self.n as NodeId).map(|i| self.node_key(i)).collect();
                let registry: BTreeMap<NodeId, _> = keys
                    .iter()
                    .enumerate()
                    .map(|(i, k)| (i as NodeId, k.public()))
                    .collect();
                let cfg = QuorumConfig::new(self.f, registry)?;
                cfg.validate(&self.kinds)?;
                let verifier = Arc::new(Verifier::new(self.kinds.clone(), Some(cfg.clone()), None));
                let nodes: Vec<Arc<QuorumNode>> = keys
                    .into_iter()
                    .enumerate()
                    .map(|(i, k)| {
                        let host =
                            FrontendHost::new(perms.clone(), app_pred.clone(), verifier.clone());
                        Arc::new(QuorumNode::new(i as NodeId, k, host))
                    })
                    .collect();
                let endpoints = nodes
                    .iter()
                    .map(|n| n.clone() as Arc<dyn ValidatorEndpoint>)
                    .collect();
                Ok(Deployment {
                    backend: self.backend,
                    verifier,
                    endpoints,
                    nodes,
                    enclaves: Vec::new(),
                    platform: None,
                })
            }
            BackendKind::Attested => {
                let platform = Arc::new(AttestationPlatform::new(KeyPair::from_seed(
                    format!("{}/attest-root", self.label).as_bytes(),
                )));
                let m = measurement(
                    MEASUREMENT_VERSION,
                    &self.kinds,
                    self.app.as_ref().map(|(n, _)| n.as_str()),
                );
                let trust = AttestedTrust {
                    root: platform.root_public(),
                    measurement: m,
                    n: self.n,
                };
                let verifier = Arc::new(Verifier::new(self.kinds.clone(), None, Some(trust)));
                let enclaves: Vec<Arc<Enclave>> = (0..self.n as NodeId)
                    .map(|i| {
                        let host =
                            FrontendHost::new(perms.clone(), app_pred.clone(), verifier.clone());
                        Arc::new(Enclave::new(i, m, platform.clone(), host))
                    })
                    .collect();
                let endpoints = enclaves
                    .iter()
                    .map(|e| e.clone() as Arc<dyn ValidatorEndpoint>)
                    .collect();
                Ok(Deployment {
                    backend: self.backend,
                    verifier,
                    endpoints,
                    nodes: Vec::new(),
                    enclaves,
                    platform: Some(platform),
                })
            }
        }
    }
}

/// A running validator set plus the verifier every participant uses.
pub struct Deployment {
    backend: BackendKind,
    verifier: Arc<Verifier>,
    endpoints: Vec<Arc<dyn ValidatorEndpoint>>,
    nodes: Vec<Arc<QuorumNode>>,
    enclaves: Vec<Arc<Enclave>>,
    platform: Option<Arc<AttestationPlatform>>,
}

impl Deployment {
    pub fn backend(&self) -> BackendKind {
        self.backend
    }

    pub fn verifier(&self) -> &Arc<Verifier> {
        &self.verifier
    }

    pub fn kinds(&self) -> &[FrontendKind] {
        self.verifier.kinds()
    }

    pub fn nodes(&self) -> &[Arc<QuorumNode>] {
        &self.nodes
    }

    pub fn enclaves(&self) -> &[Arc<Enclave>] {
        &self.enclaves
    }

    pub fn platform(&self) -> Option<&Arc<AttestationPlatform>> {
        self.platform.as_ref()
    }

    /// Replaces how validators are reached, e.g. with socket endpoints.
    pub fn set_endpoints(&mut self, endpoints: Vec<Arc<dyn ValidatorEndpoint>>) {
        self.endpoints = endpoints;
    }

    /// Applies a fault to validator `i`. Enclaves only support `Silent`
    /// (offline) and `Honest`; other modes are not expressible for a TEE.
    pub fn set_fault(&self, i: usize, mode: FaultMode) -> bool {
        match self.backend {
            BackendKind::Quorum => {
                self.nodes[i].set_mode(mode);
                true
            }
            BackendKind::Attested => match mode {
                FaultMode::Honest | FaultMode::Silent => {
                    self.enclaves[i].set_offline(mode == FaultMode::Silent);
                    true
                }
                _ => false,
            },
        }
    }

    /// Runs one request through the backend and returns the typed proof.
    pub fn prove(&self, req: &ProveRequest) -> Result<Proof, ProveError> {
        match self.backend {
            BackendKind::Quorum => {
                let cfg = self
                    .verifier
                    .quorum()
                    .expect("quorum deployment has a config");
                client_prove(cfg, &self.endpoints, req, 0).map(Proof::Quorum)
            }
            BackendKind::Attested => {
                let trust = self
                    .verifier
                    .attested()
                    .expect("attested deployment has trust roots");
                attested_client_prove(trust, &self.endpoints, req, 0).map(Proof::Attested)
            }
        }
    }
}

impl fmt::Debug for Deployment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Deployment")
            .field("backend", &self.backend)
            .field("kinds", &self.kinds())
            .field("validators", &self.endpoints.len())
            .finish()
    }
}
