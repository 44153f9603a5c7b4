//! Shared wiring for simulated deployments.

use std::sync::Arc;

use vlc_core::{
    BackendKind, ClockClient, Deployment, DeploymentBuilder, EntityId, FrontendKind, KeyPair,
    PermissionTable,
};
use vlc_sim::ProcId;

/// Process `pid` acts for entity `P{pid+1}`.
pub fn entity(pid: ProcId) -> EntityId {
    EntityId::named(&format!("P{}", pid + 1))
}

pub fn proc_key(label: &str, pid: ProcId) -> KeyPair {
    KeyPair::from_seed(format!("{label}/proc/{pid}").as_bytes())
}

/// Default validator set size per backend: `(N, f)`.
pub fn default_validators(backend: BackendKind) -> (usize, usize) {
    match backend {
        BackendKind::Quorum => (4, 1),
        BackendKind::Attested => (3, 0),
    }
}

/// A deployment where process `i` may update entity `P{i+1}` only, plus
/// one clock client per process.
pub fn process_deployment(
    backend: BackendKind,
    kinds: &[FrontendKind],
    n_procs: usize,
    label: &str,
) -> (Arc<Deployment>, Vec<ClockClient>) {
    let (n, f) = default_validators(backend);
    let keys: Vec<KeyPair> = (0..n_procs as ProcId).map(|p| proc_key(label, p)).collect();
    let mut perms = PermissionTable::new();
    for (p, k) in keys.iter().enumerate() {
        perms.grant(entity(p as ProcId), k.public());
    }
    let d = Arc::new(
        DeploymentBuilder::new(backend)
            .kinds(kinds)
            .validators(n, f)
            .permissions(perms)
            .label(label)
            .build()
            .expect("default validator sets are valid"),
    );
    let clients = keys
        .into_iter()
        .map(|k| ClockClient::new(k, d.clone()))
        .collect();
    (d, clients)
}
