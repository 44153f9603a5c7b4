//! Run reports and the flat CSV rows they export.
//!
//! Every report embeds its seed and a hash of its configuration, so a row
//! can be traced back to the exact run that produced it. CSV columns are
//! fixed (`scenario, seed, backend, n, metric, value`) and rows are emitted
//! in a deterministic order.

use std::collections::BTreeMap;

use serde::Serialize;
use vlc_core::keys::sha256;
use vlc_core::BackendKind;
use vlc_sim::Tick;

use crate::attacks::ScenarioOutcome;
use crate::mutex::{MutexConfig, MutexReport};
use crate::store::{StoreConfig, StoreReport};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub scenario: String,
    pub seed: u64,
    pub backend: String,
    pub n: usize,
    pub metric: String,
    pub value: f64,
}

pub fn to_csv(rows: &[Row]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

/// Nearest-rank quantiles over simulated ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Quantiles {
    pub p50: Tick,
    pub p99: Tick,
    pub p999: Tick,
}

impl Quantiles {
    /// `None` for an empty sample.
    pub fn of(samples: &[Tick]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut s = samples.to_vec();
        s.sort_unstable();
        let at = |q: f64| s[((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        Some(Self {
            p50: at(0.5),
            p99: at(0.99),
            p999: at(0.999),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub backend: String,
    pub n: usize,
    /// Hex SHA-256 of the JSON-encoded configuration.
    pub config_hash: String,
    pub latency: Option<Quantiles>,
    /// Completed operations per 1000 simulated ticks.
    pub throughput: Option<f64>,
    pub metrics: BTreeMap<String, f64>,
    pub checkers: BTreeMap<String, bool>,
    /// Machine-readable description of every failed check.
    pub failures: Vec<String>,
}

pub fn config_hash(config: &impl Serialize) -> String {
    let json = serde_json::to_vec(config).expect("configs serialize");
    hex::encode(sha256(&json))
}

impl RunReport {
    pub fn new(
        scenario: &str,
        seed: u64,
        backend: BackendKind,
        n: usize,
        config: &impl Serialize,
    ) -> Self {
        Self {
            scenario: scenario.to_string(),
            seed,
            backend: backend.name().to_string(),
            n,
            config_hash: config_hash(config),
            latency: None,
            throughput: None,
            metrics: BTreeMap::new(),
            checkers: BTreeMap::new(),
            failures: Vec::new(),
        }
    }

    /// Records a checker verdict; `failures` lists why it failed.
    pub fn check(&mut self, name: &str, failures: Vec<String>) {
        self.checkers.insert(name.to_string(), failures.is_empty());
        self.failures
            .extend(failures.into_iter().map(|f| format!("{name}: {f}")));
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn passed(&self) -> bool {
        self.checkers.values().all(|&ok| ok)
    }

    pub fn rows(&self) -> Vec<Row> {
        let row = |metric: String, value: f64| Row {
            scenario: self.scenario.clone(),
            seed: self.seed,
            backend: self.backend.clone(),
            n: self.n,
            metric,
            value,
        };
        let mut out = Vec::new();
        if let Some(q) = self.latency {
            out.push(row("latency_p50".into(), q.p50 as f64));
            out.push(row("latency_p99".into(), q.p99 as f64));
            out.push(row("latency_p999".into(), q.p999 as f64));
        }
        if let Some(t) = self.throughput {
            out.push(row("throughput".into(), t));
        }
        out.extend(self.metrics.iter().map(|(k, v)| row(k.clone(), *v)));
        out.extend(
            self.checkers
                .iter()
                .map(|(k, ok)| row(format!("check:{k}"), if *ok { 1.0 } else { 0.0 })),
        );
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

pub fn mutex_report(cfg: &MutexConfig, plan: &str, r: &MutexReport) -> RunReport {
    let mut rep = RunReport::new(&format!("mutex/{plan}"), cfg.seed, cfg.backend, cfg.n, cfg);
    let waits: Vec<Tick> = r
        .grants
        .iter()
        .map(|g| g.granted_at - g.requested_at)
        .collect();
    rep.latency = Quantiles::of(&waits);
    if r.end_time > 0 {
        rep.throughput = Some(r.grants.len() as f64 * 1000.0 / r.end_time as f64);
    }
    rep.metric("grants", r.grants.len() as f64);
    rep.metric("messages", r.total_messages() as f64);
    for (k, v) in &r.messages {
        rep.metric(&format!("messages_{}", k.name()), *v as f64);
    }
    rep.metric("retransmissions", r.retransmissions as f64);
    rep.metric("end_time", r.end_time as f64);
    let expected = cfg.contenders as u64 * cfg.rounds as u64;
    let mut exclusion = Vec::new();
    let mut proofs = Vec::new();
    for v in &r.violations {
        match v {
            crate::mutex::MutexViolation::BadProof { .. }
            | crate::mutex::MutexViolation::ConflictingProofs { .. } => proofs.push(v.to_string()),
            _ => exclusion.push(v.to_string()),
        }
    }
    rep.check("exclusion", exclusion);
    rep.check("proofs", proofs);
    let granted = r.grants.len() as u64;
    rep.check(
        "liveness",
        if granted == expected {
            vec![]
        } else {
            vec![format!("{granted} of {expected} requests granted")]
        },
    );
    rep
}

pub fn store_report(cfg: &StoreConfig, scenario: &str, r: &StoreReport) -> RunReport {
    let mut rep = RunReport::new(scenario, cfg.seed, cfg.backend, cfg.servers, cfg);
    rep.latency = Quantiles::of(&r.latencies);
    rep.throughput = Some(r.throughput());
    rep.metric("clients", cfg.clients as f64);
    rep.metric("write_ratio", cfg.write_ratio);
    rep.metric("completed", r.completed as f64);
    rep.metric("failed", r.failed as f64);
    rep.metric("messages", r.messages as f64);
    rep.metric("end_time", r.end_time as f64);
    rep.metric("accepted_forged", r.accepted_forged as f64);
    rep.check(
        "causal",
        r.violations.iter().map(|v| v.to_string()).collect(),
    );
    rep.check(
        "forgery",
        if r.accepted_forged == 0 {
            vec![]
        } else {
            vec![format!("{} forged replies accepted", r.accepted_forged)]
        },
    );
    if !cfg.byzantine {
        rep.check(
            "convergence",
            if r.converged {
                vec![]
            } else {
                vec!["replicas diverged".into()]
            },
        );
    }
    rep
}

pub fn attack_report(o: &ScenarioOutcome) -> RunReport {
    let mut rep = RunReport::new(
        &format!("attack/{}", o.attack.name()),
        o.config.seed,
        o.config.backend,
        3,
        &(
            o.attack.name(),
            o.config.backend,
            o.config.mono,
            o.config.check_proofs,
            o.config.seed,
        ),
    );
    rep.metric("delivered", o.victim_delivered.len() as f64);
    rep.metric("discarded", o.victim_discarded.len() as f64);
    let mut unsafe_: Vec<String> = o.violations.iter().map(|v| v.to_string()).collect();
    if !o.victim_safe() && unsafe_.is_empty() {
        unsafe_.push("m1 delivered after m3".into());
    }
    rep.check("victim_safe", unsafe_);
    if o.attack != crate::attacks::Attack::None {
        rep.check(
            "forged_clock_rejected",
            if o.forged_clock_rejected() {
                vec![]
            } else {
                vec![format!("verdict {}", o.verdict())]
            },
        );
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_quantiles() {
        let s: Vec<Tick> = (1..=1000).collect();
        let q = Quantiles::of(&s).unwrap();
        assert_eq!((q.p50, q.p99, q.p999), (500, 990, 999));
        assert_eq!(Quantiles::of(&[7]).unwrap().p999, 7);
        assert!(Quantiles::of(&[]).is_none());
    }

    #[test]
    fn csv_has_fixed_columns() {
        let mut r = RunReport::new("x", 3, BackendKind::Quorum, 5, &1u8);
        r.metric("m", 1.5);
        r.check("ok", vec![]);
        let csv = to_csv(&r.rows());
        assert_eq!(
            csv,
            "scenario,seed,backend,n,metric,value\nx,3,quorum,5,m,1.5\nx,3,quorum,5,check:ok,1.0\n"
        );
    }

    #[test]
    fn failures_are_named_by_checker() {
        let mut r = RunReport::new("x", 0, BackendKind::Attested, 1, &0u8);
        r.check("a", vec!["bad".into()]);
        assert!(!r.passed());
        assert_eq!(r.failures, vec!["a: bad".to_string()]);
    }
}
