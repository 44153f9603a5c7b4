use serde::{Deserialize, Serialize};

use crate::{ProcId, Tick};

/// Delay bounds for one directed link, overriding the plan default.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkDelay {
    pub src: ProcId,
    pub dst: ProcId,
    pub min: Tick,
    pub max: Tick,
}

/// Seeded network fault model. Equal plans yield identical traces.
///
/// Without reordering each link is FIFO. A reordered message skips the
/// FIFO clamp and is held back by up to `reorder_extra` additional ticks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultPlan {
    pub seed: u64,
    pub delay_min: Tick,
    pub delay_max: Tick,
    pub links: Vec<LinkDelay>,
    pub reorder_prob: f64,
    pub reorder_extra: Tick,
    pub drop_prob: f64,
    pub duplicate_prob: f64,
    /// Processes expected to run a Byzantine script; informational for
    /// checkers, which exclude them from honesty properties.
    pub byzantine: Vec<ProcId>,
    pub max_events: u64,
    /// Keep full payloads in the trace, not just digests.
    pub record_payloads: bool,
}

impl Default for FaultPlan {
    fn default() -> Self {
        Self {
            seed: 0,
            delay_min: 1,
            delay_max: 10,
            links: Vec::new(),
            reorder_prob: 0.0,
            reorder_extra: 50,
            drop_prob: 0.0,
            duplicate_prob: 0.0,
            byzantine: Vec::new(),
            max_events: 5_000_000,
            record_payloads: false,
        }
    }
}

impl FaultPlan {
    pub fn reliable(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn with_link(mut self, src: ProcId, dst: ProcId, min: Tick, max: Tick) -> Self {
        self.links.retain(|l| !(l.src == src && l.dst == dst));
        self.links.push(LinkDelay { src, dst, min, max });
        self
    }

    pub fn delay_bounds(&self, src: ProcId, dst: ProcId) -> (Tick, Tick) {
        self.links
            .iter()
            .rev()
            .find(|l| l.src == src && l.dst == dst)
            .map(|l| (l.min, l.max))
            .unwrap_or((self.delay_min, self.delay_max))
    }

    pub fn is_byzantine(&self, p: ProcId) -> bool {
        self.byzantine.contains(&p)
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}
