//! Scripted Byzantine senders against causal delivery.
//!
//! Three processes P1, P2, P3 (ids 0, 1, 2). P1 sends m1 to P3 over a slow
//! link and then m2 to P2; P2 reacts to m2 by sending m3 to P3. Honestly,
//! m1 precedes m3, so P3 (the victim) must never deliver m1 after m3.
//! A Byzantine P2 tries to attach a clock to m3 that looks concurrent
//! with m1.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use vlc_core::{BackendKind, ClientError, ClockClient, ClockValue, FrontendKind, RejectCode, Vlc};
use vlc_sim::{FaultPlan, ProcId, Script, Simulator, Tick, Trace};

use crate::causal::{check_trace, Act, CausalNode, CausalViolation, Discard, Envelope, Step};
use crate::common::{entity, process_deployment};

pub const P1: ProcId = 0;
pub const P2: ProcId = 1;
pub const P3: ProcId = 2;
pub const VICTIM: ProcId = P3;
const SLOW_LINK: Tick = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Attack {
    /// The honest run, no adversary.
    None,
    /// P2 attaches a made-up clock to m3.
    ErroneousClock,
    /// P2 assembles m3's clock entry by entry from different received clocks.
    CherryPick,
    /// P2 forks its own history from an older clock and omits m2.
    StaleOwnClock,
}

impl Attack {
    pub const ADVERSARIAL: [Attack; 3] = [
        Attack::ErroneousClock,
        Attack::CherryPick,
        Attack::StaleOwnClock,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attack::None => "honest",
            Attack::ErroneousClock => "erroneous-clock",
            Attack::CherryPick => "cherry-pick",
            Attack::StaleOwnClock => "stale-own-clock",
        }
    }
}

impl fmt::Display for Attack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attack {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            Attack::None,
            Attack::ErroneousClock,
            Attack::CherryPick,
            Attack::StaleOwnClock,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| format!("unknown attack {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScenarioConfig {
    pub backend: BackendKind,
    /// Enable the MONO frontend alongside UPDATE.
    pub mono: bool,
    /// Victim checks proofs. Disabling this is a negative control.
    pub check_proofs: bool,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn defended(backend: BackendKind) -> Self {
        Self {
            backend,
            mono: true,
            check_proofs: true,
            seed: 0,
        }
    }
}

/// What the adversary's script managed to do.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttackResult {
    NotAttempted,
    /// A forged clock went on the wire.
    Sent {
        clock: ClockValue,
        proven: bool,
    },
    /// The backend refused to prove the forged clock.
    Blocked(String),
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub attack: Attack,
    pub config: ScenarioConfig,
    /// Clock on the wire for each named message, as the receiver saw it.
    pub clocks: BTreeMap<String, ClockValue>,
    pub victim_delivered: Vec<String>,
    pub victim_discarded: Vec<(String, Discard)>,
    pub result: AttackResult,
    pub violations: Vec<CausalViolation>,
    pub trace: Trace,
}

impl ScenarioOutcome {
    /// The victim never delivered m1 after m3 and the ground-truth checker
    /// found nothing.
    pub fn victim_safe(&self) -> bool {
        let pos = |name: &str| self.victim_delivered.iter().position(|m| m == name);
        let misordered = matches!((pos("m3"), pos("m1")), (Some(a), Some(b)) if a < b);
        !misordered && self.violations.is_empty()
    }

    /// The adversary's clock was rejected: by verification at the victim
    /// or by the backend at proving time.
    pub fn forged_clock_rejected(&self) -> bool {
        match &self.result {
            AttackResult::Blocked(_) => true,
            AttackResult::Sent { .. } => self
                .victim_discarded
                .iter()
                .any(|(m, r)| m == "m3" && *r == Discard::InvalidProof),
            AttackResult::NotAttempted => false,
        }
    }

    pub fn verdict(&self) -> &'static str {
        match (&self.result, self.victim_safe()) {
            (AttackResult::NotAttempted, true) => "honest-ok",
            (AttackResult::Blocked(_), true) => "blocked-by-backend",
            (AttackResult::Sent { .. }, true) if self.forged_clock_rejected() => {
                "rejected-by-verify"
            }
            (_, true) => "harmless",
            (_, false) => "victim-misordered",
        }
    }
}

type Shared<T> = Rc<RefCell<T>>;

fn rewrite_clock(payload: &[u8], f: impl FnOnce(&Envelope) -> Option<Vlc>) -> Option<Vec<u8>> {
    let mut env = Envelope::from_bytes(payload).ok()?;
    let clock = f(&env)?;
    env.clock = clock;
    Some(env.to_bytes())
}

fn is_m3(dst: ProcId, payload: &[u8]) -> bool {
    dst == VICTIM && Envelope::from_bytes(payload).is_ok_and(|e| e.payload == b"m3")
}

/// Replaces m3's clock with the fixed value «0,2,3», keeping the honest
/// proofs.
struct Erroneous {
    result: Shared<AttackResult>,
}

impl Script for Erroneous {
    fn outbound(&mut self, _now: Tick, dst: ProcId, payload: Vec<u8>) -> Vec<(ProcId, Vec<u8>)> {
        if !is_m3(dst, &payload) {
            return vec![(dst, payload)];
        }
        let forged = ClockValue::from_entries([(entity(P2), 2), (entity(P3), 3)]);
        let bytes = rewrite_clock(&payload, |e| Some(e.clock.with_value(forged.clone())))
            .expect("own envelope");
        *self.result.borrow_mut() = AttackResult::Sent {
            clock: forged,
            proven: false,
        };
        vec![(dst, bytes)]
    }
}

/// Keeps every clock P2 receives and builds m3's clock from the smallest
/// nonzero value seen for each foreign entry.
struct CherryPick {
    received: Vec<ClockValue>,
    result: Shared<AttackResult>,
}

impl Script for CherryPick {
    fn inbound(&mut self, _now: Tick, _src: ProcId, payload: Vec<u8>) -> Option<Vec<u8>> {
        if let Ok(env) = Envelope::from_bytes(&payload) {
            self.received.push(env.clock.value().clone());
        }
        Some(payload)
    }

    fn outbound(&mut self, _now: Tick, dst: ProcId, payload: Vec<u8>) -> Vec<(ProcId, Vec<u8>)> {
        if !is_m3(dst, &payload) {
            return vec![(dst, payload)];
        }
        let me = entity(P2);
        let mut picked: BTreeMap<_, u64> = BTreeMap::new();
        for c in &self.received {
            for (id, v) in c.iter() {
                if *id != me {
                    picked
                        .entry(id.clone())
                        .and_modify(|x| *x = (*x).min(v))
                        .or_insert(v);
                }
            }
        }
        let mut forged = None;
        let bytes = rewrite_clock(&payload, |e| {
            picked.insert(me.clone(), e.clock.value().get(&me));
            let value = ClockValue::from_entries(picked);
            forged = Some(value.clone());
            Some(e.clock.with_value(value))
        })
        .expect("own envelope");
        *self.result.borrow_mut() = AttackResult::Sent {
            clock: forged.expect("set above"),
            proven: false,
        };
        vec![(dst, bytes)]
    }
}

/// Remembers P2's own earliest clock and, for m3, asks the backend for a
/// legitimately proven `Update(P2, oldest, [])`. Falls back to the honest
/// envelope if the backend refuses.
struct StaleOwn {
    client: ClockClient,
    oldest: Option<Vlc>,
    result: Shared<AttackResult>,
}

impl Script for StaleOwn {
    fn outbound(&mut self, _now: Tick, dst: ProcId, payload: Vec<u8>) -> Vec<(ProcId, Vec<u8>)> {
        if !is_m3(dst, &payload) {
            if self.oldest.is_none() {
                self.oldest = Envelope::from_bytes(&payload).ok().map(|e| e.clock);
            }
            return vec![(dst, payload)];
        }
        let Some(base) = self.oldest.clone() else {
            return vec![(dst, payload)];
        };
        match self.client.update(&entity(P2), &base, &[], &[]) {
            Ok(fork) => {
                *self.result.borrow_mut() = AttackResult::Sent {
                    clock: fork.value().clone(),
                    proven: true,
                };
                let bytes = rewrite_clock(&payload, |_| Some(fork)).expect("own envelope");
                vec![(dst, bytes)]
            }
            Err(e) => {
                *self.result.borrow_mut() = AttackResult::Blocked(e.to_string());
                vec![(dst, payload)]
            }
        }
    }
}

/// True if `e` is a backend refusal with the StaleBase code.
pub fn is_stale_base(e: &ClientError) -> bool {
    matches!(e, ClientError::Prove { source, .. } if source.reject_code() == Some(RejectCode::StaleBase))
}

fn steps(attack: Attack) -> [Vec<Step>; 3] {
    let m1_m2 = vec![Act::send(P3, "m1"), Act::send(P2, "m2")];
    let m3 = vec![Step::on("m2", vec![Act::send(P3, "m3")])];
    match attack {
        Attack::None | Attack::ErroneousClock => [
            vec![
                Step::at(0, vec![Act::send(P3, "m1")]),
                Step::at(1, vec![Act::send(P2, "m2")]),
            ],
            m3,
            vec![],
        ],
        Attack::CherryPick => [
            vec![Step::on("mb", m1_m2)],
            m3,
            vec![Step::at(0, vec![Act::send(P2, "ma"), Act::send(P1, "mb")])],
        ],
        Attack::StaleOwnClock => {
            let mut p2 = vec![
                Step::at(0, vec![Act::send(P1, "ca")]),
                Step::at(1, vec![Act::send(P1, "cb")]),
                Step::at(2, vec![Act::send(P1, "cc")]),
            ];
            p2.extend(m3);
            [vec![Step::on("cc", m1_m2)], p2, vec![]]
        }
    }
}

pub fn run_scenario(attack: Attack, cfg: ScenarioConfig) -> ScenarioOutcome {
    let kinds: &[FrontendKind] = if cfg.mono {
        &[FrontendKind::Update, FrontendKind::Mono]
    } else {
        &[FrontendKind::Update]
    };
    let label = format!("causal/{}/{}", attack.name(), cfg.backend.name());
    let (_d, clients) = process_deployment(cfg.backend, kinds, 3, &label);
    let byz_client = clients[P2 as usize].clone();

    let [s1, s2, s3] = steps(attack);
    let procs: Vec<CausalNode> = clients
        .into_iter()
        .zip([s1, s2, s3])
        .enumerate()
        .map(|(i, (c, s))| {
            let node = CausalNode::new(i as ProcId, c).with_steps(s);
            if cfg.check_proofs {
                node
            } else {
                node.without_proof_checks()
            }
        })
        .collect();

    let plan = FaultPlan {
        delay_min: 1,
        delay_max: 1,
        byzantine: if attack == Attack::None {
            vec![]
        } else {
            vec![P2]
        },
        ..FaultPlan::reliable(cfg.seed)
    }
    .with_link(P1, P3, SLOW_LINK, SLOW_LINK);
    let mut sim = Simulator::new(procs, plan);

    let result: Shared<AttackResult> = Rc::new(RefCell::new(AttackResult::NotAttempted));
    match attack {
        Attack::None => {}
        Attack::ErroneousClock => sim.inject(
            P2,
            Box::new(Erroneous {
                result: result.clone(),
            }),
        ),
        Attack::CherryPick => sim.inject(
            P2,
            Box::new(CherryPick {
                received: vec![],
                result: result.clone(),
            }),
        ),
        Attack::StaleOwnClock => sim.inject(
            P2,
            Box::new(StaleOwn {
                client: byz_client,
                oldest: None,
                result: result.clone(),
            }),
        ),
    }
    sim.run_to_quiescence().expect("scenario is finite");
    let (procs, trace) = sim.into_parts();

    let name = |p: &[u8]| String::from_utf8_lossy(p).into_owned();
    let mut clocks = BTreeMap::new();
    for p in &procs {
        for d in &p.delivered {
            clocks.insert(name(&d.payload), d.clock.clone());
        }
    }
    // Discarded messages never show up in a delivery log; fall back to the
    // senders' own logs, except for m3 whose wire clock may be forged.
    for (i, p) in procs.iter().enumerate() {
        for (_, c, payload) in &p.sent {
            let n = name(payload);
            if i as ProcId == P2 && n == "m3" {
                if let AttackResult::Sent { clock, .. } = &*result.borrow() {
                    clocks.insert(n, clock.clone());
                    continue;
                }
            }
            clocks.entry(n).or_insert_with(|| c.clone());
        }
    }
    let victim = &procs[VICTIM as usize];
    let victim_delivered = victim.delivered.iter().map(|d| name(&d.payload)).collect();
    let victim_discarded = victim
        .discarded
        .iter()
        .map(|(_, r, p)| (name(p), *r))
        .collect();
    let violations = check_trace(&trace, &[P1, P3]);
    let result = result.borrow().clone();
    ScenarioOutcome {
        attack,
        config: cfg,
        clocks,
        victim_delivered,
        victim_discarded,
        result,
        violations,
        trace,
    }
}

/// Runs all three adversaries under both backends with UPDATE and MONO.
pub fn regression_suite(seed: u64) -> Vec<ScenarioOutcome> {
    let mut out = Vec::new();
    for backend in BackendKind::ALL {
        for attack in Attack::ADVERSARIAL {
            out.push(run_scenario(
                attack,
                ScenarioConfig {
                    seed,
                    ..ScenarioConfig::defended(backend)
                },
            ));
        }
    }
    out
}
