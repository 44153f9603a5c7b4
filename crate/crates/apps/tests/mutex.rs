use vlc_apps::mutex::*;
use vlc_core::BackendKind;
use vlc_sim::FaultPlan;

fn reliable() -> FaultPlan {
    FaultPlan {
        delay_min: 1,
        delay_max: 5,
        ..FaultPlan::default()
    }
}

#[test]
fn sole_contender_gets_empty_replies() {
    let cfg = MutexConfig::new(3, 1, BackendKind::Quorum, 1);
    let r = run_mutex(&cfg, &reliable(), None).unwrap();
    assert!(r.ok(), "{:?}", r.violations);
    assert_eq!(r.grants.len(), 1);
    let p = &r.grants[0].proof;
    assert_eq!(p.entries.len(), 2);
    assert!(p
        .entries
        .iter()
        .all(|e| e.kind == MsgKind::Reply && e.reply_clocks.is_empty()));
    check_acquisition(&r.roster, p).unwrap();
}

#[test]
fn all_contenders_granted_in_order_under_every_plan() {
    for (name, plan) in standard_plans() {
        for backend in BackendKind::ALL {
            for seed in 0..3 {
                let cfg = MutexConfig::new(4, 4, backend, seed);
                let r = run_mutex(&cfg, &plan, None).unwrap();
                assert!(r.ok(), "{name}/{backend}/{seed}: {:?}", r.violations);
                assert_eq!(r.grants.len(), 4);
            }
        }
    }
}

#[test]
fn two_rounds_each() {
    let cfg = MutexConfig {
        rounds: 2,
        ..MutexConfig::new(3, 3, BackendKind::Attested, 4)
    };
    let r = run_mutex(&cfg, &standard_plans()[2].1, None).unwrap();
    assert!(r.ok(), "{:?}", r.violations);
    assert_eq!(r.grants.len(), 6);
}

#[test]
fn larger_request_reply_lists_the_smaller() {
    // Find a run where two requests are concurrent; the larger one's proof
    // then carries a Reply listing the smaller and its holder's Release.
    let cfg = MutexConfig {
        spread: 1,
        ..MutexConfig::new(3, 2, BackendKind::Quorum, 0)
    };
    let r = run_mutex(&cfg, &reliable(), None).unwrap();
    assert!(r.ok());
    let (first, second) = (&r.grants[0], &r.grants[1]);
    assert_eq!(
        first.request.compare(&second.request),
        vlc_core::ClockOrdering::Concurrent
    );
    assert!(first.request.total_less(&second.request));
    assert!(first
        .proof
        .entries
        .iter()
        .all(|e| e.reply_clocks.is_empty()));
    let listed: Vec<_> = second
        .proof
        .entries
        .iter()
        .flat_map(|e| e.reply_clocks.iter().map(|(_, c)| c.clone()))
        .collect();
    assert!(listed.contains(&first.request));
    let holder = vlc_apps::common::entity(first.holder);
    assert_eq!(second.proof.entry(&holder).unwrap().kind, MsgKind::Release);
}

#[test]
fn tampered_proofs_fail() {
    let cfg = MutexConfig::new(4, 4, BackendKind::Quorum, 7);
    let r = run_mutex(&cfg, &reliable(), None).unwrap();
    assert!(r.ok());
    for g in &r.grants {
        check_acquisition(&r.roster, &g.proof).unwrap();
        let bytes = g.proof.to_bytes();
        assert_eq!(AcquisitionProof::from_bytes(&bytes).unwrap(), g.proof);
        for (name, bad) in tampered_variants(&g.proof, &r.history) {
            assert_ne!(bad, g.proof, "{name} left the proof unchanged");
            assert!(
                check_acquisition(&r.roster, &bad).is_err(),
                "{name} accepted"
            );
        }
    }
}

#[test]
fn release_ordered_before_request_is_rejected() {
    let cfg = MutexConfig {
        rounds: 2,
        ..MutexConfig::new(3, 3, BackendKind::Quorum, 2)
    };
    let r = run_mutex(&cfg, &reliable(), None).unwrap();
    assert!(r.ok(), "{:?}", r.violations);
    let last = r.grants.last().unwrap();
    let c_r = &last.request;
    let (i, e) = last.proof.entries.iter().enumerate().next().unwrap();
    let old = r
        .history
        .iter()
        .find(|m| m.sender == e.sender && m.kind == MsgKind::Release && m.value().total_less(c_r))
        .expect("a first-round release");
    let mut bad = last.proof.clone();
    bad.entries[i] = old.clone();
    assert!(matches!(
        check_acquisition(&r.roster, &bad),
        Err(ProofError::StaleRelease(_) | ProofError::MissingRelease(_))
    ));
}

#[test]
fn replayed_request_after_release_is_ignored() {
    let cfg = MutexConfig::new(3, 3, BackendKind::Attested, 5);
    let r = run_mutex(&cfg, &reliable(), Some(0)).unwrap();
    assert!(r.ok(), "{:?}", r.violations);
    // Two receivers ignore the replay; nobody is granted twice.
    assert_eq!(r.ignored_requests, 2);
    assert_eq!(r.grants.len(), 3);
}

#[test]
fn runs_are_deterministic() {
    let cfg = MutexConfig::new(5, 5, BackendKind::Quorum, 3);
    let plan = &standard_plans()[2].1;
    let a = run_mutex(&cfg, plan, None).unwrap();
    let b = run_mutex(&cfg, plan, None).unwrap();
    assert_eq!(a.trace.to_jsonl(), b.trace.to_jsonl());
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]

    #[test]
    fn any_seeded_run_is_safe_and_live(seed in 0u64..1_000_000, n in 2usize..7, contenders in 1usize..7, plan in 0usize..3, attested in proptest::prelude::any::<bool>()) {
        let backend = if attested { BackendKind::Attested } else { BackendKind::Quorum };
        let (_, plan) = standard_plans().swap_remove(plan);
        let cfg = MutexConfig::new(n, contenders, backend, seed);
        let r = run_mutex(&cfg, &plan, None).unwrap();
        proptest::prop_assert!(r.ok(), "{:?}", r.violations);
        proptest::prop_assert_eq!(r.grants.len(), contenders.min(n));
    }
}
