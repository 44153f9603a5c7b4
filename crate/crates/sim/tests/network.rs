use std::time::Duration;

use vlc_sim::tcp::{bind_local, TcpNode};
use vlc_sim::*;

/// Every process sends `per_proc` numbered messages to each peer on start.
struct Chatter {
    per_proc: u32,
    got: Vec<(ProcId, u32)>,
}

impl Process for Chatter {
    fn on_start(&mut self, ctx: &mut dyn Context) {
        for d in 0..ctx.n() as ProcId {
            if d != ctx.me() {
                for i in 0..self.per_proc {
                    ctx.send(d, i.to_be_bytes().to_vec());
                }
            }
        }
    }

    fn on_message(&mut self, ctx: &mut dyn Context, src: ProcId, p: &[u8]) {
        let i = u32::from_be_bytes(p.try_into().unwrap());
        self.got.push((src, i));
        if i % 97 == 0 {
            ctx.note(format!("milestone {i} from {src}"));
        }
    }
}

fn chatter(n: usize, per_proc: u32) -> Vec<Chatter> {
    (0..n)
        .map(|_| Chatter {
            per_proc,
            got: vec![],
        })
        .collect()
}

fn faulty_plan(seed: u64) -> FaultPlan {
    FaultPlan {
        seed,
        delay_min: 1,
        delay_max: 20,
        reorder_prob: 0.2,
        drop_prob: 0.1,
        duplicate_prob: 0.05,
        ..FaultPlan::default()
    }
}

#[test]
fn same_seed_same_trace() {
    let run = |seed| {
        let mut sim = Simulator::new(chatter(4, 50), faulty_plan(seed));
        sim.run_to_quiescence().unwrap();
        sim.trace().to_jsonl()
    };
    assert_eq!(run(11), run(11));
    assert_ne!(run(11), run(12));
}

#[test]
fn fault_rates_within_two_percent() {
    let plan = faulty_plan(2024);
    // 5 processes x 4 peers x 5000 = 100_000 messages.
    let mut sim = Simulator::new(chatter(5, 5000), plan.clone());
    sim.run_to_quiescence().unwrap();
    let st = sim.stats();
    assert_eq!(st.sent, 100_000);
    let sent = st.sent as f64;
    let survived = (st.sent - st.dropped) as f64;
    let drop = st.dropped as f64 / sent;
    let dup = st.duplicated as f64 / survived;
    let reorder = st.reordered as f64 / survived;
    assert!((drop - plan.drop_prob).abs() <= 0.02, "drop rate {drop}");
    assert!(
        (dup - plan.duplicate_prob).abs() <= 0.02,
        "duplicate rate {dup}"
    );
    assert!(
        (reorder - plan.reorder_prob).abs() <= 0.02,
        "reorder rate {reorder}"
    );

    // The trace agrees with the counters.
    let t = sim.trace();
    assert_eq!(t.count(EventKind::Drop) as u64, st.dropped);
    assert_eq!(
        t.count(EventKind::Deliver) as u64,
        st.sent - st.dropped + st.duplicated
    );
    t.check_transport().unwrap();
}

#[test]
fn link_override_reorders_across_paths() {
    // 0 -> 2 is slow, 0 -> 1 -> 2 is fast: 2 hears the relay first.
    struct Relay {
        log: Vec<(ProcId, Vec<u8>)>,
    }
    impl Process for Relay {
        fn on_start(&mut self, ctx: &mut dyn Context) {
            if ctx.me() == 0 {
                ctx.send(2, b"direct".to_vec());
                ctx.send(1, b"via".to_vec());
            }
        }
        fn on_message(&mut self, ctx: &mut dyn Context, src: ProcId, p: &[u8]) {
            self.log.push((src, p.to_vec()));
            if ctx.me() == 1 {
                ctx.send(2, b"relayed".to_vec());
            }
        }
    }
    let plan = FaultPlan {
        delay_min: 1,
        delay_max: 1,
        ..FaultPlan::reliable(0)
    }
    .with_link(0, 2, 100, 100);
    let procs = (0..3).map(|_| Relay { log: vec![] }).collect();
    let mut sim = Simulator::new(procs, plan);
    sim.run_to_quiescence().unwrap();
    let order: Vec<&[u8]> = sim.processes()[2]
        .log
        .iter()
        .map(|(_, p)| p.as_slice())
        .collect();
    assert_eq!(order, vec![b"relayed".as_slice(), b"direct".as_slice()]);
}

#[test]
fn scripts_rewrite_and_omit() {
    struct Shout;
    impl Script for Shout {
        fn outbound(
            &mut self,
            _now: Tick,
            dst: ProcId,
            payload: Vec<u8>,
        ) -> Vec<(ProcId, Vec<u8>)> {
            if dst == 1 {
                vec![]
            } else {
                vec![(dst, payload.to_ascii_uppercase())]
            }
        }
    }
    struct Once {
        got: Vec<Vec<u8>>,
    }
    impl Process for Once {
        fn on_start(&mut self, ctx: &mut dyn Context) {
            if ctx.me() == 0 {
                ctx.send(1, b"hello".to_vec());
                ctx.send(2, b"hello".to_vec());
            }
        }
        fn on_message(&mut self, _: &mut dyn Context, _: ProcId, p: &[u8]) {
            self.got.push(p.to_vec());
        }
    }
    let procs = (0..3).map(|_| Once { got: vec![] }).collect();
    let mut sim = Simulator::new(procs, FaultPlan::reliable(5));
    sim.inject(0, Box::new(Shout));
    sim.run_to_quiescence().unwrap();
    assert!(sim.processes()[1].got.is_empty());
    assert_eq!(sim.processes()[2].got, vec![b"HELLO".to_vec()]);
}

#[test]
fn trace_jsonl_round_trip_and_corruption() {
    let mut plan = faulty_plan(3);
    plan.record_payloads = true;
    let mut sim = Simulator::new(chatter(3, 20), plan);
    sim.run_to_quiescence().unwrap();
    let text = sim.trace().to_jsonl();
    let back = Trace::read_jsonl(text.as_bytes()).unwrap();
    assert_eq!(&back, sim.trace());
    assert!(back.notes().count() > 0);

    let mut bad = back.clone();
    let i = bad
        .events
        .iter()
        .position(|e| e.kind == EventKind::Deliver)
        .unwrap();
    bad.events[i].msg = Some(999_999);
    assert!(matches!(
        bad.check_transport(),
        Err(TraceError::Unsent { .. })
    ));

    let mut swapped = back.clone();
    swapped.events.swap(3, 7);
    assert!(matches!(
        swapped.check_transport(),
        Err(TraceError::OutOfOrder { .. })
    ));
}

#[test]
fn tcp_transport_runs_the_same_handlers() {
    let (listeners, addrs) = bind_local(3).unwrap();
    let handles: Vec<_> = listeners
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let node = TcpNode::new(
                i as ProcId,
                l,
                addrs.clone(),
                Chatter {
                    per_proc: 25,
                    got: vec![],
                },
            );
            std::thread::spawn(move || node.run(|p| p.got.len() == 50, Duration::from_secs(20)))
        })
        .collect();
    for h in handles {
        let (p, done) = h.join().unwrap();
        assert!(done, "node did not receive every message");
        // TCP is FIFO per connection, so each sender's sequence arrives in order.
        for src in 0..3 {
            let seq: Vec<u32> = p
                .got
                .iter()
                .filter(|(s, _)| *s == src)
                .map(|(_, i)| *i)
                .collect();
            assert!(seq.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
