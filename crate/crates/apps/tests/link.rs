use proptest::prelude::*;
use vlc_apps::link::ReliableLink;
use vlc_sim::{Context, FaultPlan, ProcId, Process, Simulator};

/// Every process sends `count` numbered payloads to every other process.
struct Node {
    link: ReliableLink,
    count: u32,
    got: Vec<Vec<u32>>,
}

impl Process for Node {
    fn on_start(&mut self, ctx: &mut dyn Context) {
        let (n, me) = (ctx.n() as ProcId, ctx.me());
        for dst in (0..n).filter(|&d| d != me) {
            for i in 0..self.count {
                self.link.send(ctx, dst, i.to_be_bytes().to_vec());
            }
        }
    }

    fn on_message(&mut self, ctx: &mut dyn Context, src: ProcId, raw: &[u8]) {
        for p in self.link.receive(ctx, src, raw) {
            self.got[src as usize].push(u32::from_be_bytes(p.try_into().unwrap()));
        }
    }

    fn on_timer(&mut self, ctx: &mut dyn Context, tag: u64) {
        self.link.on_timer(ctx, tag);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn delivery_is_fifo_and_exactly_once(
        seed in any::<u64>(),
        n in 2usize..5,
        count in 1u32..30,
        drop in 0.0f64..0.4,
        dup in 0.0f64..0.3,
        reorder in 0.0f64..0.5,
    ) {
        let plan = FaultPlan {
            seed,
            delay_min: 1,
            delay_max: 8,
            drop_prob: drop,
            duplicate_prob: dup,
            reorder_prob: reorder,
            reorder_extra: 20,
            ..FaultPlan::default()
        };
        let procs = (0..n).map(|_| Node { link: ReliableLink::new(40), count, got: vec![Vec::new(); n] }).collect();
        let mut sim = Simulator::new(procs, plan);
        let total = count as usize * (n - 1);
        sim.run(|ps, _| ps.iter().all(|p| p.link.idle() && p.got.iter().map(Vec::len).sum::<usize>() >= total))
            .unwrap();
        let (procs, _) = sim.into_parts();
        let want: Vec<u32> = (0..count).collect();
        for (me, p) in procs.iter().enumerate() {
            for (src, got) in p.got.iter().enumerate() {
                if src != me {
                    prop_assert_eq!(got, &want);
                }
            }
        }
    }
}
