//! Reliable FIFO channels over the lossy simulated network.
//!
//! Each directed link numbers its data frames. The receiver releases them
//! strictly in sequence order, drops duplicates and answers every data
//! frame with a cumulative acknowledgement. The sender retransmits all
//! unacknowledged frames every `rto` ticks until they are acknowledged.

use std::collections::BTreeMap;

use vlc_sim::{Context, ProcId, Tick};

/// Timer tag reserved for retransmission.
pub const LINK_TIMER: u64 = u64::MAX;

const DATA: u8 = 1;
const ACK: u8 = 2;

#[derive(Debug, Default)]
struct Peer {
    next_seq: u64,
    unacked: BTreeMap<u64, Vec<u8>>,
    expected: u64,
    held: BTreeMap<u64, Vec<u8>>,
}

#[derive(Debug)]
pub struct ReliableLink {
    rto: Tick,
    peers: BTreeMap<ProcId, Peer>,
    armed: bool,
    pub retransmissions: u64,
}

fn frame(tag: u8, seq: u64, payload: &[u8]) -> Vec<u8> {
    let mut f = Vec::with_capacity(9 + payload.len());
    f.push(tag);
    f.extend_from_slice(&seq.to_be_bytes());
    f.extend_from_slice(payload);
    f
}

impl ReliableLink {
    pub fn new(rto: Tick) -> Self {
        Self {
            rto: rto.max(1),
            peers: BTreeMap::new(),
            armed: false,
            retransmissions: 0,
        }
    }

    fn arm(&mut self, ctx: &mut dyn Context) {
        if !self.armed {
            self.armed = true;
            ctx.set_timer(self.rto, LINK_TIMER);
        }
    }

    pub fn send(&mut self, ctx: &mut dyn Context, dst: ProcId, payload: Vec<u8>) {
        let peer = self.peers.entry(dst).or_default();
        let seq = peer.next_seq;
        peer.next_seq += 1;
        let f = frame(DATA, seq, &payload);
        peer.unacked.insert(seq, payload);
        ctx.send(dst, f);
        self.arm(ctx);
    }

    /// Handles one raw frame and returns the payloads now deliverable from
    /// `src`, in order.
    pub fn receive(&mut self, ctx: &mut dyn Context, src: ProcId, raw: &[u8]) -> Vec<Vec<u8>> {
        if raw.len() < 9 {
            return Vec::new();
        }
        let tag = raw[0];
        let seq = u64::from_be_bytes(raw[1..9].try_into().expect("8 bytes"));
        let peer = self.peers.entry(src).or_default();
        match tag {
            ACK => {
                // Cumulative: everything below `seq` arrived.
                peer.unacked = peer.unacked.split_off(&seq);
                Vec::new()
            }
            DATA => {
                if seq >= peer.expected {
                    peer.held.entry(seq).or_insert_with(|| raw[9..].to_vec());
                }
                let mut out = Vec::new();
                while let Some(p) = peer.held.remove(&peer.expected) {
                    out.push(p);
                    peer.expected += 1;
                }
                let ack = frame(ACK, peer.expected, &[]);
                ctx.send(src, ack);
                out
            }
            _ => Vec::new(),
        }
    }

    /// Returns false if `tag` is not the link's timer.
    pub fn on_timer(&mut self, ctx: &mut dyn Context, tag: u64) -> bool {
        if tag != LINK_TIMER {
            return false;
        }
        self.armed = false;
        let mut resend = Vec::new();
        for (&dst, peer) in &self.peers {
            for (&seq, p) in &peer.unacked {
                resend.push((dst, frame(DATA, seq, p)));
            }
        }
        if !resend.is_empty() {
            self.retransmissions += resend.len() as u64;
            for (dst, f) in resend {
                ctx.send(dst, f);
            }
            self.arm(ctx);
        }
        true
    }

    /// Nothing is waiting for an acknowledgement.
    pub fn idle(&self) -> bool {
        self.peers.values().all(|p| p.unacked.is_empty())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use vlc_sim::{FaultPlan, Process, Simulator};

    struct Counter {
        link: ReliableLink,
        got: Vec<u32>,
        total: u32,
    }

    impl Process for Counter {
        fn on_start(&mut self, ctx: &mut dyn Context) {
            if ctx.me() == 0 {
                for i in 0..self.total {
                    self.link.send(ctx, 1, i.to_be_bytes().to_vec());
                }
            }
        }
        fn on_message(&mut self, ctx: &mut dyn Context, src: ProcId, p: &[u8]) {
            for m in self.link.receive(ctx, src, p) {
                self.got.push(u32::from_be_bytes(m.try_into().unwrap()));
            }
        }
        fn on_timer(&mut self, ctx: &mut dyn Context, tag: u64) {
            self.link.on_timer(ctx, tag);
        }
    }

    #[test]
    fn exactly_once_in_order_over_lossy_network() {
        let plan = FaultPlan {
            seed: 9,
            reorder_prob: 0.3,
            drop_prob: 0.3,
            duplicate_prob: 0.2,
            ..FaultPlan::default()
        };
        let procs = (0..2)
            .map(|_| Counter {
                link: ReliableLink::new(40),
                got: vec![],
                total: 200,
            })
            .collect();
        let mut sim = Simulator::new(procs, plan);
        sim.run_to_quiescence().unwrap();
        assert_eq!(sim.processes()[1].got, (0..200).collect::<Vec<_>>());
        assert!(sim.processes()[0].link.idle());
        assert!(sim.processes()[0].link.retransmissions > 0);
    }
}
