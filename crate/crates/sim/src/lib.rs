//! Deterministic message-passing simulation.
//!
//! Processes are event handlers behind the [`Process`] trait. The
//! [`Simulator`] drives them over virtual time with seeded delay, reorder,
//! drop and duplicate faults and records a global [`Trace`]. The [`tcp`]
//! module drives the same handlers over real sockets.

mod plan;
mod sim;
pub mod tcp;
mod trace;

pub use plan::{FaultPlan, LinkDelay};
pub use sim::{NetStats, Outcome, SimError, Simulator};
pub use trace::{EventKind, Trace, TraceError, TraceEvent};

pub type ProcId = u32;
pub type Tick = u64;
pub type MsgId = u64;

/// What a handler may do while processing one event.
pub trait Context {
    fn me(&self) -> ProcId;
    fn now(&self) -> Tick;
    /// Number of processes in the run; ids are `0..n`.
    fn n(&self) -> usize;
    fn send(&mut self, dst: ProcId, payload: Vec<u8>);
    fn set_timer(&mut self, after: Tick, tag: u64);
    /// Adds a free-form annotation to the trace.
    fn note(&mut self, text: String);
    /// Transport id of the message being handled, if any.
    fn current_msg(&self) -> Option<MsgId>;
}

/// A deterministic event handler.
pub trait Process {
    fn on_start(&mut self, _ctx: &mut dyn Context) {}
    fn on_message(&mut self, ctx: &mut dyn Context, src: ProcId, payload: &[u8]);
    fn on_timer(&mut self, _ctx: &mut dyn Context, _tag: u64) {}
}

/// Byzantine behaviour wrapped around one process. Scripts see every
/// payload entering and leaving it and may drop, rewrite or add messages.
pub trait Script {
    /// Returns the messages actually sent in place of `(dst, payload)`.
    fn outbound(&mut self, now: Tick, dst: ProcId, payload: Vec<u8>) -> Vec<(ProcId, Vec<u8>)> {
        let _ = now;
        vec![(dst, payload)]
    }

    /// Returns the payload handed to the process, or `None` to hide it.
    fn inbound(&mut self, now: Tick, src: ProcId, payload: Vec<u8>) -> Option<Vec<u8>> {
        let _ = (now, src);
        Some(payload)
    }
}
