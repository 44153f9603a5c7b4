//! Applications built on verifiable logical clocks: causal message
//! delivery with Byzantine sender scripts, a Byzantine-tolerant mutual
//! exclusion protocol and a causally consistent key-value store, all
//! driven by the deterministic simulator.

pub mod attacks;
pub mod causal;
pub mod common;
pub mod link;
pub mod mutex;
pub mod report;
pub mod store;
