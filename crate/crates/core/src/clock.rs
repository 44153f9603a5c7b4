//! Clock values: the numeric half of a verifiable logical clock.
//!
//! A [`ClockValue`] is a sparse map from [`EntityId`] to a counter. Absent
//! entries read as zero and are never stored, so structural equality is
//! semantic equality. Everything here is pure arithmetic; proofs live in
//! [`crate::vlc`].

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::codec::{put_u32, put_u64, put_u8, DecodeError, Reader};

pub const MAX_ID_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("entity id must be 1..={MAX_ID_LEN} bytes, got {0}")]
pub struct InvalidEntityId(pub usize);

/// Opaque identifier of anything that owns a clock entry: a process, a
/// validator, a store key.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(Vec<u8>);

impl EntityId {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self, InvalidEntityId> {
        let bytes = bytes.into();
        if bytes.is_empty() || bytes.len() > MAX_ID_LEN {
            return Err(InvalidEntityId(bytes.len()));
        }
        Ok(Self(bytes))
    }

    /// Convenience constructor for ids known to be valid at compile time.
    ///
    /// Panics if `name` is empty or longer than [`MAX_ID_LEN`].
    pub fn named(name: &str) -> Self {
        Self::new(name.as_bytes()).expect("invalid literal entity id")
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, DecodeError> {
        let bytes =
            hex::decode(s).map_err(|e| DecodeError::invalid("entity id hex", e.to_string()))?;
        Self::new(bytes).map_err(|e| DecodeError::invalid("entity id", e.to_string()))
    }

    pub(crate) fn encode_into(&self, out: &mut Vec<u8>) {
        put_u8(out, self.0.len() as u8);
        out.extend_from_slice(&self.0);
    }

    pub(crate) fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let len = r.u8()? as usize;
        let bytes = r.take(len)?;
        Self::new(bytes).map_err(|e| DecodeError::invalid("entity id", e.to_string()))
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match std::str::from_utf8(&self.0) {
            Ok(s) if s.chars().all(|c| c.is_ascii_graphic()) => f.write_str(s),
            _ => write!(f, "0x{}", self.to_hex()),
        }
    }
}

impl fmt::Debug for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl Serialize for EntityId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for EntityId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Result of comparing two clocks under happened-before.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClockOrdering {
    /// Left happened before right.
    Before,
    Equal,
    /// Left happened after right.
    After,
    Concurrent,
}

impl ClockOrdering {
    pub fn reverse(self) -> Self {
        match self {
            ClockOrdering::Before => ClockOrdering::After,
            ClockOrdering::After => ClockOrdering::Before,
            other => other,
        }
    }
}

/// Sparse counter map. Never stores a zero counter.
#[derive(Clone, Default, PartialEq, Eq, Hash)]
pub struct ClockValue {
    entries: BTreeMap<EntityId, u64>,
}

impl ClockValue {
    /// The genesis clock.
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a clock from arbitrary entries, dropping zero counters.
    pub fn from_entries<I>(entries: I) -> Self
    where
        I: IntoIterator<Item = (EntityId, u64)>,
    {
        Self {
            entries: entries.into_iter().filter(|(_, c)| *c != 0).collect(),
        }
    }

    pub fn get(&self, id: &EntityId) -> u64 {
        self.entries.get(id).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in canonical (ascending id bytes) order.
    pub fn iter(&self) -> impl Iterator<Item = (&EntityId, u64)> {
        self.entries.iter().map(|(k, v)| (k, *v))
    }

    pub fn ids(&self) -> impl Iterator<Item = &EntityId> {
        self.entries.keys()
    }

    /// Per-entry maximum with `other`, in place. No increment.
    pub fn merge(&mut self, other: &ClockValue) {
        for (id, &c) in &other.entries {
            let slot = self.entries.entry(id.clone()).or_insert(0);
            *slot = (*slot).max(c);
        }
    }

    /// Per-entry maximum of `self` and `other` as a new value.
    pub fn merged(&self, other: &ClockValue) -> ClockValue {
        let mut out = self.clone();
        out.merge(other);
        out
    }

    fn increment(&mut self, id: &EntityId) {
        let slot = self.entries.entry(id.clone()).or_insert(0);
        *slot = slot.checked_add(1).expect("clock counter overflow");
    }

    /// `Update(id, self, others)` on values: per-entry max over all inputs,
    /// then `id` incremented by one. Inputs are left untouched.
    pub fn update(&self, id: &EntityId, others: &[&ClockValue]) -> ClockValue {
        let mut out = self.clone();
        for other in others {
            out.merge(other);
        }
        out.increment(id);
        out
    }

    /// Happened-before comparison. Absent entries read as zero.
    pub fn compare(&self, other: &ClockValue) -> ClockOrdering {
        let mut less = false;
        let mut greater = false;
        for id in self.entries.keys().chain(other.entries.keys()) {
            let (a, b) = (self.get(id), other.get(id));
            less |= a < b;
            greater |= a > b;
            if less && greater {
                return ClockOrdering::Concurrent;
            }
        }
        match (less, greater) {
            (false, false) => ClockOrdering::Equal,
            (true, false) => ClockOrdering::Before,
            (false, true) => ClockOrdering::After,
            (true, true) => ClockOrdering::Concurrent,
        }
    }

    pub fn happened_before(&self, other: &ClockValue) -> bool {
        self.compare(other) == ClockOrdering::Before
    }

    /// Sum of all counters. Computed in `u128`, which cannot overflow for
    /// any encodable clock (at most 2^32 entries of 2^64 each).
    pub fn sum(&self) -> u128 {
        self.entries.values().map(|&c| c as u128).sum()
    }

    /// Total order extending happened-before: by counter sum, ties broken
    /// by lexicographic order of the canonical encoding.
    pub fn total_cmp(&self, other: &ClockValue) -> Ordering {
        self.sum()
            .cmp(&other.sum())
            .then_with(|| self.to_bytes().cmp(&other.to_bytes()))
    }

    pub fn total_less(&self, other: &ClockValue) -> bool {
        self.total_cmp(other) == Ordering::Less
    }

    /// Canonical encoding: `u32` entry count, then per entry `u8` id
    /// length, id bytes and `u64` counter, ascending by id bytes. All
    /// integers big-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.entries.len() * 16);
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        put_u32(out, self.entries.len() as u32);
        for (id, &c) in &self.entries {
            id.encode_into(out);
            put_u64(out, c);
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let v = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(v)
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let count = r.u32()? as usize;
        // Each entry needs at least 10 bytes; reject absurd counts early.
        if count > r.remaining() / 10 {
            return Err(DecodeError::Truncated {
                needed: count * 10 - r.remaining(),
            });
        }
        let mut entries = BTreeMap::new();
        let mut prev: Option<EntityId> = None;
        for _ in 0..count {
            let id = EntityId::decode_from(r)?;
            let c = r.u64()?;
            if c == 0 {
                return Err(DecodeError::invalid(
                    "clock",
                    format!("zero counter for {id}"),
                ));
            }
            if let Some(p) = &prev {
                match p.cmp(&id) {
                    Ordering::Less => {}
                    Ordering::Equal => {
                        return Err(DecodeError::invalid("clock", format!("duplicate id {id}")))
                    }
                    Ordering::Greater => {
                        return Err(DecodeError::invalid("clock", format!("unsorted id {id}")))
                    }
                }
            }
            prev = Some(id.clone());
            entries.insert(id, c);
        }
        Ok(Self { entries })
    }
}

impl fmt::Debug for ClockValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map().entries(self.entries.iter()).finish()
    }
}

impl fmt::Display for ClockValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (id, c)) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{id}:{c}")?;
        }
        f.write_str("}")
    }
}

impl Serialize for ClockValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.to_bytes()))
    }
}

impl<'de> Deserialize<'de> for ClockValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(s).map_err(serde::de::Error::custom)?;
        Self::from_bytes(&bytes).map_err(serde::de::Error::custom)
    }
}

/// `Init()`: the genesis clock value.
pub fn init() -> ClockValue {
    ClockValue::new()
}

/// `Update(id, base, others)` on values.
pub fn update_value(id: &EntityId, base: &ClockValue, others: &[ClockValue]) -> ClockValue {
    let refs: Vec<&ClockValue> = others.iter().collect();
    base.update(id, &refs)
}

pub fn compare(a: &ClockValue, b: &ClockValue) -> ClockOrdering {
    a.compare(b)
}

pub fn total_less(a: &ClockValue, b: &ClockValue) -> bool {
    a.total_less(b)
}

/// Shorthand for building clocks in tests and examples: `clock(&[("A", 3)])`.
pub fn clock(entries: &[(&str, u64)]) -> ClockValue {
    ClockValue::from_entries(entries.iter().map(|(k, v)| (EntityId::named(k), *v)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn id(s: &str) -> EntityId {
        EntityId::named(s)
    }

    #[test]
    fn genesis_is_empty() {
        assert!(init().is_empty());
        assert_eq!(compare(&init(), &init()), ClockOrdering::Equal);
        assert_eq!(init().sum(), 0);
    }

    #[test]
    fn update_examples() {
        assert_eq!(update_value(&id("P1"), &init(), &[]), clock(&[("P1", 1)]));
        assert_eq!(
            update_value(&id("P2"), &init(), &[clock(&[("P1", 2)])]),
            clock(&[("P1", 2), ("P2", 1)])
        );
        assert_eq!(
            update_value(
                &id("A"),
                &clock(&[("A", 3), ("B", 1)]),
                &[clock(&[("B", 5)]), clock(&[("A", 1), ("C", 2)])]
            ),
            clock(&[("A", 4), ("B", 5), ("C", 2)])
        );
    }

    #[test]
    fn update_leaves_inputs_untouched() {
        let base = clock(&[("A", 1)]);
        let other = clock(&[("B", 2)]);
        let _ = update_value(&id("A"), &base, std::slice::from_ref(&other));
        assert_eq!(base, clock(&[("A", 1)]));
        assert_eq!(other, clock(&[("B", 2)]));
    }

    #[test]
    fn compare_examples() {
        assert_eq!(
            compare(&clock(&[("P1", 1)]), &clock(&[("P1", 2), ("P2", 2)])),
            ClockOrdering::Before
        );
        assert_eq!(
            compare(&clock(&[("A", 1)]), &clock(&[("B", 1)])),
            ClockOrdering::Concurrent
        );
        assert_eq!(
            compare(&clock(&[("A", 2), ("B", 1)]), &clock(&[("A", 1), ("B", 2)])),
            ClockOrdering::Concurrent
        );
    }

    #[test]
    fn concurrent_single_updates_from_genesis() {
        let c1 = update_value(&id("id1"), &init(), &[]);
        let c2 = update_value(&id("id2"), &init(), &[]);
        assert_eq!(compare(&c1, &c2), ClockOrdering::Concurrent);
    }

    #[test]
    fn total_order_examples() {
        assert!(total_less(
            &clock(&[("P1", 1)]),
            &clock(&[("P1", 2), ("P2", 2)])
        ));
        // Equal sums: decided by canonical bytes, where "A" < "B".
        let (a, b) = (clock(&[("A", 1)]), clock(&[("B", 1)]));
        assert!(a.to_bytes() < b.to_bytes());
        assert!(total_less(&a, &b));
        assert!(!total_less(&b, &a));
        assert!(!total_less(&a, &a));
    }

    #[test]
    fn sum_examples() {
        assert_eq!(clock(&[("A", 4), ("B", 5), ("C", 2)]).sum(), 11);
    }

    #[test]
    fn zero_entries_are_dropped() {
        assert_eq!(clock(&[("A", 0), ("B", 1)]), clock(&[("B", 1)]));
    }

    #[test]
    fn genesis_encoding_is_count_header_only() {
        assert_eq!(init().to_bytes(), vec![0, 0, 0, 0]);
    }

    #[test]
    fn encoding_layout() {
        let bytes = clock(&[("B", 2), ("A", 1)]).to_bytes();
        assert_eq!(
            bytes,
            vec![0, 0, 0, 2, 1, b'A', 0, 0, 0, 0, 0, 0, 0, 1, 1, b'B', 0, 0, 0, 0, 0, 0, 0, 2]
        );
    }

    #[test]
    fn insertion_order_does_not_affect_encoding() {
        let a = ClockValue::from_entries([(id("x"), 1), (id("y"), 2), (id("a"), 3)]);
        let b = ClockValue::from_entries([(id("a"), 3), (id("y"), 2), (id("x"), 1)]);
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn decode_rejects_malformed() {
        let dup = vec![
            0, 0, 0, 2, 1, b'A', 0, 0, 0, 0, 0, 0, 0, 1, 1, b'A', 0, 0, 0, 0, 0, 0, 0, 2,
        ];
        assert!(matches!(
            ClockValue::from_bytes(&dup),
            Err(DecodeError::Invalid { .. })
        ));
        let unsorted = vec![
            0, 0, 0, 2, 1, b'B', 0, 0, 0, 0, 0, 0, 0, 1, 1, b'A', 0, 0, 0, 0, 0, 0, 0, 2,
        ];
        assert!(matches!(
            ClockValue::from_bytes(&unsorted),
            Err(DecodeError::Invalid { .. })
        ));
        let zero = vec![0, 0, 0, 1, 1, b'A', 0, 0, 0, 0, 0, 0, 0, 0];
        assert!(matches!(
            ClockValue::from_bytes(&zero),
            Err(DecodeError::Invalid { .. })
        ));
        let full = clock(&[("A", 7)]).to_bytes();
        assert!(matches!(
            ClockValue::from_bytes(&full[..full.len() - 1]),
            Err(DecodeError::Truncated { .. })
        ));
        let empty_id = vec![0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1];
        assert!(ClockValue::from_bytes(&empty_id).is_err());
    }

    #[test]
    #[should_panic(expected = "overflow")]
    fn counter_overflow_is_fatal() {
        let c = clock(&[("A", u64::MAX)]);
        let _ = update_value(&id("A"), &c, &[]);
    }

    fn arb_clock() -> impl Strategy<Value = ClockValue> {
        prop::collection::btree_map(prop::collection::vec(any::<u8>(), 1..=8), 1u64..1000, 0..8)
            .prop_map(|m| {
                ClockValue::from_entries(m.into_iter().map(|(k, v)| (EntityId::new(k).unwrap(), v)))
            })
    }

    proptest! {
        #[test]
        fn encoding_round_trips(c in arb_clock()) {
            prop_assert_eq!(ClockValue::from_bytes(&c.to_bytes()).unwrap(), c);
        }

        #[test]
        fn compare_is_antisymmetric(a in arb_clock(), b in arb_clock()) {
            prop_assert_eq!(a.compare(&b), b.compare(&a).reverse());
            prop_assert_eq!(a.compare(&b) == ClockOrdering::Equal, a == b);
        }

        #[test]
        fn update_strictly_increases_sum(base in arb_clock(), others in prop::collection::vec(arb_clock(), 0..4), who in 0u8..4) {
            let id = EntityId::new(vec![b'p', who]).unwrap();
            let out = update_value(&id, &base, &others);
            prop_assert!(out.sum() >= base.sum() + 1);
            for o in &others {
                prop_assert!(out.sum() > o.sum());
                prop_assert_eq!(o.compare(&out), ClockOrdering::Before);
            }
            prop_assert_eq!(base.compare(&out), ClockOrdering::Before);
        }

        #[test]
        fn total_order_extends_happened_before(a in arb_clock(), b in arb_clock()) {
            if a.happened_before(&b) {
                prop_assert!(a.total_less(&b));
            }
            if a != b {
                prop_assert!(a.total_less(&b) ^ b.total_less(&a));
            }
        }
    }
}
