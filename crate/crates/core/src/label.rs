//! Provenance labels and the join monoid over them.
//!
//! A label is packed into a `u64`:
//!
//! | bits    | field |
//! |---------|-------|
//! | 48..=63 | flags (bit 48: value depends on a random source) |
//! | 24..=47 | smallest contributing user id |
//! | 0..=23  | largest contributing user id |
//!
//! User ids run from 1 to 2^24 - 2. The identity `e` (no contributor) has
//! the min field all ones and the max field zero, so that combining is a
//! fieldwise `min`/`max` plus a flag `or` with no special cases.

use std::fmt;

use ndarray::{ArrayD, IxDyn};
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::movement::{self as mv, Msg};

const FIELD_BITS: u32 = 24;
const FIELD_MASK: u64 = (1 << FIELD_BITS) - 1;
const MIN_SHIFT: u32 = FIELD_BITS;
const FLAG_SHIFT: u32 = 2 * FIELD_BITS;
const FLAG_MASK: u64 = !0 << FLAG_SHIFT;
const MIN_SENTINEL: u64 = FIELD_MASK;
const MAX_SENTINEL: u64 = 0;

/// Largest encodable user id.
pub const MAX_USER: u32 = (FIELD_MASK - 1) as u32;

/// Value depends on a random source.
pub const FLAG_RANDOM: u16 = 1;

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Label(u64);

/// How a label reads under the batch-isolation property.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelState {
    /// No user contributed.
    Neutral,
    /// Only random sources contributed.
    RandomOnly,
    /// Exactly one user contributed (flags may also be set).
    SingleUser(u32),
    /// At least two users contributed: ids span `min..=max`.
    MultiUser { min: u32, max: u32 },
}

impl Label {
    /// The identity `e`.
    pub const NEUTRAL: Label = Label(MIN_SENTINEL << MIN_SHIFT | MAX_SENTINEL);
    pub const RANDOM: Label = Label(Self::NEUTRAL.0 | (FLAG_RANDOM as u64) << FLAG_SHIFT);

    /// Label of an element that depends on user `u` alone.
    pub fn from_user(u: u32) -> Result<Label> {
        if u == 0 || u > MAX_USER {
            return Err(Error::Label(format!("user id {u} outside 1..={MAX_USER}")));
        }
        Ok(Label((u as u64) << MIN_SHIFT | u as u64))
    }

    /// Decode a packed label, rejecting bit patterns no combination produces.
    pub fn from_bits(bits: u64) -> Result<Label> {
        let l = Label(bits);
        let (lo, hi) = (l.min_field(), l.max_field());
        let sentinel = lo == MIN_SENTINEL && hi == MAX_SENTINEL;
        let users = lo >= 1 && lo <= hi && hi <= MAX_USER as u64;
        if sentinel || users {
            Ok(l)
        } else {
            Err(Error::Label(format!("malformed label {bits:#018x}")))
        }
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn flags(self) -> u16 {
        (self.0 >> FLAG_SHIFT) as u16
    }

    fn min_field(self) -> u64 {
        (self.0 >> MIN_SHIFT) & FIELD_MASK
    }

    fn max_field(self) -> u64 {
        self.0 & FIELD_MASK
    }

    pub fn with_flags(self, flags: u16) -> Label {
        Label(self.0 | (flags as u64) << FLAG_SHIFT)
    }

    pub fn is_random(self) -> bool {
        self.flags() & FLAG_RANDOM != 0
    }

    /// The monoid operation.
    #[inline]
    pub fn combine(self, other: Label) -> Label {
        let flags = (self.0 | other.0) & FLAG_MASK;
        let lo = self.min_field().min(other.min_field());
        let hi = self.max_field().max(other.max_field());
        Label(flags | lo << MIN_SHIFT | hi)
    }

    pub fn classify(self) -> LabelState {
        let (lo, hi) = (self.min_field(), self.max_field());
        if lo == MIN_SENTINEL && hi == MAX_SENTINEL {
            if self.flags() == 0 {
                LabelState::Neutral
            } else {
                LabelState::RandomOnly
            }
        } else if lo == hi {
            LabelState::SingleUser(lo as u32)
        } else {
            LabelState::MultiUser {
                min: lo as u32,
                max: hi as u32,
            }
        }
    }

    pub fn is_neutral(self) -> bool {
        self == Label::NEUTRAL
    }

    pub fn is_multi_user(self) -> bool {
        matches!(self.classify(), LabelState::MultiUser { .. })
    }
}

impl Default for Label {
    fn default() -> Self {
        Label::NEUTRAL
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = if self.is_random() { "R" } else { "" };
        match self.classify() {
            LabelState::Neutral => f.write_str("e"),
            LabelState::RandomOnly => f.write_str("R"),
            LabelState::SingleUser(u) => write!(f, "u{u}{r}"),
            LabelState::MultiUser { min, max } => write!(f, "u{min}..{max}{r}"),
        }
    }
}

impl fmt::Debug for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Per-element labels of one tensor.
pub type ShadowTensor = ArrayD<Label>;

pub fn neutral(shape: &[usize]) -> ShadowTensor {
    ArrayD::from_elem(IxDyn(shape), Label::NEUTRAL)
}

pub fn fold<'a>(labels: impl IntoIterator<Item = &'a Label>) -> Label {
    labels.into_iter().fold(Label::NEUTRAL, |a, &b| a.combine(b))
}

/// Combine over `axes`.
pub fn reduce(s: &ShadowTensor, axes: &[usize], keepdims: bool) -> ShadowTensor {
    mv::reduce_rowmajor(s, axes, keepdims, Label::NEUTRAL, |a, &b| a.combine(b), |a, _| a)
}

/// Elementwise combine under numpy broadcasting.
pub fn broadcast_combine(a: &ShadowTensor, b: &ShadowTensor) -> Msg<ShadowTensor> {
    mv::zip_with(a, b, |&x, &y| x.combine(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn arb_label() -> impl Strategy<Value = Label> {
        let flags = prop_oneof![Just(0u16), Just(FLAG_RANDOM), any::<u16>()];
        let users = prop_oneof![
            Just(None),
            (1..=MAX_USER, 1..=MAX_USER).prop_map(|(a, b)| Some((a.min(b), a.max(b)))),
            (1u32..8, 1u32..8).prop_map(|(a, b)| Some((a.min(b), a.max(b)))),
        ];
        (flags, users).prop_map(|(f, u)| {
            let base = match u {
                None => Label::NEUTRAL,
                Some((lo, hi)) => Label::from_user(lo).unwrap().combine(Label::from_user(hi).unwrap()),
            };
            base.with_flags(f)
        })
    }

    #[test]
    fn identity_layout() {
        assert_eq!(Label::NEUTRAL.bits(), 0x0000_FFFF_FF00_0000);
        assert_eq!(Label::from_user(1).unwrap().bits(), 0x0000_0000_0100_0001);
        assert_eq!(Label::NEUTRAL.classify(), LabelState::Neutral);
        assert_eq!(Label::RANDOM.classify(), LabelState::RandomOnly);
    }

    #[test]
    fn rendering() {
        let u = |k| Label::from_user(k).unwrap();
        assert_eq!(Label::NEUTRAL.to_string(), "e");
        assert_eq!(Label::RANDOM.to_string(), "R");
        assert_eq!(u(3).to_string(), "u3");
        assert_eq!(u(3).combine(Label::RANDOM).to_string(), "u3R");
        assert_eq!(u(1).combine(u(4)).to_string(), "u1..4");
        assert_eq!(u(4).combine(u(1)).combine(Label::RANDOM).to_string(), "u1..4R");
    }

    #[test]
    fn user_range_is_enforced() {
        assert!(Label::from_user(0).is_err());
        assert!(Label::from_user(MAX_USER).is_ok());
        assert!(Label::from_user(MAX_USER + 1).is_err());
    }

    #[test]
    fn malformed_bits_are_rejected() {
        // min > max
        assert!(Label::from_bits(2 << 24 | 1).is_err());
        // min field zero with a real max
        assert!(Label::from_bits(5).is_err());
        // max field all ones
        assert!(Label::from_bits(FIELD_MASK).is_err());
        assert!(Label::from_bits(Label::RANDOM.bits()).is_ok());
    }

    #[test]
    fn random_flag_does_not_change_user_state() {
        let u = Label::from_user(7).unwrap();
        assert_eq!(u.combine(Label::RANDOM).classify(), LabelState::SingleUser(7));
    }

    #[test]
    fn reduce_and_broadcast() {
        let u = |k| Label::from_user(k).unwrap();
        let s = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![u(1), u(1), u(2), Label::NEUTRAL]).unwrap();
        let r = reduce(&s, &[1], true);
        assert_eq!(r.shape(), &[2, 1]);
        assert_eq!(r[[0, 0]], u(1));
        assert_eq!(r[[1, 0]], u(2));
        let all = reduce(&s, &[0, 1], false);
        assert!(all.iter().next().unwrap().is_multi_user());
        let b = broadcast_combine(&r, &neutral(&[1, 3])).unwrap();
        assert_eq!(b.shape(), &[2, 3]);
        assert_eq!(b[[1, 2]], u(2));
    }

    proptest! {
        #[test]
        fn monoid_laws(a in arb_label(), b in arb_label(), c in arb_label()) {
            prop_assert_eq!(a.combine(b).combine(c), a.combine(b.combine(c)));
            prop_assert_eq!(a.combine(b), b.combine(a));
            prop_assert_eq!(a.combine(a), a);
            prop_assert_eq!(a.combine(Label::NEUTRAL), a);
            prop_assert!(Label::from_bits(a.combine(b).bits()).is_ok());
        }

        #[test]
        fn distinct_users_become_multi(a in 1..=MAX_USER, b in 1..=MAX_USER) {
            let l = Label::from_user(a).unwrap().combine(Label::from_user(b).unwrap());
            if a == b {
                prop_assert_eq!(l.classify(), LabelState::SingleUser(a));
            } else {
                prop_assert_eq!(l.classify(), LabelState::MultiUser { min: a.min(b), max: a.max(b) });
            }
        }
    }
}
