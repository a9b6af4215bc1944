//! Response patterns and their coordinatewise partial order.
//!
//! A [`Pattern`] records which coordinates of a vector are observed. Patterns
//! render as strings of `0`/`1` with the first coordinate leftmost, so `1010`
//! means coordinates 1 and 3 are observed. The integer representation matches
//! the rendering: the first coordinate is the most significant bit, which makes
//! the derived ordering identical to ascending binary value of the string.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum supported pattern length.
pub const MAX_PATTERN_LEN: usize = 16;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Pattern {
    // Field order matters for the derived `Ord`: length first, then value.
    len: u8,
    value: u16,
}

impl Pattern {
    pub fn new(bits: &[bool]) -> Result<Self> {
        let len = bits.len();
        if len == 0 || len > MAX_PATTERN_LEN {
            return Err(Error::Argument(format!(
                "pattern length must be in 1..={MAX_PATTERN_LEN}, got {len}"
            )));
        }
        let value = bits.iter().fold(0u16, |acc, &b| (acc << 1) | u16::from(b));
        Ok(Pattern { len: len as u8, value })
    }

    /// Builds a pattern from its integer value (first coordinate = most significant bit).
    pub fn from_value(value: u16, len: usize) -> Result<Self> {
        if len == 0 || len > MAX_PATTERN_LEN {
            return Err(Error::Argument(format!(
                "pattern length must be in 1..={MAX_PATTERN_LEN}, got {len}"
            )));
        }
        if len < 16 && value >> len != 0 {
            return Err(Error::Argument(format!(
                "value {value} does not fit in a pattern of length {len}"
            )));
        }
        Ok(Pattern { len: len as u8, value })
    }

    pub fn ones(len: usize) -> Result<Self> {
        let value = if len >= 16 { u16::MAX } else { (1u16 << len) - 1 };
        Self::from_value(value, len)
    }

    pub fn zeros(len: usize) -> Result<Self> {
        Self::from_value(0, len)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len as usize
    }

    /// Always false: patterns have at least one coordinate.
    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn value(&self) -> u16 {
        self.value
    }

    /// Whether coordinate `j` (0-based, leftmost = 0) is observed.
    #[inline]
    pub fn get(&self, j: usize) -> bool {
        debug_assert!(j < self.len());
        (self.value >> (self.len() - 1 - j)) & 1 == 1
    }

    pub fn count_ones(&self) -> usize {
        self.value.count_ones() as usize
    }

    pub fn is_complete(&self) -> bool {
        self.count_ones() == self.len()
    }

    /// Indices of observed coordinates, in coordinate order.
    pub fn observed(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&j| self.get(j))
    }

    /// Indices of unobserved coordinates, in coordinate order.
    pub fn missing(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&j| !self.get(j))
    }

    /// Flips every coordinate (`r̄ = 1 - r`).
    pub fn complement(&self) -> Pattern {
        let mask = if self.len >= 16 {
            u16::MAX
        } else {
            (1u16 << self.len) - 1
        };
        Pattern {
            len: self.len,
            value: !self.value & mask,
        }
    }

    /// `self >= other` coordinatewise. Panics on length mismatch; see [`dominates`].
    #[inline]
    pub fn dominates(&self, other: &Pattern) -> bool {
        assert_eq!(self.len, other.len, "pattern length mismatch");
        other.value & !self.value == 0
    }
}

/// Returns true iff `r1[i] >= r2[i]` for every coordinate.
pub fn dominates(r1: &Pattern, r2: &Pattern) -> Result<bool> {
    if r1.len != r2.len {
        return Err(Error::Argument(format!(
            "cannot compare patterns of length {} and {}",
            r1.len, r2.len
        )));
    }
    Ok(r1.dominates(r2))
}

/// All patterns `τ <= r`, in ascending binary value.
pub fn dominated_set(r: &Pattern) -> Vec<Pattern> {
    // Enumerate submasks of r.value in descending order, then reverse.
    let mut out = Vec::with_capacity(1 << r.count_ones());
    let mut sub = r.value;
    loop {
        out.push(Pattern { len: r.len, value: sub });
        if sub == 0 {
            break;
        }
        sub = (sub - 1) & r.value;
    }
    out.reverse();
    out
}

/// Every pattern of the given length, in ascending binary value.
pub fn all_patterns(len: usize) -> Result<Vec<Pattern>> {
    let full = Pattern::ones(len)?;
    Ok(dominated_set(&full))
}

/// Subvector of `v` at the coordinates observed in `r`.
pub fn extract(v: &[Option<f64>], r: &Pattern) -> Result<Vec<f64>> {
    if v.len() != r.len() {
        return Err(Error::Argument(format!(
            "vector of length {} does not match pattern of length {}",
            v.len(),
            r.len()
        )));
    }
    r.observed()
        .map(|j| {
            v[j].ok_or_else(|| {
                Error::Precondition(format!("coordinate {} requested by pattern {r} is not observed", j + 1))
            })
        })
        .collect()
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for j in 0..self.len() {
            f.write_str(if self.get(j) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Pattern({self})")
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Argument(format!("invalid pattern character `{other}` in `{s}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Pattern::new(&bits)
    }
}

impl TryFrom<String> for Pattern {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Pattern> for String {
    fn from(p: Pattern) -> String {
        p.to_string()
    }
}

/// Stratum label `(R = r, A = a)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatternPair {
    pub r: Pattern,
    pub a: Pattern,
}

impl PatternPair {
    pub fn new(r: Pattern, a: Pattern) -> Self {
        PatternPair { r, a }
    }

    /// Parses `"r,a"`, e.g. `"10,01"`.
    pub fn parse(s: &str) -> Result<Self> {
        let (r, a) = s
            .split_once(',')
            .ok_or_else(|| Error::Argument(format!("pattern pair `{s}` must have the form `r,a`")))?;
        Ok(PatternPair {
            r: r.trim().parse()?,
            a: a.trim().parse()?,
        })
    }

    /// Whether this stratum needs identification (`a != 1_d`).
    pub fn is_incomplete(&self) -> bool {
        !self.a.is_complete()
    }
}

impl fmt::Display for PatternPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(R={}, A={})", self.r, self.a)
    }
}

impl fmt::Debug for PatternPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}
