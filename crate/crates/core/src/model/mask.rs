use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Per-position consider/ignore flags. `b_i = 0` means position `i` is
/// considered, `b_i = 1` means it is ignored.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct MaskVector(Vec<bool>);

impl MaskVector {
    /// Every position considered.
    pub fn considering_all(len: usize) -> Self {
        Self(vec![false; len])
    }

    /// From `b_i` flags (`true` = ignored).
    pub fn from_flags(flags: Vec<bool>) -> Self {
        Self(flags)
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        Self(bits.iter().map(|&b| b != 0).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_ignored(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn ignore(&mut self, i: usize) {
        self.0[i] = true;
    }

    pub fn consider(&mut self, i: usize) {
        self.0[i] = false;
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }

    pub fn considered_count(&self) -> usize {
        self.0.iter().filter(|&&b| !b).count()
    }

    pub fn considered(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| !b).map(|(i, _)| i)
    }

    /// True when every position ignored here is also ignored in `other`.
    pub fn is_subset_of(&self, other: &MaskVector) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(&a, &b)| !a || b)
    }
}

impl fmt::Display for MaskVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl std::str::FromStr for MaskVector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(format!("invalid mask character {other:?}")),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Self)
    }
}

impl Serialize for MaskVector {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for MaskVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}
