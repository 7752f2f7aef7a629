use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::DhtError;

pub const DEFAULT_KEY_BITS: u32 = 16;
pub const MAX_KEY_BITS: u32 = 64;

/// A node or value identifier in `[0, 2^key_bits)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Key(u64);

impl Key {
    /// Checked constructor for a keyspace of `key_bits` bits.
    pub fn new(value: u64, key_bits: u32) -> Result<Self, DhtError> {
        if !(1..=MAX_KEY_BITS).contains(&key_bits) {
            return Err(DhtError::Config(format!(
                "key_bits must be in 1..={MAX_KEY_BITS}, got {key_bits}"
            )));
        }
        if key_bits < 64 && value >> key_bits != 0 {
            return Err(DhtError::KeyOutOfRange { value, key_bits });
        }
        Ok(Key(value))
    }

    pub const fn from_raw(value: u64) -> Self {
        Key(value)
    }

    pub const fn value(self) -> u64 {
        self.0
    }

    pub fn fits(self, key_bits: u32) -> bool {
        key_bits >= 64 || self.0 >> key_bits == 0
    }

    /// XOR distance.
    pub fn distance(self, other: Key) -> u64 {
        self.0 ^ other.0
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Index of the k-bucket `other` belongs to in `owner`'s table: the highest
/// set bit of their XOR distance. `None` when the keys are equal.
pub fn bucket_index(owner: Key, other: Key) -> Option<usize> {
    let d = owner.distance(other);
    if d == 0 {
        None
    } else {
        Some(63 - d.leading_zeros() as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_checks() {
        assert!(Key::new(65535, 16).is_ok());
        assert!(matches!(
            Key::new(65536, 16),
            Err(DhtError::KeyOutOfRange { .. })
        ));
        assert!(Key::new(u64::MAX, 64).is_ok());
        assert!(Key::new(0, 0).is_err());
    }

    #[test]
    fn buckets_follow_highest_differing_bit() {
        let owner = Key(3);
        assert_eq!(bucket_index(owner, Key(3)), None);
        assert_eq!(bucket_index(owner, Key(2)), Some(0));
        assert_eq!(bucket_index(owner, Key(0)), Some(1));
        assert_eq!(bucket_index(owner, Key(4)), Some(2));
        assert_eq!(bucket_index(owner, Key(7)), Some(2));
    }
}
