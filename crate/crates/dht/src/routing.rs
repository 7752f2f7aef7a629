use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::key::{bucket_index, Key};

pub const DEFAULT_BUCKET_SIZE: usize = 20;

/// A contact: a node's key and the host:port of its UDP endpoint.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeInfo {
    pub key: Key,
    pub address: String,
}

impl NodeInfo {
    pub fn new(key: Key, address: impl Into<String>) -> Self {
        NodeInfo {
            key,
            address: address.into(),
        }
    }
}

/// What happens when a contact arrives for a full bucket.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionPolicy {
    /// Keep the bucket as is and forget the newcomer.
    DropNewcomer,
    /// Evict the least recently seen contact in favour of the newcomer, as
    /// happens when the old contact's liveness ping times out.
    #[default]
    ReplaceLeastRecent,
}

impl fmt::Display for EvictionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvictionPolicy::DropNewcomer => "drop_newcomer",
            EvictionPolicy::ReplaceLeastRecent => "replace_least_recent",
        })
    }
}

impl FromStr for EvictionPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "drop_newcomer" => Ok(EvictionPolicy::DropNewcomer),
            "replace_least_recent" => Ok(EvictionPolicy::ReplaceLeastRecent),
            other => Err(format!(
                "unknown eviction policy {other:?} (expected drop_newcomer or replace_least_recent)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InsertOutcome {
    Added,
    /// Already known; moved to the most-recently-seen end.
    Refreshed,
    /// Bucket full, newcomer discarded.
    Dropped,
    /// Bucket full, the returned contact was evicted.
    Replaced(NodeInfo),
    /// The owner itself or a key outside the keyspace.
    Ignored,
}

/// Kademlia routing table. Each bucket is ordered from least to most
/// recently seen.
#[derive(Clone, Debug)]
pub struct RoutingTable {
    owner: Key,
    key_bits: u32,
    bucket_size: usize,
    policy: EvictionPolicy,
    buckets: Vec<VecDeque<NodeInfo>>,
}

impl RoutingTable {
    /// # Panics
    /// If `bucket_size` is zero or `key_bits` is outside `1..=64`.
    pub fn new(owner: Key, key_bits: u32, bucket_size: usize, policy: EvictionPolicy) -> Self {
        assert!(bucket_size > 0, "bucket size must be positive");
        assert!((1..=64).contains(&key_bits), "key_bits must be in 1..=64");
        RoutingTable {
            owner,
            key_bits,
            bucket_size,
            policy,
            buckets: vec![VecDeque::new(); key_bits as usize],
        }
    }

    pub fn owner(&self) -> Key {
        self.owner
    }

    pub fn bucket_size(&self) -> usize {
        self.bucket_size
    }

    pub fn key_bits(&self) -> u32 {
        self.key_bits
    }

    pub fn policy(&self) -> EvictionPolicy {
        self.policy
    }

    pub fn insert(&mut self, contact: NodeInfo) -> InsertOutcome {
        if !contact.key.fits(self.key_bits) {
            return InsertOutcome::Ignored;
        }
        let Some(index) = bucket_index(self.owner, contact.key) else {
            return InsertOutcome::Ignored;
        };
        let bucket = &mut self.buckets[index];
        if let Some(pos) = bucket.iter().position(|c| c.key == contact.key) {
            bucket.remove(pos);
            bucket.push_back(contact);
            return InsertOutcome::Refreshed;
        }
        if bucket.len() < self.bucket_size {
            bucket.push_back(contact);
            return InsertOutcome::Added;
        }
        match self.policy {
            EvictionPolicy::DropNewcomer => InsertOutcome::Dropped,
            EvictionPolicy::ReplaceLeastRecent => {
                let evicted = bucket.pop_front().expect("full bucket is non-empty");
                bucket.push_back(contact);
                InsertOutcome::Replaced(evicted)
            }
        }
    }

    pub fn remove(&mut self, key: Key) -> Option<NodeInfo> {
        let bucket = &mut self.buckets[bucket_index(self.owner, key)?];
        let pos = bucket.iter().position(|c| c.key == key)?;
        bucket.remove(pos)
    }

    pub fn contains(&self, key: Key) -> bool {
        bucket_index(self.owner, key)
            .and_then(|i| self.buckets.get(i))
            .is_some_and(|b| b.iter().any(|c| c.key == key))
    }

    pub fn bucket(&self, index: usize) -> impl Iterator<Item = &NodeInfo> {
        self.buckets.get(index).into_iter().flatten()
    }

    /// All contacts, bucket 0 first.
    pub fn contacts(&self) -> Vec<NodeInfo> {
        self.buckets.iter().flatten().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.iter().all(VecDeque::is_empty)
    }

    /// Up to `n` contacts ordered by XOR distance to `target`.
    pub fn closest(&self, target: Key, n: usize) -> Vec<NodeInfo> {
        let mut all: Vec<&NodeInfo> = self.buckets.iter().flatten().collect();
        all.sort_unstable_by_key(|c| c.key.distance(target));
        all.into_iter().take(n).cloned().collect()
    }

    /// Checks placement, capacity, owner exclusion and uniqueness.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen = std::collections::HashSet::new();
        for (i, bucket) in self.buckets.iter().enumerate() {
            if bucket.len() > self.bucket_size {
                return Err(format!(
                    "bucket {i} holds {} contacts, capacity {}",
                    bucket.len(),
                    self.bucket_size
                ));
            }
            for c in bucket {
                if c.key == self.owner {
                    return Err(format!("owner {} stored in bucket {i}", self.owner));
                }
                if bucket_index(self.owner, c.key) != Some(i) {
                    return Err(format!("contact {} misplaced in bucket {i}", c.key));
                }
                if !seen.insert(c.key) {
                    return Err(format!("duplicate contact {}", c.key));
                }
            }
        }
        Ok(())
    }
}
