//! Transport-free node state shared by the daemon and the simulator.

use std::collections::HashMap;

use crate::key::Key;
use crate::lookup::Lookup;
use crate::message::Message;
use crate::routing::{EvictionPolicy, InsertOutcome, NodeInfo, RoutingTable};

#[derive(Debug)]
pub struct NodeCore {
    info: NodeInfo,
    table: RoutingTable,
    values: HashMap<Key, Vec<u8>>,
    started: bool,
}

impl NodeCore {
    pub fn new(info: NodeInfo, key_bits: u32, bucket_size: usize, policy: EvictionPolicy) -> Self {
        let table = RoutingTable::new(info.key, key_bits, bucket_size, policy);
        NodeCore {
            info,
            table,
            values: HashMap::new(),
            started: false,
        }
    }

    pub fn info(&self) -> &NodeInfo {
        &self.info
    }

    pub fn key(&self) -> Key {
        self.info.key
    }

    pub fn table(&self) -> &RoutingTable {
        &self.table
    }

    pub fn start(&mut self) -> bool {
        !std::mem::replace(&mut self.started, true)
    }

    pub fn is_started(&self) -> bool {
        self.started
    }

    pub fn observe(&mut self, contact: &NodeInfo) -> InsertOutcome {
        let outcome = self.table.insert(contact.clone());
        match &outcome {
            InsertOutcome::Added => log::debug!("{}: learned {}", self.info.key, contact.key),
            InsertOutcome::Replaced(old) => {
                log::debug!("{}: evicted {} for {}", self.info.key, old.key, contact.key)
            }
            _ => {}
        }
        outcome
    }

    /// Answers a request. The sender is recorded before the reply is
    /// computed, so it may appear in its own answer. Requests reaching a
    /// node whose routing has not started are ignored.
    pub fn handle_request(&mut self, request: &Message) -> Option<Message> {
        if !self.started || !request.is_request() {
            return None;
        }
        self.observe(request.sender());
        let id = request.id();
        let sender = self.info.clone();
        let k = self.table.bucket_size();
        Some(match request {
            Message::FindNode { target, .. } => Message::FindNodeReply {
                id,
                sender,
                contacts: self.table.closest(*target, k),
            },
            Message::Ping { .. } => Message::Pong { id, sender },
            Message::Store { key, value, .. } => {
                self.values.insert(*key, value.clone());
                Message::StoreReply { id, sender }
            }
            Message::FindValue { key, .. } => Message::FindValueReply {
                id,
                sender,
                value: self.values.get(key).cloned(),
            },
            _ => unreachable!("is_request checked above"),
        })
    }

    /// A lookup seeded from this node's own table.
    pub fn lookup(&self, target: Key) -> Lookup {
        let k = self.table.bucket_size();
        Lookup::new(self.key(), target, k, self.table.closest(target, k))
    }

    /// Whether this node ranks among the `k` closest to `target` relative to
    /// the given lookup result.
    pub fn is_among_closest(&self, target: Key, result: &[NodeInfo]) -> bool {
        let k = self.table.bucket_size();
        let mine = self.key().distance(target);
        result
            .iter()
            .filter(|c| c.key.distance(target) < mine)
            .count()
            < k
    }

    /// Merges this node into a lookup result when it belongs among the k
    /// closest.
    pub fn with_self(&self, target: Key, mut result: Vec<NodeInfo>) -> Vec<NodeInfo> {
        if !result.iter().any(|c| c.key == self.key()) {
            result.push(self.info.clone());
        }
        result.sort_by_key(|c| c.key.distance(target));
        result.truncate(self.table.bucket_size());
        result
    }

    pub fn store_local(&mut self, key: Key, value: Vec<u8>) {
        self.values.insert(key, value);
    }

    pub fn get_local(&self, key: Key) -> Option<&Vec<u8>> {
        self.values.get(&key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(k: u64, bucket: usize) -> NodeCore {
        NodeCore::new(
            NodeInfo::new(Key::from_raw(k), format!("n{k}")),
            4,
            bucket,
            EvictionPolicy::ReplaceLeastRecent,
        )
    }

    #[test]
    fn idle_nodes_stay_silent() {
        let mut n = node(1, 20);
        let ping = Message::Ping {
            id: 9,
            sender: NodeInfo::new(Key::from_raw(2), "n2"),
        };
        assert_eq!(n.handle_request(&ping), None);
        assert!(n.table().is_empty());
        assert!(n.start());
        assert!(!n.start());
        assert!(matches!(
            n.handle_request(&ping),
            Some(Message::Pong { id: 9, .. })
        ));
        assert!(n.table().contains(Key::from_raw(2)));
    }

    #[test]
    fn requester_can_appear_in_reply() {
        let mut n = node(0, 1);
        n.start();
        let req = Message::FindNode {
            id: 1,
            sender: NodeInfo::new(Key::from_raw(5), "n5"),
            target: Key::from_raw(5),
        };
        let Some(Message::FindNodeReply { contacts, .. }) = n.handle_request(&req) else {
            panic!("expected a reply");
        };
        assert_eq!(contacts, [NodeInfo::new(Key::from_raw(5), "n5")]);
    }

    #[test]
    fn self_merge_respects_k() {
        let n = node(0, 2);
        let r = vec![
            NodeInfo::new(Key::from_raw(1), "n1"),
            NodeInfo::new(Key::from_raw(2), "n2"),
        ];
        let target = Key::from_raw(3);
        assert!(!n.is_among_closest(target, &r));
        let merged: Vec<u64> = n
            .with_self(target, r)
            .iter()
            .map(|c| c.key.value())
            .collect();
        assert_eq!(merged, [2, 1]);
    }
}
