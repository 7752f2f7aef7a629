use serde::{Deserialize, Serialize};

use crate::key::Key;
use crate::routing::NodeInfo;

/// Largest payload that fits in one UDP datagram.
pub const MAX_DATAGRAM: usize = 65_507;

/// One datagram of the node-to-node protocol. `id` pairs replies with
/// requests.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Message {
    FindNode {
        id: u64,
        sender: NodeInfo,
        target: Key,
    },
    FindNodeReply {
        id: u64,
        sender: NodeInfo,
        contacts: Vec<NodeInfo>,
    },
    Ping {
        id: u64,
        sender: NodeInfo,
    },
    Pong {
        id: u64,
        sender: NodeInfo,
    },
    Store {
        id: u64,
        sender: NodeInfo,
        key: Key,
        value: Vec<u8>,
    },
    StoreReply {
        id: u64,
        sender: NodeInfo,
    },
    FindValue {
        id: u64,
        sender: NodeInfo,
        key: Key,
    },
    FindValueReply {
        id: u64,
        sender: NodeInfo,
        value: Option<Vec<u8>>,
    },
}

impl Message {
    pub fn id(&self) -> u64 {
        match self {
            Message::FindNode { id, .. }
            | Message::FindNodeReply { id, .. }
            | Message::Ping { id, .. }
            | Message::Pong { id, .. }
            | Message::Store { id, .. }
            | Message::StoreReply { id, .. }
            | Message::FindValue { id, .. }
            | Message::FindValueReply { id, .. } => *id,
        }
    }

    pub fn sender(&self) -> &NodeInfo {
        match self {
            Message::FindNode { sender, .. }
            | Message::FindNodeReply { sender, .. }
            | Message::Ping { sender, .. }
            | Message::Pong { sender, .. }
            | Message::Store { sender, .. }
            | Message::StoreReply { sender, .. }
            | Message::FindValue { sender, .. }
            | Message::FindValueReply { sender, .. } => sender,
        }
    }

    pub fn is_request(&self) -> bool {
        matches!(
            self,
            Message::FindNode { .. }
                | Message::Ping { .. }
                | Message::Store { .. }
                | Message::FindValue { .. }
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("messages always serialize")
    }

    pub fn decode(bytes: &[u8]) -> Option<Message> {
        serde_json::from_slice(bytes).ok()
    }
}
