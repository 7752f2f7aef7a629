//! A small Kademlia-style DHT used as the bundled application under test,
//! together with its harness bindings and the routing-table consistency
//! test.

pub mod client;
pub mod error;
pub mod graph;
pub mod harness;
pub mod key;
pub mod lookup;
pub mod message;
pub mod protocol;
pub mod routing;
pub mod sim;

pub use error::DhtError;
pub use graph::{
    check_consistency, strongly_connected_components, ConnectionGraph, ConsistencyResult,
    ConsistencyType,
};
pub use key::{bucket_index, Key};
pub use routing::{EvictionPolicy, InsertOutcome, NodeInfo, RoutingTable};
pub mod node;
