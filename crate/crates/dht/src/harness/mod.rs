//! Harness bindings: the App proxy, the preparator and the test scripts.

mod app;
mod deploy;
mod scripts;

pub use app::{
    DhtApp, DhtAppFactory, DhtInstance, DHT_KEY, HTTP_ADDRESS, NODE_BINARY, NODE_CONFIG,
    UDP_ADDRESS,
};
pub use deploy::{DhtParams, DhtPreparator, DEFAULT_REMOTE_BASE_PORT};
pub use scripts::{
    connection_graph, ConsistencyParams, ConsistencyTestScript, PutGetParams, PutGetTestScript,
    CONSISTENCY, CONSISTENT, PUT_GET, STARTUP_FAILED,
};
