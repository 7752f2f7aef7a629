use std::time::Duration;

use serde::de::DeserializeOwned;
use ureq::Agent;

use crate::error::DhtError;
use crate::key::Key;
use crate::routing::NodeInfo;

/// Blocking client for one node's HTTP API.
#[derive(Clone)]
pub struct NodeClient {
    base: String,
    agent: Agent,
}

/// `/status` as seen by a client.
#[derive(Clone, Debug, serde::Deserialize)]
pub struct RemoteStatus {
    pub key: Key,
    pub address: String,
    pub state: String,
    pub contacts: usize,
    pub bucket_size: usize,
    pub malformed_datagrams: u64,
}

impl NodeClient {
    /// `base` is `http://host:port`; a bare `host:port` is accepted too.
    pub fn new(base: &str, timeout: Duration) -> Self {
        let base = if base.contains("://") {
            base.trim_end_matches('/').to_string()
        } else {
            format!("http://{}", base.trim_end_matches('/'))
        };
        let agent = Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        NodeClient { base, agent }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn uri(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn finish(
        uri: String,
        result: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<(u16, Vec<u8>), DhtError> {
        let mut response = result.map_err(|e| DhtError::Http {
            uri: uri.clone(),
            message: e.to_string(),
        })?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_vec()
            .map_err(|e| DhtError::Http {
                uri,
                message: e.to_string(),
            })?;
        Ok((status, body))
    }

    fn expect_ok(uri: String, (status, body): (u16, Vec<u8>)) -> Result<Vec<u8>, DhtError> {
        if status == 200 {
            Ok(body)
        } else {
            Err(DhtError::Status {
                uri,
                status,
                body: String::from_utf8_lossy(&body).into_owned(),
            })
        }
    }

    fn get_json<T: DeserializeOwned>(&self, path: &str) -> Result<T, DhtError> {
        let uri = self.uri(path);
        let reply = Self::finish(uri.clone(), self.agent.get(&uri).call())?;
        let body = Self::expect_ok(uri.clone(), reply)?;
        serde_json::from_slice(&body).map_err(|e| DhtError::Http {
            uri,
            message: format!("bad JSON: {e}"),
        })
    }

    fn post(&self, path: &str) -> Result<Vec<u8>, DhtError> {
        let uri = self.uri(path);
        let reply = Self::finish(uri.clone(), self.agent.post(&uri).send_empty())?;
        Self::expect_ok(uri, reply)
    }

    pub fn status(&self) -> Result<RemoteStatus, DhtError> {
        self.get_json("/status")
    }

    pub fn start(&self) -> Result<(), DhtError> {
        self.post("/start").map(drop)
    }

    pub fn shutdown(&self) -> Result<(), DhtError> {
        self.post("/shutdown").map(drop)
    }

    pub fn routing_table(&self) -> Result<Vec<NodeInfo>, DhtError> {
        self.get_json("/routing_table")
    }

    pub fn find_nodes(&self, key: Key) -> Result<Vec<NodeInfo>, DhtError> {
        self.get_json(&format!("/find_nodes/{key}"))
    }

    pub fn put(&self, key: Key, value: &[u8]) -> Result<Vec<Key>, DhtError> {
        #[derive(serde::Deserialize)]
        struct Stored {
            stored_on: Vec<Key>,
        }
        let uri = self.uri(&format!("/kv/{key}"));
        let reply = Self::finish(uri.clone(), self.agent.put(&uri).send(value))?;
        let body = Self::expect_ok(uri.clone(), reply)?;
        let stored: Stored = serde_json::from_slice(&body).map_err(|e| DhtError::Http {
            uri,
            message: format!("bad JSON: {e}"),
        })?;
        Ok(stored.stored_on)
    }

    /// `Ok(None)` when the key is absent.
    pub fn get(&self, key: Key) -> Result<Option<Vec<u8>>, DhtError> {
        let uri = self.uri(&format!("/kv/{key}"));
        let reply = Self::finish(uri.clone(), self.agent.get(&uri).call())?;
        if reply.0 == 404 {
            return Ok(None);
        }
        Self::expect_ok(uri, reply).map(Some)
    }

    /// Raw GET returning status and body.
    pub fn get_raw(&self, path: &str) -> Result<(u16, Vec<u8>), DhtError> {
        let uri = self.uri(path);
        Self::finish(uri.clone(), self.agent.get(&uri).call())
    }
}
