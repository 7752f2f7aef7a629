use std::net::IpAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::DhtError;
use crate::key::{Key, DEFAULT_KEY_BITS, MAX_KEY_BITS};
use crate::routing::{EvictionPolicy, DEFAULT_BUCKET_SIZE};

fn default_bucket_size() -> usize {
    DEFAULT_BUCKET_SIZE
}
fn default_key_bits() -> u32 {
    DEFAULT_KEY_BITS
}
fn default_refresh_interval_ms() -> u64 {
    5000
}
fn default_rpc_timeout_ms() -> u64 {
    500
}
fn default_listen_host() -> String {
    "127.0.0.1".into()
}

/// Per-instance daemon configuration, read from a JSON file. A port of 0
/// lets the OS choose.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub key: u64,
    pub udp_port: u16,
    pub http_port: u16,
    #[serde(default = "default_bucket_size")]
    pub bucket_size: usize,
    #[serde(default)]
    pub bootstrap_address: Option<String>,
    #[serde(default = "default_key_bits")]
    pub key_bits: u32,
    #[serde(default = "default_refresh_interval_ms")]
    pub refresh_interval_ms: u64,
    #[serde(default = "default_rpc_timeout_ms")]
    pub rpc_timeout_ms: u64,
    #[serde(default)]
    pub eviction: EvictionPolicy,
    #[serde(default = "default_listen_host")]
    pub listen_host: String,
    /// Host put in this node's contact info; defaults to `listen_host`.
    #[serde(default)]
    pub advertise_host: Option<String>,
    /// Relative to the daemon's working directory.
    #[serde(default)]
    pub log_file: Option<PathBuf>,
}

impl NodeConfig {
    pub fn new(key: u64) -> Self {
        NodeConfig {
            key,
            udp_port: 0,
            http_port: 0,
            bucket_size: default_bucket_size(),
            bootstrap_address: None,
            key_bits: default_key_bits(),
            refresh_interval_ms: default_refresh_interval_ms(),
            rpc_timeout_ms: default_rpc_timeout_ms(),
            eviction: EvictionPolicy::default(),
            listen_host: default_listen_host(),
            advertise_host: None,
            log_file: None,
        }
    }

    pub fn key(&self) -> Result<Key, DhtError> {
        Key::new(self.key, self.key_bits)
    }

    pub fn validate(&self) -> Result<(), DhtError> {
        let bad = |m: String| Err(DhtError::Config(m));
        if !(1..=MAX_KEY_BITS).contains(&self.key_bits) {
            return bad(format!(
                "key_bits must be in 1..={MAX_KEY_BITS}, got {}",
                self.key_bits
            ));
        }
        self.key()?;
        if self.bucket_size == 0 {
            return bad("bucket_size must be positive".into());
        }
        if self.refresh_interval_ms == 0 || self.rpc_timeout_ms == 0 {
            return bad("refresh_interval_ms and rpc_timeout_ms must be positive".into());
        }
        if self.udp_port != 0 && self.udp_port == self.http_port {
            return bad(format!("udp_port and http_port are both {}", self.udp_port));
        }
        if self.advertise_host.is_none()
            && self
                .listen_host
                .parse::<IpAddr>()
                .is_ok_and(|ip| ip.is_unspecified())
        {
            return bad(format!(
                "listen_host {} needs an advertise_host",
                self.listen_host
            ));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, DhtError> {
        let config: NodeConfig =
            serde_json::from_str(text).map_err(|e| DhtError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, DhtError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DhtError::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text).map_err(|e| match e {
            DhtError::Config(m) => DhtError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_validation() {
        let c = NodeConfig::parse(r#"{"key": 3, "udp_port": 4000, "http_port": 4001}"#).unwrap();
        assert_eq!(c.bucket_size, 20);
        assert_eq!(c.key_bits, 16);
        assert_eq!(c.eviction, EvictionPolicy::ReplaceLeastRecent);
        assert!(NodeConfig::parse(r#"{"key": 70000, "udp_port": 1, "http_port": 2}"#).is_err());
        assert!(NodeConfig::parse(r#"{"key": 1, "udp_port": 5, "http_port": 5}"#).is_err());
        assert!(
            NodeConfig::parse(r#"{"key": 1, "udp_port": 1, "http_port": 2, "bogus": 1}"#).is_err()
        );
        assert!(NodeConfig::parse(
            r#"{"key": 1, "udp_port": 1, "http_port": 2, "listen_host": "0.0.0.0"}"#
        )
        .is_err());
        let mut zero = NodeConfig::new(0);
        zero.bucket_size = 0;
        assert!(zero.validate().is_err());
    }
}
