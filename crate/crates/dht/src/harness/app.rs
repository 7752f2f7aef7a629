use std::sync::Mutex;
use std::time::{Duration, Instant};

use dwharness_core::{App, AppFactory, Environment, EnvironmentHandle, RemoteProcess};

use crate::client::NodeClient;
use crate::error::DhtError;
use crate::key::Key;
use crate::routing::NodeInfo;

/// Environment property holding `host:port` of the instance's HTTP API.
pub const HTTP_ADDRESS: &str = "http_address";
/// Environment property holding `host:port` of the instance's UDP socket.
pub const UDP_ADDRESS: &str = "udp_address";
/// Environment property holding the instance's key.
pub const DHT_KEY: &str = "dht_key";

pub const NODE_BINARY: &str = "bin/dht-node";
pub const NODE_CONFIG: &str = "node.json";

/// What the DHT scripts need from an instance.
pub trait DhtInstance: Send + Sync {
    fn key(&self) -> Key;
    fn label(&self) -> String;
    /// Launches the daemon and waits until its control API answers.
    fn start_up(&self) -> Result<(), DhtError>;
    fn start_routing(&self) -> Result<(), DhtError>;
    fn routing_table(&self) -> Result<Vec<Key>, DhtError>;
    fn find_nodes(&self, key: Key) -> Result<Vec<NodeInfo>, DhtError>;
    fn put(&self, key: Key, value: &[u8]) -> Result<Vec<Key>, DhtError>;
    fn get(&self, key: Key) -> Result<Option<Vec<u8>>, DhtError>;
    /// Stops the daemon; safe to call repeatedly.
    fn shut_down(&self);
}

/// Proxy for one daemon running in an environment.
pub struct DhtApp {
    id: usize,
    name: String,
    key: Key,
    env: EnvironmentHandle,
    client: NodeClient,
    startup_timeout: Duration,
    process: Mutex<Option<RemoteProcess>>,
}

impl DhtApp {
    pub fn new(
        env: EnvironmentHandle,
        key: Key,
        http_address: &str,
        startup_timeout: Duration,
    ) -> Self {
        DhtApp {
            id: env.id(),
            name: format!("dht-{}@{}", key, env.name()),
            key,
            client: NodeClient::new(http_address, Duration::from_secs(10)),
            env,
            startup_timeout,
            process: Mutex::new(None),
        }
    }

    pub fn client(&self) -> &NodeClient {
        &self.client
    }

    pub fn process(&self) -> Option<RemoteProcess> {
        self.process.lock().unwrap().clone()
    }

    fn start_error(&self, message: impl Into<String>) -> DhtError {
        DhtError::Start {
            instance: self.name.clone(),
            message: message.into(),
        }
    }

    fn require_process(&self) -> Result<(), DhtError> {
        match &*self.process.lock().unwrap() {
            Some(p) if p.is_running() => Ok(()),
            _ => Err(self.start_error("daemon is not running")),
        }
    }
}

impl std::fmt::Debug for DhtApp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DhtApp")
            .field("name", &self.name)
            .field("uri", &self.client.base())
            .finish_non_exhaustive()
    }
}

impl App for DhtApp {
    fn id(&self) -> usize {
        self.id
    }

    fn name(&self) -> &str {
        &self.name
    }
}

impl DhtInstance for DhtApp {
    fn key(&self) -> Key {
        self.key
    }

    fn label(&self) -> String {
        self.name.clone()
    }

    fn start_up(&self) -> Result<(), DhtError> {
        let mut slot = self.process.lock().unwrap();
        if slot.as_ref().is_some_and(RemoteProcess::is_running) {
            return Ok(());
        }
        let command: Vec<String> = [NODE_BINARY, "--config", NODE_CONFIG]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let process = self
            .env
            .run_command_async(&command)
            .map_err(|e| self.start_error(e.to_string()))?;
        *slot = Some(process.clone());
        drop(slot);

        let deadline = Instant::now() + self.startup_timeout;
        loop {
            if self.client.status().is_ok() {
                log::info!("{} is up", self.name);
                return Ok(());
            }
            if let Ok(Some(status)) = process.try_wait() {
                return Err(self.start_error(format!(
                    "daemon exited with {status} before answering; see {}",
                    process.stderr_path()
                )));
            }
            if Instant::now() >= deadline {
                let _ = process.kill();
                return Err(self.start_error(format!(
                    "control API at {} not reachable within {:?}",
                    self.client.base(),
                    self.startup_timeout
                )));
            }
            std::thread::sleep(Duration::from_millis(100));
        }
    }

    fn start_routing(&self) -> Result<(), DhtError> {
        self.require_process()?;
        self.client.start()
    }

    fn routing_table(&self) -> Result<Vec<Key>, DhtError> {
        Ok(self
            .client
            .routing_table()?
            .into_iter()
            .map(|c| c.key)
            .collect())
    }

    fn find_nodes(&self, key: Key) -> Result<Vec<NodeInfo>, DhtError> {
        self.client.find_nodes(key)
    }

    fn put(&self, key: Key, value: &[u8]) -> Result<Vec<Key>, DhtError> {
        self.client.put(key, value)
    }

    fn get(&self, key: Key) -> Result<Option<Vec<u8>>, DhtError> {
        self.client.get(key)
    }

    fn shut_down(&self) {
        let Some(process) = self.process.lock().unwrap().take() else {
            return;
        };
        if process.is_running() {
            if let Err(e) = self.client.shutdown() {
                log::debug!("{}: shutdown request failed: {e}", self.name);
            }
            if !matches!(process.wait_timeout(Duration::from_secs(5)), Ok(Some(_))) {
                log::warn!("{} did not exit after shutdown; killing it", self.name);
                let _ = process.kill();
            }
        }
    }
}

impl Drop for DhtApp {
    fn drop(&mut self) {
        self.shut_down();
    }
}

/// Builds one [`DhtApp`] per environment from the properties the DHT
/// preparator set.
#[derive(Clone, Debug)]
pub struct DhtAppFactory {
    pub startup_timeout: Duration,
}

impl Default for DhtAppFactory {
    fn default() -> Self {
        DhtAppFactory {
            startup_timeout: Duration::from_secs(10),
        }
    }
}

pub(crate) fn env_key(env: &dyn Environment) -> dwharness_core::Result<Key> {
    match env.property(DHT_KEY) {
        None => Ok(Key::from_raw(env.id() as u64)),
        Some(raw) => raw.parse().map(Key::from_raw).map_err(|_| {
            dwharness_core::Error::Config(format!(
                "environment {} has a non-numeric {DHT_KEY} property {raw:?}",
                env.name()
            ))
        }),
    }
}

impl AppFactory<DhtApp> for DhtAppFactory {
    fn create_apps(&self, envs: &[EnvironmentHandle]) -> dwharness_core::Result<Vec<DhtApp>> {
        envs.iter()
            .map(|env| {
                let address = env.property(HTTP_ADDRESS).ok_or_else(|| {
                    dwharness_core::Error::Config(format!(
                        "environment {} has no {HTTP_ADDRESS} property; it was not prepared for the DHT",
                        env.name()
                    ))
                })?;
                let key = env_key(env.as_ref())?;
                Ok(DhtApp::new(env.clone(), key, &address, self.startup_timeout))
            })
            .collect()
    }
}
