//! The node daemon: the routing protocol over UDP and a control API over
//! HTTP.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/status` | liveness, lifecycle state, bootstrap progress |
//! | POST | `/start` | start routing (idempotent) |
//! | GET | `/routing_table` | contacts, bucket 0 first |
//! | GET | `/find_nodes/{key}` | iterative lookup |
//! | PUT/GET | `/kv/{key}` | store and fetch a value |
//! | POST | `/shutdown` | close sockets and stop |

mod config;

pub use config::NodeConfig;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use tokio::net::{TcpListener, UdpSocket};
use tokio::sync::{oneshot, watch};

use crate::error::DhtError;
use crate::key::Key;
use crate::message::{Message, MAX_DATAGRAM};
use crate::protocol::NodeCore;
use crate::routing::NodeInfo;

/// Values must fit in one datagram together with the message envelope,
/// and JSON spends up to four bytes per value byte.
pub const MAX_VALUE_LEN: usize = 16 * 1024;

const MAX_BACKOFF: Duration = Duration::from_secs(5);

#[derive(Clone, Debug, Default, Serialize)]
pub struct BootstrapStatus {
    /// `none`, `joining`, `joined` or `retrying`.
    pub state: &'static str,
    pub failed_attempts: u64,
    pub last_error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct NodeStatus {
    pub key: Key,
    pub address: String,
    /// `idle` until routing starts, then `started`.
    pub state: &'static str,
    pub contacts: usize,
    pub bucket_size: usize,
    pub eviction: String,
    pub malformed_datagrams: u64,
    pub bootstrap: BootstrapStatus,
}

struct Shared {
    config: NodeConfig,
    core: Mutex<NodeCore>,
    socket: UdpSocket,
    pending: Mutex<HashMap<u64, oneshot::Sender<Message>>>,
    next_id: AtomicU64,
    malformed: AtomicU64,
    bootstrap: Mutex<BootstrapStatus>,
    shutdown: watch::Sender<bool>,
}

impl Shared {
    fn info(&self) -> NodeInfo {
        self.core.lock().unwrap().info().clone()
    }

    fn is_started(&self) -> bool {
        self.core.lock().unwrap().is_started()
    }

    async fn rpc(
        &self,
        address: &str,
        make: impl FnOnce(u64, NodeInfo) -> Message,
    ) -> Option<Message> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = oneshot::channel();
        self.pending.lock().unwrap().insert(id, tx);
        let request = make(id, self.info());
        let timeout = Duration::from_millis(self.config.rpc_timeout_ms);
        let outcome = match self.socket.send_to(&request.encode(), address).await {
            Ok(_) => tokio::time::timeout(timeout, rx)
                .await
                .ok()
                .and_then(Result::ok),
            Err(e) => {
                log::debug!("send to {address} failed: {e}");
                None
            }
        };
        self.pending.lock().unwrap().remove(&id);
        if let Some(reply) = &outcome {
            self.core.lock().unwrap().observe(reply.sender());
        }
        outcome
    }

    async fn find_node(&self, address: &str, target: Key) -> Option<(NodeInfo, Vec<NodeInfo>)> {
        match self
            .rpc(address, |id, sender| Message::FindNode {
                id,
                sender,
                target,
            })
            .await?
        {
            Message::FindNodeReply {
                sender, contacts, ..
            } => Some((sender, contacts)),
            _ => None,
        }
    }

    /// Iterative lookup seeded from the table, or from the bootstrap node
    /// while the table is empty. Returns the nodes that answered.
    async fn lookup(&self, target: Key) -> Vec<NodeInfo> {
        let mut lookup = self.core.lock().unwrap().lookup(target);
        if lookup.is_finished() {
            if let Some(bootstrap) = &self.config.bootstrap_address {
                if let Some((sender, contacts)) = self.find_node(bootstrap, target).await {
                    lookup.add_responded(sender, contacts);
                }
            }
        }
        while let Some(peer) = lookup.next_query() {
            match self.find_node(&peer.address, target).await {
                Some((_, contacts)) => lookup.on_reply(peer.key, contacts),
                None => lookup.on_failure(peer.key),
            }
        }
        lookup.result()
    }

    /// Self-lookup; joined once the table holds anyone (or when there is
    /// no one to join).
    async fn refresh(&self) -> bool {
        let own = self.info().key;
        self.lookup(own).await;
        self.config.bootstrap_address.is_none() || !self.core.lock().unwrap().table().is_empty()
    }

    async fn maintain(self: Arc<Self>) {
        let refresh = Duration::from_millis(self.config.refresh_interval_ms);
        let mut backoff = Duration::from_millis(200);
        loop {
            let joined = self.refresh().await;
            let pause = {
                let mut status = self.bootstrap.lock().unwrap();
                if joined {
                    if status.state != "none" {
                        status.state = "joined";
                    }
                    refresh
                } else {
                    status.state = "retrying";
                    status.failed_attempts += 1;
                    status.last_error = Some(format!(
                        "bootstrap {} did not answer",
                        self.config.bootstrap_address.as_deref().unwrap_or("-")
                    ));
                    log::warn!("{}", status.last_error.as_deref().unwrap_or_default());
                    let pause = backoff;
                    backoff = (backoff * 2).min(MAX_BACKOFF);
                    pause
                }
            };
            tokio::time::sleep(pause).await;
        }
    }

    async fn serve_udp(self: Arc<Self>) {
        let mut buf = vec![0u8; MAX_DATAGRAM + 1];
        loop {
            let (len, from) = match self.socket.recv_from(&mut buf).await {
                Ok(r) => r,
                Err(e) => {
                    // ICMP errors from earlier sends surface here on some platforms.
                    log::debug!("udp receive: {e}");
                    continue;
                }
            };
            let Some(message) = Message::decode(&buf[..len]) else {
                self.malformed.fetch_add(1, Ordering::Relaxed);
                log::debug!("malformed datagram from {from}");
                continue;
            };
            if message.is_request() {
                let reply = self.core.lock().unwrap().handle_request(&message);
                if let Some(reply) = reply {
                    if let Err(e) = self.socket.send_to(&reply.encode(), from).await {
                        log::debug!("reply to {from} failed: {e}");
                    }
                }
            } else if let Some(waiter) = self.pending.lock().unwrap().remove(&message.id()) {
                let _ = waiter.send(message);
            }
        }
    }

    fn status(&self) -> NodeStatus {
        let core = self.core.lock().unwrap();
        NodeStatus {
            key: core.key(),
            address: core.info().address.clone(),
            state: if core.is_started() { "started" } else { "idle" },
            contacts: core.table().len(),
            bucket_size: core.table().bucket_size(),
            eviction: core.table().policy().to_string(),
            malformed_datagrams: self.malformed.load(Ordering::Relaxed),
            bootstrap: self.bootstrap.lock().unwrap().clone(),
        }
    }
}

type AppState = Arc<Shared>;

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, message.into()).into_response()
}

type Rejection = (StatusCode, String);

fn parse_key(shared: &Shared, raw: &str) -> Result<Key, Rejection> {
    raw.parse::<u64>()
        .map_err(|_| format!("not a key: {raw:?}"))
        .and_then(|v| Key::new(v, shared.config.key_bits).map_err(|e| e.to_string()))
        .map_err(|m| (StatusCode::BAD_REQUEST, m))
}

fn require_started(shared: &Shared) -> Result<(), Rejection> {
    if shared.is_started() {
        Ok(())
    } else {
        Err((StatusCode::CONFLICT, "routing not started".into()))
    }
}

async fn status(State(s): State<AppState>) -> Json<NodeStatus> {
    Json(s.status())
}

async fn start(State(s): State<AppState>) -> Json<NodeStatus> {
    let first = s.core.lock().unwrap().start();
    if first {
        log::info!("routing started");
        s.bootstrap.lock().unwrap().state = if s.config.bootstrap_address.is_some() {
            "joining"
        } else {
            "none"
        };
        let mut stop = s.shutdown.subscribe();
        let shared = s.clone();
        tokio::spawn(async move {
            tokio::select! {
                _ = shared.maintain() => {}
                _ = stop.wait_for(|v| *v) => {}
            }
        });
    }
    Json(s.status())
}

async fn routing_table(State(s): State<AppState>) -> Json<Vec<NodeInfo>> {
    Json(s.core.lock().unwrap().table().contacts())
}

async fn find_nodes(State(s): State<AppState>, Path(raw): Path<String>) -> Response {
    let target = match require_started(&s).and_then(|_| parse_key(&s, &raw)) {
        Ok(t) => t,
        Err(r) => return r.into_response(),
    };
    let found = s.lookup(target).await;
    let found = s.core.lock().unwrap().with_self(target, found);
    Json(found).into_response()
}

#[derive(Serialize)]
struct Stored {
    stored_on: Vec<Key>,
}

async fn put_value(State(s): State<AppState>, Path(raw): Path<String>, body: Bytes) -> Response {
    let key = match require_started(&s).and_then(|_| parse_key(&s, &raw)) {
        Ok(k) => k,
        Err(r) => return r.into_response(),
    };
    if body.len() > MAX_VALUE_LEN {
        return error(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("values are limited to {MAX_VALUE_LEN} bytes"),
        );
    }
    let closest = s.lookup(key).await;
    let mut stored_on = Vec::new();
    for node in &closest {
        let value = body.to_vec();
        let reply = s
            .rpc(&node.address, |id, sender| Message::Store {
                id,
                sender,
                key,
                value,
            })
            .await;
        if matches!(reply, Some(Message::StoreReply { .. })) {
            stored_on.push(node.key);
        }
    }
    {
        let mut core = s.core.lock().unwrap();
        if core.is_among_closest(key, &closest) {
            core.store_local(key, body.to_vec());
            stored_on.push(core.key());
        }
    }
    stored_on.sort_by_key(|k| k.distance(key));
    Json(Stored { stored_on }).into_response()
}

async fn get_value(State(s): State<AppState>, Path(raw): Path<String>) -> Response {
    let key = match require_started(&s).and_then(|_| parse_key(&s, &raw)) {
        Ok(k) => k,
        Err(r) => return r.into_response(),
    };
    if let Some(v) = s.core.lock().unwrap().get_local(key) {
        return v.clone().into_response();
    }
    for node in s.lookup(key).await {
        let reply = s
            .rpc(&node.address, |id, sender| Message::FindValue {
                id,
                sender,
                key,
            })
            .await;
        if let Some(Message::FindValueReply { value: Some(v), .. }) = reply {
            return v.into_response();
        }
    }
    error(StatusCode::NOT_FOUND, format!("no value for key {key}"))
}

async fn shutdown(State(s): State<AppState>) -> &'static str {
    log::info!("shutdown requested");
    s.shutdown.send_replace(true);
    "shutting down"
}

fn router(shared: AppState) -> Router {
    Router::new()
        .route("/status", get(status))
        .route("/start", post(start))
        .route("/routing_table", get(routing_table))
        .route("/find_nodes/{key}", get(find_nodes))
        .route("/kv/{key}", get(get_value).put(put_value))
        .route("/shutdown", post(shutdown))
        .with_state(shared)
}

/// A daemon running on its own runtime thread.
pub struct RunningNode {
    http_addr: SocketAddr,
    udp_addr: SocketAddr,
    shutdown: watch::Sender<bool>,
    thread: std::thread::JoinHandle<Result<(), DhtError>>,
}

impl RunningNode {
    pub fn http_addr(&self) -> SocketAddr {
        self.http_addr
    }

    pub fn udp_addr(&self) -> SocketAddr {
        self.udp_addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.http_addr)
    }

    /// Blocks until the node stops, normally after `POST /shutdown`.
    pub fn wait(self) -> Result<(), DhtError> {
        self.thread
            .join()
            .unwrap_or_else(|_| Err(DhtError::Config("node thread panicked".into())))
    }

    pub fn stop(self) -> Result<(), DhtError> {
        self.shutdown.send_replace(true);
        self.wait()
    }
}

struct Bound {
    http: SocketAddr,
    udp: SocketAddr,
    shutdown: watch::Sender<bool>,
}

/// Binds both sockets and serves on a background thread. Returns once the
/// sockets are bound.
pub fn spawn(config: NodeConfig) -> Result<RunningNode, DhtError> {
    config.validate()?;
    let (ready_tx, ready_rx) = std::sync::mpsc::channel();
    let thread = std::thread::Builder::new()
        .name(format!("dht-node-{}", config.key))
        .spawn(move || {
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .map_err(|e| DhtError::io("starting runtime", e))?;
            let result = runtime.block_on(serve(config, ready_tx));
            runtime.shutdown_timeout(Duration::from_secs(1));
            result
        })
        .map_err(|e| DhtError::io("spawning node thread", e))?;
    match ready_rx.recv() {
        Ok(bound) => Ok(RunningNode {
            http_addr: bound.http,
            udp_addr: bound.udp,
            shutdown: bound.shutdown,
            thread,
        }),
        Err(_) => Err(thread
            .join()
            .unwrap_or_else(|_| Err(DhtError::Config("node thread panicked".into())))
            .err()
            .unwrap_or_else(|| DhtError::Config("node stopped before binding".into()))),
    }
}

/// Runs a node until it is told to shut down.
pub fn run(config: NodeConfig) -> Result<(), DhtError> {
    spawn(config)?.wait()
}

async fn serve(config: NodeConfig, ready: std::sync::mpsc::Sender<Bound>) -> Result<(), DhtError> {
    let host = config.listen_host.as_str();
    let socket = UdpSocket::bind((host, config.udp_port))
        .await
        .map_err(|e| DhtError::io(format!("binding udp {host}:{}", config.udp_port), e))?;
    let listener = TcpListener::bind((host, config.http_port))
        .await
        .map_err(|e| DhtError::io(format!("binding http {host}:{}", config.http_port), e))?;
    let udp = socket
        .local_addr()
        .map_err(|e| DhtError::io("udp address", e))?;
    let http = listener
        .local_addr()
        .map_err(|e| DhtError::io("http address", e))?;
    let advertised = config.advertise_host.as_deref().unwrap_or(host);
    let info = NodeInfo::new(config.key()?, format!("{advertised}:{}", udp.port()));
    let core = NodeCore::new(info, config.key_bits, config.bucket_size, config.eviction);
    let (shutdown, mut stop) = watch::channel(false);
    let shared = Arc::new(Shared {
        core: Mutex::new(core),
        socket,
        pending: Mutex::new(HashMap::new()),
        next_id: AtomicU64::new(1),
        malformed: AtomicU64::new(0),
        bootstrap: Mutex::new(BootstrapStatus {
            state: "none",
            ..Default::default()
        }),
        shutdown: shutdown.clone(),
        config,
    });
    let udp_task = tokio::spawn(shared.clone().serve_udp());
    log::info!(
        "node {} listening: http {http}, udp {udp}",
        shared.info().key
    );
    let _ = ready.send(Bound {
        http,
        udp,
        shutdown,
    });
    let served = axum::serve(listener, router(shared))
        .with_graceful_shutdown(async move {
            let _ = stop.wait_for(|v| *v).await;
        })
        .await;
    udp_task.abort();
    log::info!("stopped");
    served.map_err(|e| DhtError::io("serving http", e))
}
