use std::collections::BTreeMap;
use std::net::{IpAddr, TcpListener, UdpSocket};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use dwharness_core::runner::AppParams;
use dwharness_core::{
    DependencyManifest, EnvFailure, Environment, EnvironmentHandle, EnvironmentPreparator,
    ManifestPreparator, PerEnvItem,
};

use super::app::{env_key, DHT_KEY, HTTP_ADDRESS, NODE_BINARY, NODE_CONFIG, UDP_ADDRESS};
use crate::key::DEFAULT_KEY_BITS;
use crate::node::NodeConfig;
use crate::routing::{EvictionPolicy, DEFAULT_BUCKET_SIZE};

/// Port base used for non-loopback hosts when none is configured.
pub const DEFAULT_REMOTE_BASE_PORT: u16 = 40_000;

/// Deployment parameters, read from the runner's `app_params`.
#[derive(Clone, Debug, PartialEq)]
pub struct DhtParams {
    pub bucket_size: usize,
    pub key_bits: u32,
    pub refresh_interval_ms: u64,
    pub rpc_timeout_ms: u64,
    pub eviction: EvictionPolicy,
    /// Instance `i` gets UDP port `base + 2i` and HTTP port `base + 2i + 1`.
    /// 0 picks free ports on the testmaster, which only makes sense for
    /// loopback hosts.
    pub base_port: u16,
}

impl Default for DhtParams {
    fn default() -> Self {
        DhtParams {
            bucket_size: DEFAULT_BUCKET_SIZE,
            key_bits: DEFAULT_KEY_BITS,
            refresh_interval_ms: 5000,
            rpc_timeout_ms: 500,
            eviction: EvictionPolicy::default(),
            base_port: 0,
        }
    }
}

fn field(name: &str, message: impl Into<String>) -> dwharness_core::Error {
    dwharness_core::Error::ConfigField {
        field: format!("app_params.{name}"),
        message: message.into(),
    }
}

impl DhtParams {
    pub fn from_app_params(p: &AppParams) -> dwharness_core::Result<Self> {
        let d = DhtParams::default();
        let bucket_size = p.u64_or("bucket_size", d.bucket_size as u64)?;
        if bucket_size == 0 {
            return Err(field("bucket_size", "must be positive"));
        }
        let key_bits = p.u64_or("key_bits", d.key_bits as u64)?;
        if !(1..=64).contains(&key_bits) {
            return Err(field("key_bits", "must be in 1..=64"));
        }
        let base_port = p.u64_or("base_port", d.base_port as u64)?;
        let base_port = u16::try_from(base_port).map_err(|_| field("base_port", "not a port"))?;
        let eviction = match p.str("eviction")? {
            None => d.eviction,
            Some(s) => s.parse().map_err(|m: String| field("eviction", m))?,
        };
        let positive = |name: &str, default: u64| -> dwharness_core::Result<u64> {
            match p.u64_or(name, default)? {
                0 => Err(field(name, "must be positive")),
                v => Ok(v),
            }
        };
        Ok(DhtParams {
            bucket_size: bucket_size as usize,
            key_bits: key_bits as u32,
            refresh_interval_ms: positive("refresh_interval_ms", d.refresh_interval_ms)?,
            rpc_timeout_ms: positive("rpc_timeout_ms", d.rpc_timeout_ms)?,
            eviction,
            base_port,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Endpoints {
    host: String,
    udp_port: u16,
    http_port: u16,
}

fn is_loopback(host: &str) -> bool {
    host == "localhost" || host.parse::<IpAddr>().is_ok_and(|ip| ip.is_loopback())
}

fn free_ports(host: &str) -> std::io::Result<(u16, u16)> {
    let udp = UdpSocket::bind((host, 0))?;
    let tcp = TcpListener::bind((host, 0))?;
    Ok((udp.local_addr()?.port(), tcp.local_addr()?.port()))
}

fn port_for(base: u16, offset: usize) -> dwharness_core::Result<u16> {
    u16::try_from(base as usize + offset).map_err(|_| {
        field(
            "base_port",
            format!("too high for {} instances", offset / 2 + 1),
        )
    })
}

/// Deploys the node binary once per suite and a generated `node.json` per
/// instance: key = environment id, star bootstrap through the lowest id.
/// Sets the `http_address`, `udp_address` and `dht_key` properties.
pub struct DhtPreparator {
    params: DhtParams,
    inner: ManifestPreparator,
    plan: Arc<Mutex<BTreeMap<usize, Endpoints>>>,
}

impl DhtPreparator {
    pub fn new(node_binary: impl Into<PathBuf>, params: DhtParams) -> Self {
        let plan: Arc<Mutex<BTreeMap<usize, Endpoints>>> = Arc::default();
        let per_env_plan = plan.clone();
        let per_env_params = params.clone();
        let manifest = DependencyManifest::new()
            .read_only(node_binary, NODE_BINARY)
            .per_env(move |env| {
                node_config_item(env, &per_env_params, &per_env_plan.lock().unwrap())
            })
            .output("logs")
            .output(dwharness_core::environment::COMMAND_LOG_DIR);
        DhtPreparator {
            params,
            inner: ManifestPreparator::new(manifest),
            plan,
        }
    }

    pub fn params(&self) -> &DhtParams {
        &self.params
    }

    pub fn manifest_preparator(&self) -> &ManifestPreparator {
        &self.inner
    }

    fn plan_endpoints(&self, envs: &[EnvironmentHandle]) -> dwharness_core::Result<()> {
        let mut plan = self.plan.lock().unwrap();
        for env in envs {
            if plan.contains_key(&env.id()) {
                continue;
            }
            let host = env
                .property(dwharness_core::environment::HOST_PROPERTY)
                .unwrap_or_else(|| "127.0.0.1".into());
            let base = match self.params.base_port {
                0 if !is_loopback(&host) => DEFAULT_REMOTE_BASE_PORT,
                b => b,
            };
            let (udp_port, http_port) = if base == 0 {
                free_ports(&host).map_err(|e| {
                    dwharness_core::Error::Config(format!("no free port on {host}: {e}"))
                })?
            } else {
                (
                    port_for(base, 2 * env.id())?,
                    port_for(base, 2 * env.id() + 1)?,
                )
            };
            plan.insert(
                env.id(),
                Endpoints {
                    host,
                    udp_port,
                    http_port,
                },
            );
        }
        for env in envs {
            let e = &plan[&env.id()];
            env.set_property(HTTP_ADDRESS, &format!("{}:{}", e.host, e.http_port));
            env.set_property(UDP_ADDRESS, &format!("{}:{}", e.host, e.udp_port));
            if env.property(DHT_KEY).is_none() {
                env.set_property(DHT_KEY, &env.id().to_string());
            }
        }
        Ok(())
    }
}

fn node_config_item(
    env: &dyn Environment,
    params: &DhtParams,
    plan: &BTreeMap<usize, Endpoints>,
) -> dwharness_core::Result<Vec<PerEnvItem>> {
    let me = plan.get(&env.id()).ok_or_else(|| {
        dwharness_core::Error::Precondition(format!("no endpoints planned for {}", env.name()))
    })?;
    let (&first_id, first) = plan.iter().next().expect("plan holds at least this env");
    let bootstrap = (first_id != env.id()).then(|| format!("{}:{}", first.host, first.udp_port));
    let listen_host = if is_loopback(&me.host) {
        me.host.clone()
    } else {
        "0.0.0.0".into()
    };
    let config = NodeConfig {
        key: env_key(env)?.value(),
        udp_port: me.udp_port,
        http_port: me.http_port,
        bucket_size: params.bucket_size,
        bootstrap_address: bootstrap,
        key_bits: params.key_bits,
        refresh_interval_ms: params.refresh_interval_ms,
        rpc_timeout_ms: params.rpc_timeout_ms,
        eviction: params.eviction,
        listen_host,
        advertise_host: Some(me.host.clone()),
        log_file: Some(PathBuf::from("logs/node.log")),
    };
    config
        .validate()
        .map_err(|e| dwharness_core::Error::Config(format!("{}: {e}", env.name())))?;
    let json = serde_json::to_vec_pretty(&config).expect("config serializes");
    Ok(vec![PerEnvItem::generated(NODE_CONFIG, json)])
}

impl EnvironmentPreparator for DhtPreparator {
    fn prepare(&self, envs: &[EnvironmentHandle]) -> dwharness_core::Result<()> {
        self.plan_endpoints(envs)?;
        EnvironmentPreparator::<dyn Environment>::prepare(&self.inner, envs)
    }

    fn restore(&self, envs: &[EnvironmentHandle]) -> dwharness_core::Result<()> {
        self.plan_endpoints(envs)?;
        EnvironmentPreparator::<dyn Environment>::restore(&self.inner, envs)
    }

    fn collect_output(
        &self,
        envs: &[EnvironmentHandle],
        dest_path: &Path,
    ) -> dwharness_core::Result<Vec<EnvFailure>> {
        EnvironmentPreparator::<dyn Environment>::collect_output(&self.inner, envs, dest_path)
    }

    fn clean_output(&self, envs: &[EnvironmentHandle]) -> Vec<EnvFailure> {
        EnvironmentPreparator::<dyn Environment>::clean_output(&self.inner, envs)
    }

    fn clean_all(&self, envs: &[EnvironmentHandle]) -> Vec<EnvFailure> {
        EnvironmentPreparator::<dyn Environment>::clean_all(&self.inner, envs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_from_config() {
        let mut p = AppParams::default();
        assert_eq!(
            DhtParams::from_app_params(&p).unwrap(),
            DhtParams::default()
        );
        p.set("bucket_size", 1);
        p.set("eviction", "drop_newcomer");
        p.set("base_port", 41000);
        let d = DhtParams::from_app_params(&p).unwrap();
        assert_eq!(
            (d.bucket_size, d.eviction, d.base_port),
            (1, EvictionPolicy::DropNewcomer, 41000)
        );
        p.set("bucket_size", 0);
        assert!(DhtParams::from_app_params(&p).is_err());
        p.set("bucket_size", 2);
        p.set("eviction", "lru");
        assert!(DhtParams::from_app_params(&p).unwrap_err().is_config());
        p.set("eviction", "drop_newcomer");
        p.set("base_port", 70000);
        assert!(DhtParams::from_app_params(&p).is_err());
    }

    #[test]
    fn loopback_detection() {
        assert!(is_loopback("127.0.0.1"));
        assert!(is_loopback("localhost"));
        assert!(!is_loopback("10.1.2.3"));
        assert!(!is_loopback("planetlab1.example.org"));
    }
}
