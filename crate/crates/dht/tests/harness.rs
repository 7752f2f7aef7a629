use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use dwharness_core::runner::AppParams;
use dwharness_core::{
    AppFactory, EnvironmentFactory, EnvironmentHandle, EnvironmentPreparator,
    LocalEnvironmentFactory, TestScript,
};
use dwharness_dht::client::NodeClient;
use dwharness_dht::harness::{
    ConsistencyParams, ConsistencyTestScript, DhtAppFactory, DhtInstance, DhtParams, DhtPreparator,
    PutGetParams, PutGetTestScript, CONSISTENT, HTTP_ADDRESS, NODE_CONFIG, STARTUP_FAILED,
    UDP_ADDRESS,
};
use dwharness_dht::node::{spawn, NodeConfig, RunningNode};
use dwharness_dht::{DhtError, EvictionPolicy, Key, NodeInfo};

/// Scripted instance: each check pops the next table (the last one
/// repeats); `None` simulates an unreachable node.
struct Fake {
    key: Key,
    tables: Mutex<Vec<Option<Vec<u64>>>>,
    fail_start: bool,
    started: AtomicUsize,
    stopped: AtomicUsize,
}

impl Fake {
    fn new(key: u64, tables: Vec<Option<Vec<u64>>>) -> Self {
        Fake {
            key: Key::from_raw(key),
            tables: Mutex::new(tables),
            fail_start: false,
            started: AtomicUsize::new(0),
            stopped: AtomicUsize::new(0),
        }
    }
}

impl DhtInstance for Fake {
    fn key(&self) -> Key {
        self.key
    }
    fn label(&self) -> String {
        format!("fake-{}", self.key)
    }
    fn start_up(&self) -> Result<(), DhtError> {
        if self.fail_start {
            return Err(DhtError::Start {
                instance: self.label(),
                message: "binary missing".into(),
            });
        }
        self.started.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }
    fn start_routing(&self) -> Result<(), DhtError> {
        Ok(())
    }
    fn routing_table(&self) -> Result<Vec<Key>, DhtError> {
        let mut tables = self.tables.lock().unwrap();
        let next = if tables.len() > 1 {
            tables.remove(0)
        } else {
            tables[0].clone()
        };
        next.map(|t| t.into_iter().map(Key::from_raw).collect())
            .ok_or_else(|| DhtError::Http {
                uri: "fake".into(),
                message: "connection refused".into(),
            })
    }
    fn find_nodes(&self, _: Key) -> Result<Vec<NodeInfo>, DhtError> {
        unimplemented!()
    }
    fn put(&self, _: Key, _: &[u8]) -> Result<Vec<Key>, DhtError> {
        unimplemented!()
    }
    fn get(&self, _: Key) -> Result<Option<Vec<u8>>, DhtError> {
        unimplemented!()
    }
    fn shut_down(&self) {
        self.stopped.fetch_add(1, Ordering::SeqCst);
    }
}

fn fast(check_count: u64, grace: u64) -> ConsistencyTestScript {
    ConsistencyTestScript::new(ConsistencyParams {
        check_interval: Duration::from_millis(5),
        check_count,
        grace,
        max_io_retries: 3,
    })
}

fn complete(n: u64) -> Vec<Fake> {
    (0..n)
        .map(|k| Fake::new(k, vec![Some((0..n).filter(|&o| o != k).collect())]))
        .collect()
}

fn paper_swarm() -> Vec<Fake> {
    let tables: [(u64, &[u64]); 8] = [
        (0, &[1, 2, 4]),
        (1, &[0, 2, 4]),
        (2, &[3, 0, 4]),
        (3, &[2, 0, 4]),
        (4, &[5, 6, 0]),
        (5, &[4, 6, 0]),
        (6, &[4, 0]),
        (7, &[4, 0]),
    ];
    tables
        .iter()
        .map(|(k, t)| Fake::new(*k, vec![Some(t.to_vec())]))
        .collect()
}

fn all_stopped(apps: &[Fake]) -> bool {
    apps.iter().all(|a| a.stopped.load(Ordering::SeqCst) >= 1)
}

#[test]
fn complete_graph_is_consistent() {
    let apps = complete(8);
    let r = fast(10, 3).run(&apps);
    assert!(r.is_success(), "{r}");
    assert_eq!(r.description(), CONSISTENT);
    assert!(all_stopped(&apps));
}

#[test]
fn recorded_swarm_fails_with_listing() {
    let apps = paper_swarm();
    let r = fast(10, 3).run(&apps);
    assert!(!r.is_success());
    let text = r.description();
    assert!(text.starts_with("Found inconsistent graph. The connection graph was:\n"));
    for line in ["0: [1, 2, 4]", "3: [2, 0, 4]", "7: [4, 0]"] {
        assert!(
            text.lines().any(|l| l == line),
            "{line} missing from\n{text}"
        );
    }
    assert_eq!(
        text.lines()
            .filter(|l| l
                .split_once(": [")
                .is_some_and(|(k, _)| k.parse::<u64>().is_ok()))
            .count(),
        8
    );
    assert!(text.ends_with("Its strongly connected components are: [0, 1, 2, 3, 4, 5, 6] [7]"));
    assert!(all_stopped(&apps));
}

#[test]
fn inconsistency_during_grace_is_tolerated() {
    // Node 1 is unknown to node 0 for the first two checks.
    let apps = vec![
        Fake::new(0, vec![Some(vec![]), Some(vec![]), Some(vec![1])]),
        Fake::new(1, vec![Some(vec![0])]),
    ];
    assert!(fast(5, 2).run(&apps).is_success());

    let apps = vec![
        Fake::new(0, vec![Some(vec![]), Some(vec![]), Some(vec![1])]),
        Fake::new(1, vec![Some(vec![0])]),
    ];
    let r = fast(5, 1).run(&apps);
    assert!(
        r.description().starts_with("Found inconsistent graph"),
        "{r}"
    );
}

#[test]
fn partial_graphs_are_retried_then_fail() {
    let apps = vec![
        Fake::new(0, vec![None, None, Some(vec![1])]),
        Fake::new(1, vec![Some(vec![0])]),
    ];
    assert!(fast(3, 0).run(&apps).is_success());

    let apps = vec![Fake::new(0, vec![None]), Fake::new(1, vec![Some(vec![0])])];
    let r = fast(3, 0).run(&apps);
    assert!(!r.is_success());
    assert!(r
        .description()
        .starts_with("Could not read routing tables in 3 consecutive checks."));
    assert!(r.cause().unwrap().contains("fake-0"));
    assert!(all_stopped(&apps));
}

#[test]
fn zero_checks_succeed_after_clean_start_and_stop() {
    let apps = paper_swarm();
    let r = fast(0, 0).run(&apps);
    assert!(r.is_success());
    assert!(apps.iter().all(|a| a.started.load(Ordering::SeqCst) == 1));
    assert!(all_stopped(&apps));
}

#[test]
fn startup_failure_reports_cause_and_tears_down() {
    let mut apps = complete(4);
    apps[2].fail_start = true;
    let r = fast(3, 0).run(&apps);
    assert!(!r.is_success());
    assert_eq!(r.description(), STARTUP_FAILED);
    assert!(r.cause().unwrap().contains("fake-2"));
    assert!(all_stopped(&apps));
}

#[test]
fn script_parameters_from_config() {
    let mut p = AppParams::default();
    p.set("check_interval", 0.5);
    p.set("check_count", 4);
    let c = ConsistencyParams::from_app_params(&p).unwrap();
    assert_eq!(c.check_interval, Duration::from_millis(500));
    assert_eq!((c.check_count, c.grace, c.max_io_retries), (4, 3, 3));
    p.set("check_count", "many");
    assert!(ConsistencyParams::from_app_params(&p).is_err());
    p.set("check_count", 4);
    p.set("max_io_retries", 0);
    assert!(ConsistencyParams::from_app_params(&p).is_err());
    assert_eq!(
        PutGetParams::from_app_params(&AppParams::default()).unwrap(),
        PutGetParams::default()
    );
}

/// An in-process daemon behind the same instance interface.
struct InProcess {
    key: Key,
    config: NodeConfig,
    node: Mutex<Option<(RunningNode, NodeClient)>>,
}

impl InProcess {
    fn client(&self) -> Result<NodeClient, DhtError> {
        self.node
            .lock()
            .unwrap()
            .as_ref()
            .map(|(_, c)| c.clone())
            .ok_or_else(|| DhtError::Start {
                instance: self.label(),
                message: "not running".into(),
            })
    }
}

impl DhtInstance for InProcess {
    fn key(&self) -> Key {
        self.key
    }
    fn label(&self) -> String {
        format!("inproc-{}", self.key)
    }
    fn start_up(&self) -> Result<(), DhtError> {
        let node = spawn(self.config.clone())?;
        let client = NodeClient::new(&node.base_url(), Duration::from_secs(5));
        *self.node.lock().unwrap() = Some((node, client));
        Ok(())
    }
    fn start_routing(&self) -> Result<(), DhtError> {
        self.client()?.start()
    }
    fn routing_table(&self) -> Result<Vec<Key>, DhtError> {
        Ok(self
            .client()?
            .routing_table()?
            .into_iter()
            .map(|c| c.key)
            .collect())
    }
    fn find_nodes(&self, key: Key) -> Result<Vec<NodeInfo>, DhtError> {
        self.client()?.find_nodes(key)
    }
    fn put(&self, key: Key, value: &[u8]) -> Result<Vec<Key>, DhtError> {
        self.client()?.put(key, value)
    }
    fn get(&self, key: Key) -> Result<Option<Vec<u8>>, DhtError> {
        self.client()?.get(key)
    }
    fn shut_down(&self) {
        if let Some((node, _)) = self.node.lock().unwrap().take() {
            node.stop().unwrap();
        }
    }
}

fn in_process_swarm(bucket_size: usize) -> Vec<InProcess> {
    // Fixed UDP ports so the bootstrap address is known before start-up.
    let probe = std::net::UdpSocket::bind("127.0.0.1:0").unwrap();
    let bootstrap_port = probe.local_addr().unwrap().port();
    drop(probe);
    (0..8)
        .map(|k| {
            let mut c = NodeConfig::new(k);
            c.bucket_size = bucket_size;
            c.refresh_interval_ms = 200;
            c.rpc_timeout_ms = 200;
            if k == 0 {
                c.udp_port = bootstrap_port;
            } else {
                c.bootstrap_address = Some(format!("127.0.0.1:{bootstrap_port}"));
            }
            InProcess {
                key: Key::from_raw(k),
                config: c,
                node: Mutex::new(None),
            }
        })
        .collect()
}

#[test]
fn in_process_swarm_passes_both_scripts() {
    let script = ConsistencyTestScript::new(ConsistencyParams {
        check_interval: Duration::from_millis(300),
        check_count: 6,
        grace: 3,
        max_io_retries: 3,
    });
    let apps = in_process_swarm(20);
    let r = script.run(&apps);
    assert!(r.is_success(), "{r}");
    assert!(apps.iter().all(|a| a.node.lock().unwrap().is_none()));

    let put_get = PutGetTestScript::new(PutGetParams {
        settle: Duration::from_millis(800),
        values: 4,
    });
    let r = TestScript::<InProcess>::run(&put_get, &in_process_swarm(20));
    assert!(r.is_success(), "{r}");
}

fn local_envs(dir: &std::path::Path, n: usize) -> Vec<EnvironmentHandle> {
    LocalEnvironmentFactory::new(dir, n)
        .create_environments()
        .unwrap()
}

#[test]
fn preparator_writes_node_configs_and_addresses() {
    let dir = tempfile::tempdir().unwrap();
    let binary = dir.path().join("fake-node");
    std::fs::write(&binary, "#!/bin/sh\n").unwrap();
    let envs = local_envs(&dir.path().join("work"), 3);
    let params = DhtParams {
        bucket_size: 1,
        eviction: EvictionPolicy::DropNewcomer,
        ..DhtParams::default()
    };
    let prep = DhtPreparator::new(&binary, params);
    prep.prepare(&envs).unwrap();

    let mut udp = BTreeMap::new();
    for env in &envs {
        let tmp = dir.path().join(format!("cfg-{}", env.id()));
        env.copy_files_to_local_disk(NODE_CONFIG, &tmp).unwrap();
        let cfg = NodeConfig::load(&tmp).unwrap();
        assert_eq!(cfg.key, env.id() as u64);
        assert_eq!(cfg.bucket_size, 1);
        assert_eq!(cfg.eviction, EvictionPolicy::DropNewcomer);
        assert!(env.exists("bin/dht-node").unwrap());
        let http = env.property(HTTP_ADDRESS).unwrap();
        assert_eq!(http, format!("127.0.0.1:{}", cfg.http_port));
        udp.insert(env.id(), env.property(UDP_ADDRESS).unwrap());
        assert_eq!(
            env.property("dht_key").as_deref(),
            Some(env.id().to_string().as_str())
        );
        match env.id() {
            0 => assert_eq!(cfg.bootstrap_address, None),
            _ => assert_eq!(cfg.bootstrap_address.as_deref(), Some(udp[&0].as_str())),
        }
    }
    let before: Vec<_> = envs.iter().map(|e| e.property(HTTP_ADDRESS)).collect();
    prep.restore(&envs).unwrap();
    let after: Vec<_> = envs.iter().map(|e| e.property(HTTP_ADDRESS)).collect();
    assert_eq!(before, after);
    assert!(prep
        .manifest_preparator()
        .read_only_transfers()
        .values()
        .all(|&n| n == 1));
    assert!(prep.clean_all(&envs).is_empty());
    assert!(!envs[0].exists(NODE_CONFIG).unwrap());
}

#[test]
fn fixed_base_port_layout() {
    let dir = tempfile::tempdir().unwrap();
    let binary = dir.path().join("fake-node");
    std::fs::write(&binary, "").unwrap();
    let envs = local_envs(&dir.path().join("work"), 2);
    let prep = DhtPreparator::new(
        &binary,
        DhtParams {
            base_port: 42000,
            ..DhtParams::default()
        },
    );
    prep.prepare(&envs).unwrap();
    assert_eq!(
        envs[1].property(UDP_ADDRESS).as_deref(),
        Some("127.0.0.1:42002")
    );
    assert_eq!(
        envs[1].property(HTTP_ADDRESS).as_deref(),
        Some("127.0.0.1:42003")
    );
    prep.clean_all(&envs);
}

#[test]
fn app_factory_requires_prepared_environments() {
    let dir = tempfile::tempdir().unwrap();
    let envs = local_envs(dir.path(), 2);
    assert!(DhtAppFactory::default()
        .create_apps(&[])
        .unwrap()
        .is_empty());
    let err = DhtAppFactory::default().create_apps(&envs).unwrap_err();
    assert!(err.is_config());
    assert!(err.to_string().contains(envs[0].name()), "{err}");

    for env in &envs {
        env.set_property(HTTP_ADDRESS, "127.0.0.1:1");
    }
    let apps = DhtAppFactory::default().create_apps(&envs).unwrap();
    let ids: Vec<usize> = apps.iter().map(dwharness_core::App::id).collect();
    assert_eq!(ids, [0, 1]);
    assert_eq!(apps[1].key(), Key::from_raw(1));
    // No daemon yet.
    assert!(matches!(
        apps[0].start_routing(),
        Err(DhtError::Start { .. })
    ));
}

#[test]
fn missing_binary_is_a_start_error() {
    let dir = tempfile::tempdir().unwrap();
    let envs = local_envs(dir.path(), 1);
    envs[0].set_property(HTTP_ADDRESS, "127.0.0.1:1");
    let apps = DhtAppFactory::default().create_apps(&envs).unwrap();
    let r = fast(1, 0).run(&apps);
    assert_eq!(r.description(), STARTUP_FAILED);
    assert!(r.cause().unwrap().contains("dht-"), "{r}");
    assert_eq!(envs[0].processes().running_count(), 0);
}
