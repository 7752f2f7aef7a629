use std::collections::BTreeSet;
use std::net::UdpSocket;
use std::time::{Duration, Instant};

use dwharness_dht::client::NodeClient;
use dwharness_dht::message::Message;
use dwharness_dht::node::{spawn, NodeConfig, RunningNode};
use dwharness_dht::{check_consistency, ConnectionGraph, EvictionPolicy, Key, NodeInfo};

fn client(node: &RunningNode) -> NodeClient {
    NodeClient::new(&node.base_url(), Duration::from_secs(10))
}

fn config(key: u64, bucket_size: usize, bootstrap: Option<String>) -> NodeConfig {
    let mut c = NodeConfig::new(key);
    c.bucket_size = bucket_size;
    c.bootstrap_address = bootstrap;
    c.refresh_interval_ms = 150;
    c.rpc_timeout_ms = 200;
    c
}

fn swarm(n: u64, bucket_size: usize) -> Vec<RunningNode> {
    let first = spawn(config(0, bucket_size, None)).unwrap();
    let bootstrap = first.udp_addr().to_string();
    let mut nodes = vec![first];
    for key in 1..n {
        nodes.push(spawn(config(key, bucket_size, Some(bootstrap.clone()))).unwrap());
    }
    for node in &nodes {
        client(node).start().unwrap();
    }
    nodes
}

fn keys(infos: &[NodeInfo]) -> BTreeSet<u64> {
    infos.iter().map(|c| c.key.value()).collect()
}

fn wait_until(limit: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + limit;
    while Instant::now() < deadline {
        if cond() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    cond()
}

fn stop_all(nodes: Vec<RunningNode>) {
    for node in nodes {
        node.stop().unwrap();
    }
}

#[test]
fn lifecycle_and_error_codes() {
    let node = spawn(config(0, 20, None)).unwrap();
    let c = client(&node);
    assert!(c.routing_table().unwrap().is_empty());
    assert_eq!(c.status().unwrap().state, "idle");
    assert_eq!(c.get_raw("/find_nodes/3").unwrap().0, 409);
    assert_eq!(c.get_raw("/kv/3").unwrap().0, 409);

    c.start().unwrap();
    c.start().unwrap();
    let status = c.status().unwrap();
    assert_eq!(status.state, "started");
    assert_eq!(status.contacts, 0);
    assert_eq!(c.get_raw("/find_nodes/xyz").unwrap().0, 400);
    assert_eq!(c.get_raw("/find_nodes/65536").unwrap().0, 400);
    assert_eq!(
        keys(&c.find_nodes(Key::from_raw(3)).unwrap()),
        BTreeSet::from([0])
    );

    assert_eq!(c.get(Key::from_raw(5)).unwrap(), None);
    assert_eq!(c.put(Key::from_raw(5), b"v").unwrap(), [Key::from_raw(0)]);
    assert_eq!(c.get(Key::from_raw(5)).unwrap().as_deref(), Some(&b"v"[..]));

    c.shutdown().unwrap();
    node.wait().unwrap();
    assert!(matches!(
        c.shutdown(),
        Err(dwharness_dht::DhtError::Http { .. })
    ));
}

#[test]
fn malformed_datagrams_are_counted_and_idle_nodes_stay_silent() {
    let node = spawn(config(1, 20, None)).unwrap();
    let c = client(&node);
    let probe = UdpSocket::bind("127.0.0.1:0").unwrap();
    probe
        .set_read_timeout(Some(Duration::from_millis(300)))
        .unwrap();
    probe.send_to(b"garbage", node.udp_addr()).unwrap();
    let request = Message::FindNode {
        id: 7,
        sender: NodeInfo::new(Key::from_raw(9), probe.local_addr().unwrap().to_string()),
        target: Key::from_raw(9),
    };
    probe.send_to(&request.encode(), node.udp_addr()).unwrap();
    let mut buf = [0u8; 2048];
    assert!(probe.recv_from(&mut buf).is_err(), "idle node answered");
    assert!(wait_until(Duration::from_secs(2), || c
        .status()
        .unwrap()
        .malformed_datagrams
        == 1));

    c.start().unwrap();
    probe.send_to(&request.encode(), node.udp_addr()).unwrap();
    let (len, _) = probe.recv_from(&mut buf).unwrap();
    match Message::decode(&buf[..len]) {
        Some(Message::FindNodeReply { id, contacts, .. }) => {
            assert_eq!(id, 7);
            assert_eq!(keys(&contacts), BTreeSet::from([9]));
        }
        other => panic!("unexpected reply {other:?}"),
    }
    node.stop().unwrap();
}

#[test]
fn unreachable_bootstrap_is_retried_and_reported() {
    let dead = UdpSocket::bind("127.0.0.1:0").unwrap();
    let address = dead.local_addr().unwrap().to_string();
    drop(dead);
    let node = spawn(config(4, 20, Some(address.clone()))).unwrap();
    let c = client(&node);
    c.start().unwrap();
    let raw = || {
        let (_, body) = c.get_raw("/status").unwrap();
        serde_json::from_slice::<serde_json::Value>(&body).unwrap()
    };
    assert!(wait_until(Duration::from_secs(5), || raw()["bootstrap"]
        ["failed_attempts"]
        .as_u64()
        .unwrap()
        >= 2));
    let status = raw();
    assert_eq!(status["bootstrap"]["state"], "retrying");
    assert!(status["bootstrap"]["last_error"]
        .as_str()
        .unwrap()
        .contains(&address));
    node.stop().unwrap();
}

#[test]
fn large_buckets_converge_to_complete_tables() {
    let nodes = swarm(8, 20);
    let clients: Vec<NodeClient> = nodes.iter().map(client).collect();
    assert!(wait_until(Duration::from_secs(20), || clients
        .iter()
        .all(|c| c.routing_table().unwrap().len() == 7)));
    for (i, c) in clients.iter().enumerate() {
        let expected: BTreeSet<u64> = (0..8).filter(|&k| k != i as u64).collect();
        assert_eq!(keys(&c.routing_table().unwrap()), expected);
        assert!(keys(&c.find_nodes(Key::from_raw(3)).unwrap()).contains(&3));
    }
    clients[0].put(Key::from_raw(5), b"v").unwrap();
    for c in &clients {
        assert_eq!(c.get(Key::from_raw(5)).unwrap().as_deref(), Some(&b"v"[..]));
    }
    assert_eq!(clients[3].get(Key::from_raw(40_000)).unwrap(), None);
    stop_all(nodes);
}

#[test]
fn unit_buckets_disconnect_in_some_run() {
    let mut disconnected = 0;
    for _ in 0..5 {
        let nodes = swarm(8, 1);
        std::thread::sleep(Duration::from_millis(1500));
        let (graph, _) = ConnectionGraph::from_tables(nodes.iter().map(|n| {
            let c = client(n);
            let key = c.status().unwrap().key;
            (
                key,
                c.routing_table().unwrap().iter().map(|i| i.key).collect(),
            )
        }));
        if !check_consistency(&graph).is_consistent() {
            disconnected += 1;
        }
        stop_all(nodes);
    }
    assert!(disconnected >= 1);
}

#[test]
fn drop_newcomer_policy_is_selectable() {
    let mut c = config(2, 1, None);
    c.eviction = EvictionPolicy::DropNewcomer;
    let node = spawn(c).unwrap();
    let status = client(&node).get_raw("/status").unwrap().1;
    let status: serde_json::Value = serde_json::from_slice(&status).unwrap();
    assert_eq!(status["eviction"], "drop_newcomer");
    assert_eq!(status["bucket_size"], 1);
    node.stop().unwrap();
}

#[test]
fn bind_conflicts_are_reported() {
    let first = spawn(config(0, 20, None)).unwrap();
    let mut clash = config(1, 20, None);
    clash.http_port = first.http_addr().port();
    assert!(matches!(
        spawn(clash),
        Err(dwharness_dht::DhtError::Io { .. })
    ));
    first.stop().unwrap();
}
