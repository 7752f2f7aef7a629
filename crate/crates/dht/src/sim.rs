//! Deterministic in-process swarm: the same node logic as the daemon with
//! message delivery replaced by direct calls and concurrency replaced by a
//! seeded interleaving of lookup steps.

use std::ops::Range;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::graph::ConnectionGraph;
use crate::key::Key;
use crate::lookup::Lookup;
use crate::message::Message;
use crate::protocol::NodeCore;
use crate::routing::{EvictionPolicy, NodeInfo};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SwarmSpec {
    pub size: usize,
    pub bucket_size: usize,
    pub key_bits: u32,
    pub policy: EvictionPolicy,
    /// Self-lookup rounds run by every node after the joins.
    pub refresh_rounds: usize,
}

impl Default for SwarmSpec {
    fn default() -> Self {
        SwarmSpec {
            size: 8,
            bucket_size: crate::routing::DEFAULT_BUCKET_SIZE,
            key_bits: crate::key::DEFAULT_KEY_BITS,
            policy: EvictionPolicy::default(),
            refresh_rounds: 3,
        }
    }
}

/// Node `i` has key `i` and bootstraps through node 0.
pub struct Swarm {
    spec: SwarmSpec,
    nodes: Vec<NodeCore>,
    next_id: u64,
}

struct Task {
    node: usize,
    target: Key,
    lookup: Option<Lookup>,
}

impl Swarm {
    pub fn new(spec: SwarmSpec) -> Self {
        let nodes = (0..spec.size)
            .map(|i| {
                let info = NodeInfo::new(Key::from_raw(i as u64), format!("sim:{i}"));
                let mut core = NodeCore::new(info, spec.key_bits, spec.bucket_size, spec.policy);
                core.start();
                core
            })
            .collect();
        Swarm {
            spec,
            nodes,
            next_id: 0,
        }
    }

    pub fn spec(&self) -> SwarmSpec {
        self.spec
    }

    pub fn node(&self, i: usize) -> &NodeCore {
        &self.nodes[i]
    }

    pub fn connection_graph(&self) -> ConnectionGraph {
        let (graph, _dropped) = ConnectionGraph::from_tables(self.nodes.iter().map(|n| {
            (
                n.key(),
                n.table().contacts().into_iter().map(|c| c.key).collect(),
            )
        }));
        graph
    }

    /// Concurrent joins of nodes 1.. followed by the refresh rounds, all
    /// interleaved by `seed`.
    pub fn converge(&mut self, seed: u64) {
        let mut rng = StdRng::seed_from_u64(seed);
        let joins: Vec<usize> = (1..self.nodes.len()).collect();
        self.run_interleaved(&joins, &mut rng);
        let everyone: Vec<usize> = (0..self.nodes.len()).collect();
        for _ in 0..self.spec.refresh_rounds {
            self.run_interleaved(&everyone, &mut rng);
        }
    }

    /// Joins one node at a time in `order`, then runs the refresh rounds
    /// in the same order without interleaving.
    pub fn converge_in_order(&mut self, order: &[usize]) {
        for &i in order {
            self.self_lookup(i);
        }
        for _ in 0..self.spec.refresh_rounds {
            for i in 0..self.nodes.len() {
                self.self_lookup(i);
            }
        }
    }

    pub fn self_lookup(&mut self, node: usize) -> Vec<NodeInfo> {
        let target = self.nodes[node].key();
        self.lookup(node, target)
    }

    /// Runs a complete lookup from `node` and returns the closest set,
    /// including `node` itself when it belongs there.
    pub fn lookup(&mut self, node: usize, target: Key) -> Vec<NodeInfo> {
        let mut task = Task {
            node,
            target,
            lookup: None,
        };
        while self.step(&mut task) {}
        let result = task.lookup.map(|l| l.result()).unwrap_or_default();
        self.nodes[node].with_self(target, result)
    }

    fn run_interleaved(&mut self, nodes: &[usize], rng: &mut StdRng) {
        let mut active: Vec<Task> = nodes
            .iter()
            .map(|&node| Task {
                node,
                target: self.nodes[node].key(),
                lookup: None,
            })
            .collect();
        while !active.is_empty() {
            let pick = rng.random_range(0..active.len());
            if !self.step(&mut active[pick]) {
                active.swap_remove(pick);
            }
        }
    }

    /// Performs one query of `task`. Returns false once the lookup is over.
    fn step(&mut self, task: &mut Task) -> bool {
        let me = task.node;
        let Some(lookup) = task.lookup.as_mut() else {
            let lookup = self.nodes[me].lookup(task.target);
            if lookup.is_finished() && me != 0 {
                // Nothing known yet: ask the bootstrap node first.
                let own = self.nodes[me].key();
                let mut fresh = Lookup::new(own, task.target, self.spec.bucket_size, []);
                if let Some((sender, contacts)) = self.find_node(me, 0, task.target) {
                    fresh.add_responded(sender, contacts);
                }
                task.lookup = Some(fresh);
            } else {
                task.lookup = Some(lookup);
            }
            return true;
        };
        let Some(peer) = lookup.next_query() else {
            return false;
        };
        let to = peer.key.value() as usize;
        match self.find_node(me, to, task.target) {
            Some((_, contacts)) => lookup.on_reply(peer.key, contacts),
            None => lookup.on_failure(peer.key),
        }
        true
    }

    fn find_node(
        &mut self,
        from: usize,
        to: usize,
        target: Key,
    ) -> Option<(NodeInfo, Vec<NodeInfo>)> {
        self.next_id += 1;
        let request = Message::FindNode {
            id: self.next_id,
            sender: self.nodes[from].info().clone(),
            target,
        };
        match self.nodes.get_mut(to)?.handle_request(&request)? {
            Message::FindNodeReply {
                sender, contacts, ..
            } => {
                self.nodes[from].observe(&sender);
                Some((sender, contacts))
            }
            _ => None,
        }
    }
}

/// Converges a fresh swarm under `seed` and returns its connection graph.
pub fn simulate(spec: SwarmSpec, seed: u64) -> ConnectionGraph {
    let mut swarm = Swarm::new(spec);
    swarm.converge(seed);
    swarm.connection_graph()
}

/// Fraction of `seeds` whose converged graph is not strongly connected.
pub fn disconnection_rate(spec: SwarmSpec, seeds: Range<u64>) -> f64 {
    let n = seeds.end.saturating_sub(seeds.start);
    if n == 0 {
        return 0.0;
    }
    let seeds: Vec<u64> = seeds.collect();
    let broken = dwharness_core::fanout::map(&seeds, |&seed| {
        !crate::graph::check_consistency(&simulate(spec, seed)).is_consistent()
    })
    .into_iter()
    .filter(|&b| b)
    .count();
    broken as f64 / n as f64
}
