use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::key::Key;

/// Directed graph with an edge `u -> v` when `v` is in `u`'s routing table.
/// Successor lists keep the order the table reported them in.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConnectionGraph {
    adjacency: BTreeMap<Key, Vec<Key>>,
}

impl ConnectionGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a graph over the given vertices. Contacts that are not
    /// vertices themselves are dropped and returned as `(owner, contact)`.
    pub fn from_tables<I>(tables: I) -> (Self, Vec<(Key, Key)>)
    where
        I: IntoIterator<Item = (Key, Vec<Key>)>,
    {
        let tables: Vec<(Key, Vec<Key>)> = tables.into_iter().collect();
        let vertices: BTreeSet<Key> = tables.iter().map(|(k, _)| *k).collect();
        let mut graph = ConnectionGraph::new();
        let mut dropped = Vec::new();
        for (owner, contacts) in tables {
            let succ = graph.adjacency.entry(owner).or_default();
            for c in contacts {
                if !vertices.contains(&c) {
                    dropped.push((owner, c));
                } else if !succ.contains(&c) {
                    succ.push(c);
                }
            }
        }
        (graph, dropped)
    }

    pub fn add_vertex(&mut self, key: Key) {
        self.adjacency.entry(key).or_default();
    }

    /// Adds `from -> to`, creating both vertices.
    pub fn add_edge(&mut self, from: Key, to: Key) {
        self.add_vertex(to);
        let succ = self.adjacency.entry(from).or_default();
        if !succ.contains(&to) {
            succ.push(to);
        }
    }

    pub fn vertices(&self) -> impl Iterator<Item = Key> + '_ {
        self.adjacency.keys().copied()
    }

    pub fn vertex_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.values().map(Vec::len).sum()
    }

    pub fn successors(&self, key: Key) -> &[Key] {
        self.adjacency.get(&key).map_or(&[], Vec::as_slice)
    }

    pub fn adjacency(&self) -> &BTreeMap<Key, Vec<Key>> {
        &self.adjacency
    }

    /// One `key: [a, b, c]` line per vertex, ascending by key.
    pub fn listing(&self) -> String {
        let mut out = String::new();
        for (k, succ) in &self.adjacency {
            out.push_str(&format!("{k}: {}\n", bracketed(succ)));
        }
        out
    }
}

fn bracketed(keys: &[Key]) -> String {
    let parts: Vec<String> = keys.iter().map(Key::to_string).collect();
    format!("[{}]", parts.join(", "))
}

/// Strongly connected components over vertices `0..n` (Tarjan, iterative).
/// Components come in reverse topological order, members unsorted.
pub fn scc_indices(adjacency: &[Vec<usize>]) -> Vec<Vec<usize>> {
    const UNSEEN: usize = usize::MAX;
    let n = adjacency.len();
    let mut index = vec![UNSEEN; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut components = Vec::new();
    let mut counter = 0;
    // (vertex, next successor position)
    let mut frames: Vec<(usize, usize)> = Vec::new();

    for root in 0..n {
        if index[root] != UNSEEN {
            continue;
        }
        frames.push((root, 0));
        while let Some(&mut (v, ref mut pos)) = frames.last_mut() {
            if *pos == 0 && index[v] == UNSEEN {
                index[v] = counter;
                low[v] = counter;
                counter += 1;
                stack.push(v);
                on_stack[v] = true;
            }
            if let Some(&w) = adjacency[v].get(*pos) {
                *pos += 1;
                if index[w] == UNSEEN {
                    frames.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
                continue;
            }
            frames.pop();
            if let Some(&(parent, _)) = frames.last() {
                low[parent] = low[parent].min(low[v]);
            }
            if low[v] == index[v] {
                let mut component = Vec::new();
                loop {
                    let w = stack.pop().expect("v is on the stack");
                    on_stack[w] = false;
                    component.push(w);
                    if w == v {
                        break;
                    }
                }
                components.push(component);
            }
        }
    }
    components
}

/// Components with members ascending, ordered by smallest member.
pub fn strongly_connected_components(graph: &ConnectionGraph) -> Vec<Vec<Key>> {
    let keys: Vec<Key> = graph.vertices().collect();
    let position: BTreeMap<Key, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let adjacency: Vec<Vec<usize>> = keys
        .iter()
        .map(|k| {
            graph
                .successors(*k)
                .iter()
                .filter_map(|s| position.get(s).copied())
                .collect()
        })
        .collect();
    let mut components: Vec<Vec<Key>> = scc_indices(&adjacency)
        .into_iter()
        .map(|c| {
            let mut members: Vec<Key> = c.into_iter().map(|i| keys[i]).collect();
            members.sort_unstable();
            members
        })
        .collect();
    components.sort_unstable_by_key(|c| c[0]);
    components
}

/// `[0, 1, 2] [7]`
pub fn format_components(components: &[Vec<Key>]) -> String {
    let parts: Vec<String> = components.iter().map(|c| bracketed(c)).collect();
    parts.join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConsistencyType {
    Consistent,
    Inconsistent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyResult {
    #[serde(rename = "type")]
    pub kind: ConsistencyType,
    pub scc_list: Vec<Vec<Key>>,
}

impl ConsistencyResult {
    pub fn is_consistent(&self) -> bool {
        self.kind == ConsistencyType::Consistent
    }
}

impl fmt::Display for ConsistencyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, format_components(&self.scc_list))
    }
}

/// Consistent when a single component spans every vertex. The empty graph
/// is consistent.
pub fn check_consistency(graph: &ConnectionGraph) -> ConsistencyResult {
    let scc_list = strongly_connected_components(graph);
    let kind = if scc_list.len() <= 1 {
        ConsistencyType::Consistent
    } else {
        ConsistencyType::Inconsistent
    };
    ConsistencyResult { kind, scc_list }
}

/// The failure description for an inconsistent graph.
pub fn inconsistency_report(graph: &ConnectionGraph, result: &ConsistencyResult) -> String {
    format!(
        "Found inconsistent graph. The connection graph was:\n{}Its strongly connected components are: {}",
        graph.listing(),
        format_components(&result.scc_list)
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(v: u64) -> Key {
        Key::from_raw(v)
    }

    #[test]
    fn degenerate_graphs() {
        let empty = ConnectionGraph::new();
        assert!(check_consistency(&empty).is_consistent());
        assert!(check_consistency(&empty).scc_list.is_empty());

        let mut single = ConnectionGraph::new();
        single.add_vertex(k(4));
        assert_eq!(strongly_connected_components(&single), [[k(4)]]);
        assert!(check_consistency(&single).is_consistent());
    }

    #[test]
    fn out_of_swarm_contacts_are_dropped() {
        let (g, dropped) =
            ConnectionGraph::from_tables([(k(0), vec![k(1), k(9)]), (k(1), vec![k(0)])]);
        assert_eq!(dropped, [(k(0), k(9))]);
        assert_eq!(g.successors(k(0)), [k(1)]);
        assert_eq!(g.listing(), "0: [1]\n1: [0]\n");
    }

    #[test]
    fn long_path_does_not_recurse() {
        let n = 200_000;
        let adjacency: Vec<Vec<usize>> = (0..n)
            .map(|i| if i + 1 < n { vec![i + 1] } else { vec![0] })
            .collect();
        let comps = scc_indices(&adjacency);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].len(), n);
    }
}
