//! Iterative node lookup with one query in flight at a time, independent
//! of any transport.

use crate::key::Key;
use crate::routing::NodeInfo;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum State {
    Pending,
    InFlight,
    Responded,
    Failed,
}

#[derive(Clone, Debug)]
struct Candidate {
    info: NodeInfo,
    state: State,
}

/// Drive with [`Lookup::next_query`] and report each answer through
/// [`Lookup::on_reply`] or [`Lookup::on_failure`] until it returns `None`.
#[derive(Clone, Debug)]
pub struct Lookup {
    own: Key,
    target: Key,
    k: usize,
    // Sorted by distance to target.
    shortlist: Vec<Candidate>,
}

impl Lookup {
    pub fn new(own: Key, target: Key, k: usize, seeds: impl IntoIterator<Item = NodeInfo>) -> Self {
        let mut lookup = Lookup {
            own,
            target,
            k: k.max(1),
            shortlist: Vec::new(),
        };
        for seed in seeds {
            lookup.add(seed, State::Pending);
        }
        lookup
    }

    pub fn target(&self) -> Key {
        self.target
    }

    fn add(&mut self, info: NodeInfo, state: State) {
        if info.key == self.own || self.shortlist.iter().any(|c| c.info.key == info.key) {
            return;
        }
        let d = info.key.distance(self.target);
        let pos = self
            .shortlist
            .partition_point(|c| c.info.key.distance(self.target) < d);
        self.shortlist.insert(pos, Candidate { info, state });
    }

    /// Records a node that already answered outside the lookup (the
    /// bootstrap contact, whose key is learned from its first reply).
    pub fn add_responded(&mut self, info: NodeInfo, contacts: impl IntoIterator<Item = NodeInfo>) {
        let key = info.key;
        self.add(info, State::Responded);
        if let Some(c) = self.shortlist.iter_mut().find(|c| c.info.key == key) {
            c.state = State::Responded;
        }
        for contact in contacts {
            self.add(contact, State::Pending);
        }
    }

    fn live(&self) -> impl Iterator<Item = &Candidate> {
        self.shortlist
            .iter()
            .filter(|c| c.state != State::Failed)
            .take(self.k)
    }

    /// The closest unqueried node among the current k best, if any.
    pub fn next_query(&mut self) -> Option<NodeInfo> {
        if self.live().any(|c| c.state == State::InFlight) {
            return None;
        }
        let key = self.live().find(|c| c.state == State::Pending)?.info.key;
        let c = self.shortlist.iter_mut().find(|c| c.info.key == key)?;
        c.state = State::InFlight;
        Some(c.info.clone())
    }

    pub fn on_reply(&mut self, from: Key, contacts: impl IntoIterator<Item = NodeInfo>) {
        if let Some(c) = self.shortlist.iter_mut().find(|c| c.info.key == from) {
            c.state = State::Responded;
        }
        for contact in contacts {
            self.add(contact, State::Pending);
        }
    }

    pub fn on_failure(&mut self, from: Key) {
        if let Some(c) = self.shortlist.iter_mut().find(|c| c.info.key == from) {
            c.state = State::Failed;
        }
    }

    pub fn is_finished(&self) -> bool {
        !self
            .live()
            .any(|c| matches!(c.state, State::Pending | State::InFlight))
    }

    /// The up to k closest nodes that answered.
    pub fn result(&self) -> Vec<NodeInfo> {
        self.shortlist
            .iter()
            .filter(|c| c.state == State::Responded)
            .take(self.k)
            .map(|c| c.info.clone())
            .collect()
    }
}
