use dwharness_dht::{bucket_index, EvictionPolicy, InsertOutcome, Key, NodeInfo, RoutingTable};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn info(v: u64) -> NodeInfo {
    NodeInfo::new(Key::from_raw(v), format!("10.0.0.1:{}", v % 60_000 + 1))
}

fn brute_closest(contacts: &[NodeInfo], target: Key, n: usize) -> Vec<u64> {
    let mut keys: Vec<u64> = contacts.iter().map(|c| c.key.value()).collect();
    keys.sort_by_key(|&c| c ^ target.value());
    keys.truncate(n);
    keys
}

fn policy() -> impl Strategy<Value = EvictionPolicy> {
    prop_oneof![
        Just(EvictionPolicy::DropNewcomer),
        Just(EvictionPolicy::ReplaceLeastRecent)
    ]
}

proptest! {
    #[test]
    fn placement_capacity_and_closest_hold(
        owner in 0u64..65_536,
        k in 1usize..6,
        policy in policy(),
        ops in prop::collection::vec((0u64..65_536, any::<bool>()), 0..200),
        target in 0u64..65_536,
    ) {
        let mut table = RoutingTable::new(Key::from_raw(owner), 16, k, policy);
        for (key, remove) in ops {
            if remove {
                table.remove(Key::from_raw(key));
            } else {
                table.insert(info(key));
            }
            prop_assert!(table.check_invariants().is_ok(), "{:?}", table.check_invariants());
        }
        let contacts = table.contacts();
        for c in &contacts {
            let i = bucket_index(table.owner(), c.key).unwrap();
            prop_assert_eq!(63 - (owner ^ c.key.value()).leading_zeros() as usize, i);
        }
        let got: Vec<u64> = table.closest(Key::from_raw(target), k).iter().map(|c| c.key.value()).collect();
        prop_assert_eq!(got, brute_closest(&contacts, Key::from_raw(target), k));
    }

    #[test]
    fn full_bucket_outcomes_follow_policy(owner in 0u64..16, policy in policy()) {
        let owner = Key::from_raw(owner);
        let mut table = RoutingTable::new(owner, 4, 1, policy);
        // Keys differing from owner only in bit 3 share bucket 3.
        let a = owner.value() ^ 0b1000;
        let b = owner.value() ^ 0b1001;
        prop_assert_eq!(table.insert(info(a)), InsertOutcome::Added);
        let outcome = table.insert(info(b));
        match policy {
            EvictionPolicy::DropNewcomer => {
                prop_assert_eq!(outcome, InsertOutcome::Dropped);
                prop_assert!(table.contains(Key::from_raw(a)));
            }
            EvictionPolicy::ReplaceLeastRecent => {
                prop_assert_eq!(outcome, InsertOutcome::Replaced(info(a)));
                prop_assert!(table.contains(Key::from_raw(b)));
            }
        }
    }
}

#[test]
fn owner_never_returned() {
    let mut t = RoutingTable::new(Key::from_raw(9), 16, 20, EvictionPolicy::default());
    for v in [9, 1, 8, 300] {
        t.insert(info(v));
    }
    let got: Vec<u64> = t
        .closest(Key::from_raw(9), 20)
        .iter()
        .map(|c| c.key.value())
        .collect();
    assert_eq!(got, [8, 1, 300]);
    assert!(
        RoutingTable::new(Key::from_raw(0), 16, 3, EvictionPolicy::default())
            .closest(Key::from_raw(77), 3)
            .is_empty()
    );
}

#[test]
fn ten_thousand_random_operations() {
    let mut rng = StdRng::seed_from_u64(16);
    let mut violations = 0;
    let mut table = RoutingTable::new(
        Key::from_raw(rng.random_range(0..65_536)),
        16,
        3,
        EvictionPolicy::default(),
    );
    for op in 0..10_000 {
        if op % 1000 == 0 {
            let policy = if op % 2000 == 0 {
                EvictionPolicy::DropNewcomer
            } else {
                EvictionPolicy::ReplaceLeastRecent
            };
            table = RoutingTable::new(
                Key::from_raw(rng.random_range(0..65_536)),
                16,
                rng.random_range(1..=8),
                policy,
            );
        }
        let key = rng.random_range(0..65_536);
        match rng.random_range(0..10) {
            0 => {
                table.remove(Key::from_raw(key));
            }
            _ => {
                table.insert(info(key));
            }
        }
        if table.check_invariants().is_err() {
            violations += 1;
        }
        let target = Key::from_raw(rng.random_range(0..65_536));
        let n = table.bucket_size();
        let got: Vec<u64> = table
            .closest(target, n)
            .iter()
            .map(|c| c.key.value())
            .collect();
        if got != brute_closest(&table.contacts(), target, n) {
            violations += 1;
        }
    }
    assert_eq!(violations, 0);
}
