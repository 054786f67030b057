use rand::seq::SliceRandom;

use super::EdgeList;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: EdgeList,
    pub validation: EdgeList,
    pub test: EdgeList,
}

/// Train/validation/test counts for a user with `n` interactions, 3:1:1 with
/// the remainder assigned to train first (up to 3), then validation.
fn partition_sizes(n: usize) -> (usize, usize, usize) {
    let q = n / 5;
    let r = n % 5;
    let extra_train = r.min(3);
    let extra_val = r - extra_train;
    (3 * q + extra_train, q + extra_val, q)
}

/// Per-user 3:1:1 split followed by cold-item repair.
///
/// An item left without training edges is pulled back into train, either by
/// swapping places with another training edge of the same user (one whose
/// item stays warm without it) or by moving it outright.
pub fn split_dataset(edges: &EdgeList, seed: u64) -> DatasetSplit {
    let mut rng = rng::stream(seed, Stream::Split);
    let by_user = edges.items_by_user();

    // 0 = train, 1 = validation, 2 = test, aligned with `flat`
    let mut flat: Vec<(u32, u32)> = Vec::with_capacity(edges.len());
    let mut part: Vec<u8> = Vec::with_capacity(edges.len());
    let mut user_span = Vec::with_capacity(edges.user_count);
    for (u, items) in by_user.iter().enumerate() {
        let mut items = items.clone();
        items.shuffle(&mut rng);
        let (tr, va, _) = partition_sizes(items.len());
        let start = flat.len();
        for (i, v) in items.into_iter().enumerate() {
            flat.push((u as u32, v));
            part.push(if i < tr {
                0
            } else if i < tr + va {
                1
            } else {
                2
            });
        }
        user_span.push(start..flat.len());
    }

    let mut train_deg = vec![0usize; edges.item_count];
    for (e, &(_, v)) in flat.iter().enumerate() {
        if part[e] == 0 {
            train_deg[v as usize] += 1;
        }
    }
    for e in 0..flat.len() {
        let (u, v) = flat[e];
        if part[e] == 0 || train_deg[v as usize] > 0 {
            continue;
        }
        let span = user_span[u as usize].clone();
        let donor = span.into_iter().find(|&o| part[o] == 0 && train_deg[flat[o].1 as usize] >= 2);
        if let Some(o) = donor {
            train_deg[flat[o].1 as usize] -= 1;
            part[o] = part[e];
        }
        part[e] = 0;
        train_deg[v as usize] += 1;
    }

    let pick = |which: u8| {
        edges.with_pairs(
            flat.iter()
                .zip(&part)
                .filter(|(_, &p)| p == which)
                .map(|(&e, _)| e)
                .collect(),
        )
    };
    DatasetSplit {
        train: pick(0),
        validation: pick(1),
        test: pick(2),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn sizes_follow_three_one_one() {
        assert_eq!(partition_sizes(5), (3, 1, 1));
        assert_eq!(partition_sizes(4), (3, 1, 0));
        assert_eq!(partition_sizes(1), (1, 0, 0));
        assert_eq!(partition_sizes(10), (6, 2, 2));
        assert_eq!(partition_sizes(9), (6, 2, 1));
    }

    fn dense(users: u32, items: u32) -> EdgeList {
        EdgeList::from_pairs((0..users).flat_map(|u| (0..items).map(move |v| (u, v))))
    }

    #[test]
    fn five_interactions_split_exactly() {
        let s = split_dataset(&dense(4, 5), 7);
        for u in 0..4 {
            let count = |e: &EdgeList| e.pairs.iter().filter(|p| p.0 == u).count();
            assert_eq!(
                (count(&s.train), count(&s.validation), count(&s.test)),
                (3, 1, 1)
            );
        }
    }

    #[test]
    fn four_interactions_put_remainder_in_train() {
        let s = split_dataset(&dense(6, 4), 3);
        for u in 0..6 {
            let count = |e: &EdgeList| e.pairs.iter().filter(|p| p.0 == u).count();
            assert_eq!(
                (count(&s.train), count(&s.validation), count(&s.test)),
                (3, 1, 0)
            );
        }
    }

    #[test]
    fn seeded_split_is_deterministic() {
        let e = EdgeList::from_pairs((0..100u32).flat_map(|u| (0..10).map(move |k| (u, (u * 7 + k * 13) % 60))));
        assert_eq!(e.len(), 1000);
        assert_eq!(split_dataset(&e, 11), split_dataset(&e, 11));
        assert_ne!(split_dataset(&e, 11), split_dataset(&e, 12));
    }

    #[test]
    fn cold_items_are_repaired() {
        // item 5 is only ever seen by user 0; whatever the shuffle, it must
        // land in train.
        let mut pairs: Vec<_> = (0..5).map(|v| (0, v)).collect();
        pairs.push((0, 5));
        pairs.extend((1..4).flat_map(|u| (0..5).map(move |v| (u, v))));
        let e = EdgeList::from_pairs(pairs);
        for seed in 0..20 {
            let s = split_dataset(&e, seed);
            let train_items: HashSet<_> = s.train.pairs.iter().map(|p| p.1).collect();
            for p in s.validation.pairs.iter().chain(&s.test.pairs) {
                assert!(train_items.contains(&p.1));
            }
            assert_eq!(s.train.len() + s.validation.len() + s.test.len(), e.len());
        }
    }
}
