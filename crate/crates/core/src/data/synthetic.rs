//! Clustered interaction generator for desk-scale experiments.
//!
//! Item `i` belongs to latent cluster `i % clusters`, the same round-robin
//! assignment used when synthesizing semantic vectors, so the semantic side
//! carries real signal about who interacts with what.

use std::collections::HashSet;

use rand::Rng;
use rand_distr::{weighted::WeightedIndex, Distribution};

use super::EdgeList;
use crate::rng::{self, Stream};

#[derive(Debug, Clone)]
pub struct SyntheticInteractions {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    pub min_user_degree: usize,
    pub max_user_degree: usize,
    /// Probability that an interaction stays inside the user's home cluster.
    pub in_cluster: f64,
    /// Zipf exponent of item popularity within a cluster.
    pub popularity_exponent: f64,
    /// Every item is topped up to this many interactions, so a 5-core pass
    /// leaves the generated dataset untouched.
    pub min_item_degree: usize,
}

impl Default for SyntheticInteractions {
    fn default() -> Self {
        SyntheticInteractions {
            users: 300,
            items: 200,
            clusters: 5,
            min_user_degree: 15,
            max_user_degree: 30,
            in_cluster: 0.9,
            popularity_exponent: 1.0,
            min_item_degree: 5,
        }
    }
}

impl SyntheticInteractions {
    pub fn item_cluster(&self, item: usize) -> usize {
        item % self.clusters
    }

    /// Home cluster of every user, drawn from the same stream as the edges.
    pub fn generate(&self, seed: u64) -> (EdgeList, Vec<usize>) {
        let mut rng = rng::stream(seed, Stream::Synth);
        let c = self.clusters.max(1);
        let members: Vec<Vec<usize>> = (0..c)
            .map(|k| (0..self.items).filter(|i| i % c == k).collect())
            .collect();
        let samplers: Vec<WeightedIndex<f64>> = members
            .iter()
            .map(|m| {
                WeightedIndex::new(
                    (0..m.len()).map(|r| ((r + 1) as f64).powf(-self.popularity_exponent)),
                )
                .expect("cluster is non-empty")
            })
            .collect();

        let home: Vec<usize> = (0..self.users).map(|_| rng.random_range(0..c)).collect();
        let mut seen = HashSet::new();
        let mut pairs = Vec::new();
        for u in 0..self.users {
            let degree = rng.random_range(self.min_user_degree..=self.max_user_degree);
            let mut placed = 0;
            let mut attempts = 0;
            while placed < degree && attempts < 50 * degree {
                attempts += 1;
                let k = if rng.random::<f64>() < self.in_cluster {
                    home[u]
                } else {
                    rng.random_range(0..c)
                };
                let v = members[k][samplers[k].sample(&mut rng)];
                if seen.insert((u, v)) {
                    pairs.push((u as u32, v as u32));
                    placed += 1;
                }
            }
        }

        let mut item_deg = vec![0usize; self.items];
        for &(_, v) in &pairs {
            item_deg[v as usize] += 1;
        }
        for v in 0..self.items {
            let k = self.item_cluster(v);
            let mut fans: Vec<usize> = (0..self.users).filter(|&u| home[u] == k).collect();
            if fans.is_empty() {
                fans = (0..self.users).collect();
            }
            let mut attempts = 0;
            while item_deg[v] < self.min_item_degree && attempts < 100 * self.min_item_degree {
                attempts += 1;
                let u = fans[rng.random_range(0..fans.len())];
                if seen.insert((u, v)) {
                    pairs.push((u as u32, v as u32));
                    item_deg[v] += 1;
                }
            }
        }

        let edges = EdgeList {
            pairs,
            user_count: self.users,
            item_count: self.items,
            ..Default::default()
        };
        (edges, home)
    }
}
