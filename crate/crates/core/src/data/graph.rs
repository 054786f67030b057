use ndarray::{s, Array2, ArrayView2, Axis};

use super::EdgeList;
use crate::error::{Error, Result};

/// Bipartite graph in CSR form with symmetric normalization weights
/// `1 / sqrt(deg(u) * deg(v))` stored per edge in both directions.
#[derive(Debug, Clone)]
pub struct InteractionGraph {
    pub user_count: usize,
    pub item_count: usize,
    pub user_offsets: Vec<usize>,
    pub user_items: Vec<u32>,
    pub user_weights: Vec<f64>,
    pub item_offsets: Vec<usize>,
    pub item_users: Vec<u32>,
    pub item_weights: Vec<f64>,
    pub user_degrees: Vec<usize>,
    pub item_degrees: Vec<usize>,
}

fn csr(n: usize, entries: &mut [(u32, u32, f64)]) -> (Vec<usize>, Vec<u32>, Vec<f64>) {
    entries.sort_by_key(|&(a, b, _)| (a, b));
    let mut offsets = vec![0usize; n + 1];
    for &(a, _, _) in entries.iter() {
        offsets[a as usize + 1] += 1;
    }
    for i in 0..n {
        offsets[i + 1] += offsets[i];
    }
    let cols = entries.iter().map(|e| e.1).collect();
    let vals = entries.iter().map(|e| e.2).collect();
    (offsets, cols, vals)
}

pub fn build_graph(train: &EdgeList) -> Result<InteractionGraph> {
    if train.is_empty() {
        return Err(Error::EmptyDataset {
            stage: "graph construction",
        });
    }
    let user_degrees = train.user_degrees();
    let item_degrees = train.item_degrees();
    if let Some(u) = user_degrees.iter().position(|&d| d == 0) {
        return Err(Error::Invariant(format!("user {u} has no training edges")));
    }
    if let Some(v) = item_degrees.iter().position(|&d| d == 0) {
        return Err(Error::Invariant(format!("item {v} has no training edges")));
    }
    let weight = |u: u32, v: u32| {
        1.0 / ((user_degrees[u as usize] * item_degrees[v as usize]) as f64).sqrt()
    };
    let mut fwd: Vec<_> = train.pairs.iter().map(|&(u, v)| (u, v, weight(u, v))).collect();
    let mut rev: Vec<_> = train.pairs.iter().map(|&(u, v)| (v, u, weight(u, v))).collect();
    let (user_offsets, user_items, user_weights) = csr(train.user_count, &mut fwd);
    let (item_offsets, item_users, item_weights) = csr(train.item_count, &mut rev);
    Ok(InteractionGraph {
        user_count: train.user_count,
        item_count: train.item_count,
        user_offsets,
        user_items,
        user_weights,
        item_offsets,
        item_users,
        item_weights,
        user_degrees,
        item_degrees,
    })
}

impl InteractionGraph {
    pub fn node_count(&self) -> usize {
        self.user_count + self.item_count
    }

    pub fn edge_count(&self) -> usize {
        self.user_items.len()
    }

    pub fn items_of(&self, user: usize) -> &[u32] {
        &self.user_items[self.user_offsets[user]..self.user_offsets[user + 1]]
    }

    pub fn users_of(&self, item: usize) -> &[u32] {
        &self.item_users[self.item_offsets[item]..self.item_offsets[item + 1]]
    }

    /// Multiplies every edge weight by an extra `1 / (deg(u) * deg(v))`.
    ///
    /// This is the literal reading of the reconstruction prefactor applied on
    /// top of symmetric normalization; kept only for side-by-side runs.
    pub fn with_degree_prefactor(&self) -> Self {
        let mut g = self.clone();
        for u in 0..g.user_count {
            for e in g.user_offsets[u]..g.user_offsets[u + 1] {
                let v = g.user_items[e] as usize;
                g.user_weights[e] /= (g.user_degrees[u] * g.item_degrees[v]) as f64;
            }
        }
        for v in 0..g.item_count {
            for e in g.item_offsets[v]..g.item_offsets[v + 1] {
                let u = g.item_users[e] as usize;
                g.item_weights[e] /= (g.user_degrees[u] * g.item_degrees[v]) as f64;
            }
        }
        g
    }

    /// One propagation step on a stacked `(users; items)` matrix.
    ///
    /// The operator is symmetric, so this is also its own adjoint.
    pub fn step_stacked(&self, stacked: ArrayView2<f64>) -> Array2<f64> {
        let m = self.user_count;
        let d = stacked.ncols();
        let mut out = Array2::zeros((self.node_count(), d));
        for u in 0..m {
            let mut row = out.row_mut(u);
            for e in self.user_offsets[u]..self.user_offsets[u + 1] {
                let v = self.user_items[e] as usize;
                row.scaled_add(self.user_weights[e], &stacked.row(m + v));
            }
        }
        for v in 0..self.item_count {
            let mut row = out.row_mut(m + v);
            for e in self.item_offsets[v]..self.item_offsets[v + 1] {
                let u = self.item_users[e] as usize;
                row.scaled_add(self.item_weights[e], &stacked.row(u));
            }
        }
        out
    }
}

/// Propagates `L` layers and returns every layer `0..=L` as (users, items).
pub fn propagate(
    graph: &InteractionGraph,
    user_emb: ArrayView2<f64>,
    item_emb: ArrayView2<f64>,
    layers: usize,
) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
    if user_emb.nrows() != graph.user_count || item_emb.nrows() != graph.item_count {
        return Err(Error::Shape(format!(
            "embeddings have {}/{} rows, graph has {}/{} users/items",
            user_emb.nrows(),
            item_emb.nrows(),
            graph.user_count,
            graph.item_count
        )));
    }
    if user_emb.ncols() != item_emb.ncols() {
        return Err(Error::Shape("user and item widths differ".into()));
    }
    let m = graph.user_count;
    let mut current = ndarray::concatenate(Axis(0), &[user_emb, item_emb]).expect("widths match");
    let mut out = Vec::with_capacity(layers + 1);
    for l in 0..=layers {
        if l > 0 {
            current = graph.step_stacked(current.view());
        }
        out.push((
            current.slice(s![..m, ..]).to_owned(),
            current.slice(s![m.., ..]).to_owned(),
        ));
    }
    Ok(out)
}
