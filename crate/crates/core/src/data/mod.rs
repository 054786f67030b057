//! Interaction ingestion, filtering, splitting and the normalized bipartite
//! propagation graph.

mod graph;
mod split;
pub mod synthetic;

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use graph::{build_graph, propagate, InteractionGraph};
pub use split::{split_dataset, DatasetSplit};

/// Deduplicated user-item pairs over dense 0-based indices.
///
/// `user_labels` / `item_labels` carry the original tokens when the list was
/// read from a file; they are empty for generated data.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EdgeList {
    pub pairs: Vec<(u32, u32)>,
    pub user_count: usize,
    pub item_count: usize,
    pub user_labels: Vec<String>,
    pub item_labels: Vec<String>,
}

impl EdgeList {
    /// Builds an unlabeled list, collapsing duplicate pairs and taking counts
    /// from the largest indices present.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u32, u32)>) -> Self {
        let mut seen = HashSet::new();
        let pairs: Vec<_> = pairs.into_iter().filter(|p| seen.insert(*p)).collect();
        let user_count = pairs.iter().map(|p| p.0 as usize + 1).max().unwrap_or(0);
        let item_count = pairs.iter().map(|p| p.1 as usize + 1).max().unwrap_or(0);
        EdgeList {
            pairs,
            user_count,
            item_count,
            ..Default::default()
        }
    }

    /// Same node universe, different edges.
    pub fn with_pairs(&self, pairs: Vec<(u32, u32)>) -> Self {
        EdgeList {
            pairs,
            user_count: self.user_count,
            item_count: self.item_count,
            user_labels: self.user_labels.clone(),
            item_labels: self.item_labels.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn user_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.user_count];
        for &(u, _) in &self.pairs {
            deg[u as usize] += 1;
        }
        deg
    }

    pub fn item_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.item_count];
        for &(_, v) in &self.pairs {
            deg[v as usize] += 1;
        }
        deg
    }

    /// Items per user, each list sorted ascending.
    pub fn items_by_user(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.user_count];
        for &(u, v) in &self.pairs {
            out[u as usize].push(v);
        }
        for items in &mut out {
            items.sort_unstable();
        }
        out
    }

    /// Drops nodes without edges and renumbers the rest, keeping their
    /// relative order.
    pub fn compact(&self) -> Self {
        let mut user_map = vec![u32::MAX; self.user_count];
        let mut item_map = vec![u32::MAX; self.item_count];
        for &(u, v) in &self.pairs {
            user_map[u as usize] = 0;
            item_map[v as usize] = 0;
        }
        let user_labels = renumber(&mut user_map, &self.user_labels);
        let item_labels = renumber(&mut item_map, &self.item_labels);
        EdgeList {
            pairs: self
                .pairs
                .iter()
                .map(|&(u, v)| (user_map[u as usize], item_map[v as usize]))
                .collect(),
            user_count: user_map.iter().filter(|&&m| m != u32::MAX).count(),
            item_count: item_map.iter().filter(|&&m| m != u32::MAX).count(),
            user_labels,
            item_labels,
        }
    }

    pub fn stats(&self) -> DatasetStats {
        let cells = (self.user_count * self.item_count) as f64;
        let density = if cells > 0.0 {
            self.len() as f64 / cells
        } else {
            0.0
        };
        DatasetStats {
            users: self.user_count,
            items: self.item_count,
            interactions: self.len(),
            sparsity: 100.0 * (1.0 - density),
        }
    }

    /// Writes `user \t item` lines using labels when present.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for &(u, v) in &self.pairs {
            let (u, v) = (u as usize, v as usize);
            let res = match (self.user_labels.get(u), self.item_labels.get(v)) {
                (Some(ul), Some(il)) => writeln!(out, "{ul}\t{il}"),
                _ => writeln!(out, "{u}\t{v}"),
            };
            res.map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads `user \t item` lines where both columns are already dense indices.
    pub fn read_indexed_tsv(path: &Path, user_count: usize, item_count: usize) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split('\t');
            let mut index = |what: &str, bound: usize| -> Result<u32> {
                let tok = cols.next().ok_or_else(|| Error::Parse {
                    line: i + 1,
                    message: format!("missing {what} column"),
                })?;
                let idx: u32 = tok.trim().parse().map_err(|_| Error::Parse {
                    line: i + 1,
                    message: format!("{what} index {tok:?} is not an integer"),
                })?;
                if idx as usize >= bound {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("{what} index {idx} out of range {bound}"),
                    });
                }
                Ok(idx)
            };
            let u = index("user", user_count)?;
            let v = index("item", item_count)?;
            pairs.push((u, v));
        }
        Ok(EdgeList {
            pairs,
            user_count,
            item_count,
            ..Default::default()
        })
    }
}

fn renumber(map: &mut [u32], labels: &[String]) -> Vec<String> {
    let mut next = 0u32;
    let mut kept = Vec::new();
    for (old, slot) in map.iter_mut().enumerate() {
        if *slot != u32::MAX {
            *slot = next;
            next += 1;
            if let Some(l) = labels.get(old) {
                kept.push(l.clone());
            }
        }
    }
    kept
}

/// Dataset summary in the users / items / interactions / sparsity(%) layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    /// Percentage of empty cells in the user-item matrix.
    pub sparsity: f64,
}

/// Reads a UTF-8 TSV of `user \t item [\t rating]` records.
///
/// Tokens are numbered in order of first appearance among the records that
/// survive the rating filter.
pub fn load_interactions(path: &Path, min_rating: Option<f64>) -> Result<EdgeList> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut users: HashMap<String, u32> = HashMap::new();
    let mut items: HashMap<String, u32> = HashMap::new();
    let mut edges = EdgeList::default();
    let mut seen = HashSet::new();

    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        let (user, item) = match cols.as_slice() {
            [u, v, ..] if !u.is_empty() && !v.is_empty() => (*u, *v),
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    message: "expected at least user and item columns".into(),
                })
            }
        };
        if let Some(raw) = cols.get(2).filter(|s| !s.is_empty()) {
            let rating: f64 = raw.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("rating {raw:?} is not a number"),
            })?;
            if min_rating.is_some_and(|min| rating < min) {
                continue;
            }
        }
        let u = *users.entry(user.to_string()).or_insert_with(|| {
            edges.user_labels.push(user.to_string());
            edges.user_labels.len() as u32 - 1
        });
        let v = *items.entry(item.to_string()).or_insert_with(|| {
            edges.item_labels.push(item.to_string());
            edges.item_labels.len() as u32 - 1
        });
        if seen.insert((u, v)) {
            edges.pairs.push((u, v));
        }
    }
    if edges.is_empty() {
        return Err(Error::EmptyDataset { stage: "loading" });
    }
    edges.user_count = edges.user_labels.len();
    edges.item_count = edges.item_labels.len();
    Ok(edges)
}

/// Repeatedly removes users and items with fewer than `k` interactions.
pub fn k_core_filter(edges: &EdgeList, k: usize) -> Result<EdgeList> {
    if k == 0 {
        return Err(Error::Config("k-core requires k >= 1".into()));
    }
    let mut user_deg = edges.user_degrees();
    let mut item_deg = edges.item_degrees();
    let mut user_edges = vec![Vec::new(); edges.user_count];
    let mut item_edges = vec![Vec::new(); edges.item_count];
    for (e, &(u, v)) in edges.pairs.iter().enumerate() {
        user_edges[u as usize].push(e);
        item_edges[v as usize].push(e);
    }

    let mut alive = vec![true; edges.len()];
    let mut user_gone = vec![false; edges.user_count];
    let mut item_gone = vec![false; edges.item_count];
    // (is_user, index)
    let mut queue: VecDeque<(bool, usize)> = VecDeque::new();
    for (u, &d) in user_deg.iter().enumerate() {
        if d < k {
            user_gone[u] = true;
            queue.push_back((true, u));
        }
    }
    for (v, &d) in item_deg.iter().enumerate() {
        if d < k {
            item_gone[v] = true;
            queue.push_back((false, v));
        }
    }
    while let Some((is_user, node)) = queue.pop_front() {
        let incident = if is_user {
            &user_edges[node]
        } else {
            &item_edges[node]
        };
        for &e in incident {
            if !alive[e] {
                continue;
            }
            alive[e] = false;
            let (u, v) = edges.pairs[e];
            let (u, v) = (u as usize, v as usize);
            user_deg[u] -= 1;
            item_deg[v] -= 1;
            if !user_gone[u] && user_deg[u] < k {
                user_gone[u] = true;
                queue.push_back((true, u));
            }
            if !item_gone[v] && item_deg[v] < k {
                item_gone[v] = true;
                queue.push_back((false, v));
            }
        }
    }

    let kept: Vec<_> = edges
        .pairs
        .iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|(&p, _)| p)
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyDataset { stage: "k-core filtering" });
    }
    Ok(edges.with_pairs(kept).compact())
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Keeps the connected component with the most nodes; ties go to the most
/// edges, then to the component containing the lowest user index.
pub fn largest_connected_component(edges: &EdgeList) -> Result<EdgeList> {
    if edges.is_empty() {
        return Err(Error::EmptyDataset {
            stage: "component extraction",
        });
    }
    let m = edges.user_count;
    let mut uf = UnionFind::new(m + edges.item_count);
    for &(u, v) in &edges.pairs {
        uf.union(u as usize, m + v as usize);
    }

    // root -> (nodes, edges, smallest user index)
    let mut comps: HashMap<usize, (usize, usize, usize)> = HashMap::new();
    let touched_users = edges.user_degrees();
    let touched_items = edges.item_degrees();
    for (u, _) in touched_users.iter().enumerate().filter(|(_, &d)| d > 0) {
        let c = comps.entry(uf.find(u)).or_insert((0, 0, usize::MAX));
        c.0 += 1;
        c.2 = c.2.min(u);
    }
    for (v, _) in touched_items.iter().enumerate().filter(|(_, &d)| d > 0) {
        comps.entry(uf.find(m + v)).or_insert((0, 0, usize::MAX)).0 += 1;
    }
    for &(u, _) in &edges.pairs {
        comps.get_mut(&uf.find(u as usize)).unwrap().1 += 1;
    }
    let best = comps
        .iter()
        .max_by(|a, b| {
            let (na, ea, ua) = *a.1;
            let (nb, eb, ub) = *b.1;
            na.cmp(&nb).then(ea.cmp(&eb)).then(ub.cmp(&ua))
        })
        .map(|(&root, _)| root)
        .unwrap();

    let kept: Vec<_> = edges
        .pairs
        .iter()
        .copied()
        .filter(|&(u, _)| uf.find(u as usize) == best)
        .collect();
    Ok(edges.with_pairs(kept).compact())
}
