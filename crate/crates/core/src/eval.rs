//! Full-ranking top-N evaluation, sparsity groups and paired significance.

use std::cmp::Ordering;

use ndarray::{s, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::EdgeList;
use crate::error::{Error, Result};

pub const CUTOFFS: [usize; 3] = [5, 10, 20];
pub const GROUPS: usize = 4;
const USER_BLOCK: usize = 256;

fn better(scores: ArrayView1<f64>, a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Indices of the `n` highest scores, excluding `exclude`; ties go to the
/// lower index.
pub fn top_n(scores: ArrayView1<f64>, exclude: &[u32], n: usize) -> Result<Vec<usize>> {
    let mut masked = vec![false; scores.len()];
    for &e in exclude {
        if let Some(m) = masked.get_mut(e as usize) {
            *m = true;
        }
    }
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|&i| !masked[i]).collect();
    if n > candidates.len() {
        return Err(Error::CutoffTooLarge { n, available: candidates.len() });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if n < candidates.len() {
        candidates.select_nth_unstable_by(n - 1, |&a, &b| better(scores, a, b));
        candidates.truncate(n);
    }
    candidates.sort_unstable_by(|&a, &b| better(scores, a, b));
    Ok(candidates)
}

/// Top-N items for `user` under inner-product scores of unit representations.
pub fn rank_items(
    z_u: ArrayView2<f64>,
    z_v: ArrayView2<f64>,
    user: usize,
    exclude: &[u32],
    n: usize,
) -> Result<Vec<usize>> {
    if user >= z_u.nrows() {
        return Err(Error::Shape(format!("user {user} out of range")));
    }
    let scores = z_v.dot(&z_u.row(user));
    top_n(scores.view(), exclude, n)
}

/// `None` when `relevant` is empty; such users are skipped.
pub fn recall_at_n(topn: &[usize], relevant: &[u32]) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hits = topn.iter().filter(|&&i| relevant.contains(&(i as u32))).count();
    Some(hits as f64 / relevant.len() as f64)
}

pub fn ndcg_at_n(topn: &[usize], relevant: &[u32]) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let gain = |r: usize| 1.0 / ((r + 1) as f64).log2();
    let dcg: f64 = topn
        .iter()
        .enumerate()
        .filter(|(_, &i)| relevant.contains(&(i as u32)))
        .map(|(r, _)| gain(r + 1))
        .sum();
    let idcg: f64 = (1..=topn.len().min(relevant.len())).map(gain).sum();
    Some(if idcg > 0.0 { dcg / idcg } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub n: usize,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: usize,
    pub users: usize,
    pub min_degree: usize,
    pub max_degree: usize,
    pub cutoffs: Vec<CutoffMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub users_evaluated: usize,
    pub cutoffs: Vec<CutoffMetrics>,
    pub groups: Vec<GroupMetrics>,
}

impl RunMetrics {
    pub fn at(&self, n: usize) -> Option<CutoffMetrics> {
        self.cutoffs.iter().copied().find(|c| c.n == n)
    }

    pub fn table_row(&self) -> TableRow {
        let g = |n| self.at(n).unwrap_or_default();
        TableRow {
            r5: g(5).recall,
            n5: g(5).ndcg,
            r10: g(10).recall,
            n10: g(10).ndcg,
            r20: g(20).recall,
            n20: g(20).ndcg,
        }
    }
}

/// The six headline columns.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TableRow {
    #[serde(rename = "R@5")]
    pub r5: f64,
    #[serde(rename = "N@5")]
    pub n5: f64,
    #[serde(rename = "R@10")]
    pub r10: f64,
    #[serde(rename = "N@10")]
    pub n10: f64,
    #[serde(rename = "R@20")]
    pub r20: f64,
    #[serde(rename = "N@20")]
    pub n20: f64,
}

impl TableRow {
    fn values(&self) -> [f64; 6] {
        [self.r5, self.n5, self.r10, self.n10, self.r20, self.n20]
    }

    fn from_values(v: [f64; 6]) -> Self {
        TableRow { r5: v[0], n5: v[1], r10: v[2], n10: v[3], r20: v[4], n20: v[5] }
    }

    pub fn mean(rows: &[TableRow]) -> TableRow {
        let n = rows.len().max(1) as f64;
        let mut acc = [0.0; 6];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        TableRow::from_values(acc.map(|a| a / n))
    }
}

/// Multi-seed report written as `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seeds: Vec<u64>,
    pub mean: TableRow,
    pub per_seed: Vec<TableRow>,
    pub runs: Vec<RunMetrics>,
}

impl MetricsReport {
    pub fn new(seeds: Vec<u64>, runs: Vec<RunMetrics>) -> Self {
        let per_seed: Vec<TableRow> = runs.iter().map(RunMetrics::table_row).collect();
        MetricsReport { seeds, mean: TableRow::mean(&per_seed), per_seed, runs }
    }
}

/// Group index per user: users sorted by train degree (then index) and cut
/// into `groups` equal-count buckets, sparsest first.
pub fn sparsity_groups(train: &EdgeList, groups: usize) -> Result<Vec<usize>> {
    if groups < 2 {
        return Err(Error::Config("need at least two sparsity groups".into()));
    }
    let n = train.user_count;
    if n < groups {
        return Err(Error::Config(format!("{n} users cannot fill {groups} groups")));
    }
    let degrees = train.user_degrees();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&u| (degrees[u], u));
    let mut out = vec![0; n];
    for (rank, &u) in order.iter().enumerate() {
        out[u] = rank * groups / n;
    }
    Ok(out)
}

/// Ranking metrics over every user with at least one relevant item.
///
/// Cutoffs larger than a user's candidate pool are clipped to the pool.
pub fn evaluate_embeddings(
    z_u: ArrayView2<f64>,
    z_v: ArrayView2<f64>,
    train: &EdgeList,
    relevant: &EdgeList,
    cutoffs: &[usize],
    groups: Option<usize>,
) -> Result<RunMetrics> {
    let excluded = train.items_by_user();
    let targets = relevant.items_by_user();
    let users: Vec<usize> = (0..targets.len()).filter(|&u| !targets[u].is_empty()).collect();
    if users.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let max_n = cutoffs.iter().copied().max().unwrap_or(0);
    let mut per_user: Vec<Vec<(f64, f64)>> = Vec::with_capacity(users.len());
    for chunk in users.chunks(USER_BLOCK) {
        let rows = z_u.select(ndarray::Axis(0), chunk);
        let scores = rows.dot(&z_v.t());
        for (k, &u) in chunk.iter().enumerate() {
            let ex = excluded.get(u).map(Vec::as_slice).unwrap_or(&[]);
            let available = z_v.nrows() - ex.len();
            let top = top_n(scores.slice(s![k, ..]), ex, max_n.min(available))?;
            per_user.push(
                cutoffs
                    .iter()
                    .map(|&n| {
                        let t = &top[..n.min(top.len())];
                        (
                            recall_at_n(t, &targets[u]).expect("nonempty"),
                            ndcg_at_n(t, &targets[u]).expect("nonempty"),
                        )
                    })
                    .collect(),
            );
        }
    }
    let summarize = |idx: &[usize]| -> Vec<CutoffMetrics> {
        cutoffs
            .iter()
            .enumerate()
            .map(|(c, &n)| {
                let k = idx.len().max(1) as f64;
                CutoffMetrics {
                    n,
                    recall: idx.iter().map(|&i| per_user[i][c].0).sum::<f64>() / k,
                    ndcg: idx.iter().map(|&i| per_user[i][c].1).sum::<f64>() / k,
                }
            })
            .collect()
    };
    let all: Vec<usize> = (0..users.len()).collect();
    let mut group_metrics = Vec::new();
    if let Some(g) = groups {
        let assignment = sparsity_groups(train, g)?;
        let degrees = train.user_degrees();
        for group in 0..g {
            let idx: Vec<usize> = all.iter().copied().filter(|&i| assignment[users[i]] == group).collect();
            let members = (0..train.user_count).filter(|&u| assignment[u] == group);
            let (lo, hi) = members.fold((usize::MAX, 0), |(lo, hi), u| (lo.min(degrees[u]), hi.max(degrees[u])));
            group_metrics.push(GroupMetrics {
                group,
                users: idx.len(),
                min_degree: lo,
                max_degree: hi,
                cutoffs: summarize(&idx),
            });
        }
    }
    Ok(RunMetrics { users_evaluated: users.len(), cutoffs: summarize(&all), groups: group_metrics })
}

/// Expected Recall@N of a uniformly random ranking, averaged over the users
/// that `evaluate_embeddings` would score.
pub fn random_recall_baseline(train: &EdgeList, relevant: &EdgeList, n: usize) -> Result<f64> {
    let excluded = train.items_by_user();
    let targets = relevant.items_by_user();
    let pools: Vec<usize> = (0..targets.len())
        .filter(|&u| !targets[u].is_empty())
        .map(|u| relevant.item_count - excluded.get(u).map_or(0, Vec::len))
        .collect();
    if pools.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    Ok(pools.iter().map(|&c| n.min(c) as f64 / c as f64).sum::<f64>() / pools.len() as f64)
}

/// Two-tailed paired t-test p-value.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::UndefinedTest(format!(
            "need two equal-length series of at least 2 values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        if mean == 0.0 {
            return Err(Error::UndefinedTest("all differences are zero".into()));
        }
        return Ok(0.0);
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::UndefinedTest(e.to_string()))?;
    Ok((2.0 * dist.sf(t.abs())).min(1.0))
}
