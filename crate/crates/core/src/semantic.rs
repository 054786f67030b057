//! Semantic side information: precomputed per-node vectors and the MLP that
//! projects them into the collaborative space.
//!
//! Vector files come in two layouts. The binary one is an 8-byte LE row
//! count, an 8-byte LE column count, then row-major `f32` LE values. Files
//! ending in `.tsv` or `.txt` hold one tab-separated row per line.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::data::InteractionGraph;
use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticStore {
    pub raw_user: Array2<f64>,
    pub raw_item: Array2<f64>,
}

impl SemanticStore {
    pub fn dim(&self) -> usize {
        self.raw_user.ncols()
    }

    /// Raw rows for stacked node ids (users first, then items).
    pub fn stacked_rows(&self, nodes: &[usize]) -> Array2<f64> {
        let m = self.raw_user.nrows();
        let mut out = Array2::zeros((nodes.len(), self.dim()));
        for (mut row, &n) in out.rows_mut().into_iter().zip(nodes) {
            if n < m {
                row.assign(&self.raw_user.row(n));
            } else {
                row.assign(&self.raw_item.row(n - m));
            }
        }
        out
    }
}

fn is_text(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("tsv") | Some("txt")
    )
}

pub fn read_vectors(path: &Path) -> Result<Array2<f64>> {
    if is_text(path) {
        return read_vectors_tsv(path);
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::Format(format!("{}: header truncated", path.display())));
    }
    let rows = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if rows.checked_mul(cols).and_then(|n| n.checked_mul(4)) != Some(body.len()) {
        return Err(Error::Format(format!(
            "{}: {rows}x{cols} header does not match {} payload bytes",
            path.display(),
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("size checked"))
}

fn read_vectors_tsv(path: &Path) -> Result<Array2<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split('\t')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse {
                line: i + 1,
                message: "non-numeric vector entry".into(),
            })?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Format(format!(
                    "{}: line {} has {} columns, expected {w}",
                    path.display(),
                    i + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        data.extend(row);
        rows += 1;
    }
    Ok(Array2::from_shape_vec((rows, width.unwrap_or(0)), data).expect("rows are uniform"))
}

pub fn write_vectors(path: &Path, m: ArrayView2<f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let res = if is_text(path) {
        m.rows().into_iter().try_for_each(|r| {
            let line: Vec<String> = r.iter().map(|v| format!("{}", *v as f32)).collect();
            writeln!(out, "{}", line.join("\t"))
        })
    } else {
        let mut buf = Vec::with_capacity(16 + 4 * m.len());
        buf.extend((m.nrows() as u64).to_le_bytes());
        buf.extend((m.ncols() as u64).to_le_bytes());
        for v in m.iter() {
            buf.extend((*v as f32).to_le_bytes());
        }
        out.write_all(&buf)
    };
    res.and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

pub fn load_semantic_vectors(
    user_path: &Path,
    item_path: &Path,
    expected_users: usize,
    expected_items: usize,
) -> Result<SemanticStore> {
    let raw_user = read_vectors(user_path)?;
    let raw_item = read_vectors(item_path)?;
    if raw_user.nrows() != expected_users {
        return Err(Error::Alignment(format!(
            "{} has {} rows for {expected_users} users",
            user_path.display(),
            raw_user.nrows()
        )));
    }
    if raw_item.nrows() != expected_items {
        return Err(Error::Alignment(format!(
            "{} has {} rows for {expected_items} items",
            item_path.display(),
            raw_item.nrows()
        )));
    }
    if raw_user.ncols() != raw_item.ncols() {
        return Err(Error::Format(format!(
            "user vectors are {}-dimensional, item vectors {}",
            raw_user.ncols(),
            raw_item.ncols()
        )));
    }
    if raw_user.iter().chain(raw_item.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Format("semantic vectors contain non-finite entries".into()));
    }
    Ok(SemanticStore { raw_user, raw_item })
}

/// Cluster-structured stand-in for text-derived vectors.
///
/// Item `i` sits in cluster `i % clusters` around a random unit centroid;
/// each user is the mean of its training items.
pub fn synth_semantic_vectors(
    graph: &InteractionGraph,
    dim: usize,
    clusters: usize,
    noise_scale: f64,
    seed: u64,
) -> SemanticStore {
    assert!(clusters >= 1, "need at least one cluster");
    let mut rng = rng::stream(seed, Stream::Semantic);
    let mut centroids = Array2::<f64>::zeros((clusters, dim));
    for mut c in centroids.rows_mut() {
        c.mapv_inplace(|_| rng.sample(StandardNormal));
        let n = c.dot(&c).sqrt();
        c /= n;
    }
    let mut raw_item = Array2::zeros((graph.item_count, dim));
    for (i, mut row) in raw_item.rows_mut().into_iter().enumerate() {
        row.assign(&centroids.row(i % clusters));
        if noise_scale > 0.0 {
            for v in row.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += noise_scale * z;
            }
        }
    }
    let mut raw_user = Array2::zeros((graph.user_count, dim));
    for (u, mut row) in raw_user.rows_mut().into_iter().enumerate() {
        let items = graph.items_of(u);
        for &v in items {
            row += &raw_item.row(v as usize);
        }
        row /= items.len().max(1) as f64;
    }
    SemanticStore { raw_user, raw_item }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

/// Two affine layers with an elementwise activation between them.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    /// `source_dim × hidden`
    pub w1: Array2<f64>,
    /// `1 × hidden`
    pub b1: Array2<f64>,
    /// `hidden × out`
    pub w2: Array2<f64>,
    /// `1 × out`
    pub b2: Array2<f64>,
    pub activation: Activation,
}

fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

impl ProjectorParams {
    pub fn init(source_dim: usize, hidden: usize, out: usize, rng: &mut Rng) -> Self {
        ProjectorParams {
            w1: glorot(source_dim, hidden, rng),
            b1: Array2::zeros((1, hidden)),
            w2: glorot(hidden, out, rng),
            b2: Array2::zeros((1, out)),
            activation: Activation::Tanh,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.ncols()
    }

    fn activate(&self, x: Array2<f64>) -> Array2<f64> {
        match self.activation {
            Activation::Tanh => x.mapv(f64::tanh),
            Activation::Identity => x,
        }
    }

    /// Unnormalized projection of raw rows.
    pub fn forward(&self, raw: ArrayView2<f64>) -> Result<Array2<f64>> {
        if raw.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "projector expects {} inputs, got {}",
                self.input_dim(),
                raw.ncols()
            )));
        }
        let hidden = self.activate(raw.dot(&self.w1) + &self.b1);
        Ok(hidden.dot(&self.w2) + &self.b2)
    }

    /// Records the projection on a tape; returns unnormalized output.
    pub(crate) fn record(
        &self,
        tape: &mut Tape,
        vars: &ProjectorVars,
        raw: Var,
    ) -> Var {
        let h = tape.matmul(raw, vars.w1);
        let h = tape.add_row(h, vars.b1);
        let h = match self.activation {
            Activation::Tanh => tape.tanh(h),
            Activation::Identity => h,
        };
        let o = tape.matmul(h, vars.w2);
        tape.add_row(o, vars.b2)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ProjectorVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn normalize_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > crate::tape::NORM_FLOOR {
            row /= n;
        } else {
            row.fill(0.0);
        }
    }
    m
}

/// Projected, unit-normalized semantic vectors for every user and item.
pub fn project_semantic(
    store: &SemanticStore,
    params: &ProjectorParams,
) -> Result<(Array2<f64>, Array2<f64>)> {
    Ok((
        normalize_rows(params.forward(store.raw_user.view())?),
        normalize_rows(params.forward(store.raw_item.view())?),
    ))
}

pub(crate) fn row_count_check(store: &SemanticStore, users: usize, items: usize) -> Result<()> {
    if store.raw_user.nrows() != users || store.raw_item.nrows() != items {
        return Err(Error::Alignment(format!(
            "semantic store has {}/{} rows for {users}/{items} users/items",
            store.raw_user.nrows(),
            store.raw_item.nrows()
        )));
    }
    Ok(())
}
