//! Closed-form analysis of the uniformity gradient and representation geometry.
//!
//! With `e_mn = exp(-t‖z_m - z_n‖²)` over ordered pairs and
//! `π_mn = e_mn / Σ e`, the gradient of `log mean e` is
//! `-c Σ_n π_mn (z_m - z_n) = -c (L Z)_m` where `L = D - W`, `W = π`.
//! The implemented loss has `t = 2, c = 8`; the `t = 1, c = 4` convention
//! is available for comparison.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::uniform_loss;
use crate::rng::{self, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Convention {
    /// `t` in `exp(-t d²)`.
    pub kernel_scale: f64,
    /// `c` in `-c L Z`.
    pub gradient_scale: f64,
}

impl Convention {
    pub fn new(paper_coefficient: bool) -> Self {
        if paper_coefficient {
            Convention { kernel_scale: 1.0, gradient_scale: 4.0 }
        } else {
            Convention { kernel_scale: 2.0, gradient_scale: 8.0 }
        }
    }

    pub fn describe(&self) -> String {
        format!(
            "loss log mean_(m!=n) exp(-{} |z_m - z_n|^2); gradient -{} L Z",
            self.kernel_scale, self.gradient_scale
        )
    }
}

fn need_two(z: ArrayView2<f64>) -> Result<()> {
    if z.nrows() < 2 {
        return Err(Error::InsufficientBatch { got: z.nrows(), need: 2 });
    }
    Ok(())
}

fn sq_dist(z: ArrayView2<f64>, m: usize, n: usize) -> f64 {
    z.row(m).iter().zip(z.row(n)).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Normalized ordered-pair weights `π`, zero diagonal.
pub fn pair_weights(z: ArrayView2<f64>, conv: Convention) -> Result<Array2<f64>> {
    need_two(z)?;
    let b = z.nrows();
    let mut logits = Array2::from_elem((b, b), f64::NEG_INFINITY);
    let mut max = f64::NEG_INFINITY;
    for m in 0..b {
        for n in 0..b {
            if m != n {
                let l = -conv.kernel_scale * sq_dist(z, m, n);
                logits[[m, n]] = l;
                max = max.max(l);
            }
        }
    }
    let mut w = logits.mapv(|l| (l - max).exp());
    let s = w.sum();
    w /= s;
    Ok(w)
}

/// Per-row gradient by direct summation over pairs.
pub fn uniform_grad_closed_form(z: ArrayView2<f64>, paper_coefficient: bool) -> Result<Array2<f64>> {
    let conv = Convention::new(paper_coefficient);
    let w = pair_weights(z, conv)?;
    let mut g = Array2::zeros(z.dim());
    for m in 0..z.nrows() {
        for n in 0..z.nrows() {
            if m != n {
                let coef = -conv.gradient_scale * w[[m, n]];
                for j in 0..z.ncols() {
                    g[[m, j]] += coef * (z[[m, j]] - z[[n, j]]);
                }
            }
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianForm {
    pub gradient: Array2<f64>,
    pub weights: Array2<f64>,
    pub laplacian: Array2<f64>,
}

pub const CLOSED_FORM_TOLERANCE: f64 = 1e-10;

/// Gradient as `-c L Z`; fails if it disagrees with the per-row form.
pub fn laplacian_form(z: ArrayView2<f64>, paper_coefficient: bool) -> Result<LaplacianForm> {
    let conv = Convention::new(paper_coefficient);
    let weights = pair_weights(z, conv)?;
    let degrees = weights.sum_axis(Axis(1));
    let laplacian = Array2::from_diag(&degrees) - &weights;
    let gradient = laplacian.dot(&z) * -conv.gradient_scale;
    let per_row = uniform_grad_closed_form(z, paper_coefficient)?;
    let gap = max_abs_diff(&gradient, &per_row);
    if gap > CLOSED_FORM_TOLERANCE {
        return Err(Error::Invariant(format!("matrix and per-row gradients differ by {gap}")));
    }
    Ok(LaplacianForm { gradient, weights, laplacian })
}

/// `tr(Zᵀ L Z)`; fails if it disagrees with `½ Σ w_mn ‖z_m - z_n‖²`.
pub fn laplacian_energy(z: ArrayView2<f64>, paper_coefficient: bool) -> Result<f64> {
    let (trace, pairwise) = energy_both_ways(z, paper_coefficient)?;
    if (trace - pairwise).abs() > CLOSED_FORM_TOLERANCE {
        return Err(Error::Invariant(format!("trace {trace} vs pairwise {pairwise}")));
    }
    Ok(trace)
}

fn energy_both_ways(z: ArrayView2<f64>, paper_coefficient: bool) -> Result<(f64, f64)> {
    let w = pair_weights(z, Convention::new(paper_coefficient))?;
    let l = Array2::from_diag(&w.sum_axis(Axis(1))) - &w;
    let trace = z.t().dot(&l.dot(&z)).diag().sum();
    let mut pairwise = 0.0;
    for m in 0..z.nrows() {
        for n in 0..z.nrows() {
            if m != n {
                pairwise += w[[m, n]] * sq_dist(z, m, n);
            }
        }
    }
    Ok((trace, 0.5 * pairwise))
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Central differences of the uniformity loss (implemented convention).
pub fn uniform_grad_fd(z: ArrayView2<f64>, step: f64) -> Result<Array2<f64>> {
    let mut g = Array2::zeros(z.dim());
    let mut zp = z.to_owned();
    for idx in ndarray::indices(z.dim()) {
        let orig = zp[idx];
        zp[idx] = orig + step;
        let up = uniform_loss(zp.view())?;
        zp[idx] = orig - step;
        let down = uniform_loss(zp.view())?;
        zp[idx] = orig;
        g[idx] = (up - down) / (2.0 * step);
    }
    Ok(g)
}

/// Removes the radial component of each gradient row.
pub fn tangent_project(z: ArrayView2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut out = g.clone();
    for (mut row, zr) in out.rows_mut().into_iter().zip(z.rows()) {
        let n2 = zr.dot(&zr);
        if n2 > 0.0 {
            let k = row.dot(&zr) / n2;
            row.scaled_add(-k, &zr);
        }
    }
    out
}

/// Central differences of the loss composed with row normalization.
pub fn normalized_fd(z: ArrayView2<f64>, step: f64) -> Result<Array2<f64>> {
    let f = |m: &Array2<f64>| uniform_loss(crate::semantic::normalize_rows(m.clone()).view());
    let mut g = Array2::zeros(z.dim());
    let mut zp = z.to_owned();
    for idx in ndarray::indices(z.dim()) {
        let orig = zp[idx];
        zp[idx] = orig + step;
        let up = f(&zp)?;
        zp[idx] = orig - step;
        let down = f(&zp)?;
        zp[idx] = orig;
        g[idx] = (up - down) / (2.0 * step);
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tolerances {
    pub fd_abs: f64,
    pub closed_forms: f64,
    pub trace_identity: f64,
    pub row_sum: f64,
    pub tangent_abs: f64,
}

pub const TOLERANCES: Tolerances = Tolerances {
    fd_abs: 1e-6,
    closed_forms: 1e-10,
    trace_identity: 1e-10,
    row_sum: 1e-8,
    tangent_abs: 1e-6,
};

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCheckReport {
    pub instances: usize,
    pub convention: String,
    pub max_fd_abs_error: f64,
    pub max_closed_form_gap: f64,
    pub max_trace_identity_gap: f64,
    pub max_row_sum_norm: f64,
    pub max_tangent_abs_error: f64,
    pub tolerances: Tolerances,
    pub passed: bool,
}

/// Three-way agreement (finite differences, per-row, matrix form) plus the
/// trace identity, translation invariance and the tangent-space check.
pub fn check_instances(instances: &[Array2<f64>]) -> Result<GradientCheckReport> {
    let mut r = GradientCheckReport {
        instances: instances.len(),
        convention: Convention::new(false).describe(),
        max_fd_abs_error: 0.0,
        max_closed_form_gap: 0.0,
        max_trace_identity_gap: 0.0,
        max_row_sum_norm: 0.0,
        max_tangent_abs_error: 0.0,
        tolerances: TOLERANCES,
        passed: false,
    };
    for z in instances {
        let z = z.view();
        let per_row = uniform_grad_closed_form(z, false)?;
        let conv = Convention::new(false);
        let w = pair_weights(z, conv)?;
        let l = Array2::from_diag(&w.sum_axis(Axis(1))) - &w;
        let matrix = l.dot(&z) * -conv.gradient_scale;
        let fd = uniform_grad_fd(z, FD_STEP)?;
        let (trace, pairwise) = energy_both_ways(z, false)?;
        let row_sum: Array1<f64> = per_row.sum_axis(Axis(0));
        let tangent = tangent_project(z, &per_row);
        let nfd = normalized_fd(z, FD_STEP)?;
        r.max_fd_abs_error = r.max_fd_abs_error.max(max_abs_diff(&fd, &per_row));
        r.max_closed_form_gap = r.max_closed_form_gap.max(max_abs_diff(&matrix, &per_row));
        r.max_trace_identity_gap = r.max_trace_identity_gap.max((trace - pairwise).abs());
        r.max_row_sum_norm = r.max_row_sum_norm.max(row_sum.dot(&row_sum).sqrt());
        r.max_tangent_abs_error = r.max_tangent_abs_error.max(max_abs_diff(&tangent, &nfd));
    }
    let t = TOLERANCES;
    r.passed = r.max_fd_abs_error <= t.fd_abs
        && r.max_closed_form_gap <= t.closed_forms
        && r.max_trace_identity_gap <= t.trace_identity
        && r.max_row_sum_norm <= t.row_sum
        && r.max_tangent_abs_error <= t.tangent_abs;
    Ok(r)
}

/// Random unit-row instances with `2 ≤ B ≤ 8`, `2 ≤ d ≤ 6`.
pub fn random_instances(count: usize, rng: &mut Rng) -> Vec<Array2<f64>> {
    (0..count)
        .map(|_| {
            let b = rng.random_range(2..=8);
            let d = rng.random_range(2..=6);
            let z = Array2::from_shape_simple_fn((b, d), || rng.sample::<f64, _>(StandardNormal));
            crate::semantic::normalize_rows(z)
        })
        .collect()
}

pub const HISTOGRAM_BINS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeometryReport {
    pub sample_size: usize,
    /// Absent when no interactions were supplied.
    pub alignment: Option<f64>,
    pub uniformity_user: f64,
    pub uniformity_item: f64,
    pub laplacian_energy: f64,
    pub grad_norms_ambient: Vec<f64>,
    pub grad_norms_tangent: Vec<f64>,
    /// Counts of each sampled item's nearest-neighbor cosine over 16 equal
    /// bins of `[-1, 1]`.
    pub nn_cosine_histogram: Vec<usize>,
    pub convention: String,
}

/// Geometry of unit representations on a seeded sample.
pub fn measure_geometry(
    z_u: ArrayView2<f64>,
    z_v: ArrayView2<f64>,
    positives: &[(u32, u32)],
    sample_size: usize,
    seed: u64,
) -> Result<GeometryReport> {
    if sample_size < 2 {
        return Err(Error::InsufficientBatch { got: sample_size, need: 2 });
    }
    let mut rng = rng::stream(seed, Stream::Geometry);
    let mut pick = |n: usize| -> Result<Vec<usize>> {
        if n < 2 {
            return Err(Error::InsufficientBatch { got: n, need: 2 });
        }
        let mut idx = sample(&mut rng, n, sample_size.min(n)).into_vec();
        idx.sort_unstable();
        Ok(idx)
    };
    let users = z_u.select(Axis(0), &pick(z_u.nrows())?);
    let items = z_v.select(Axis(0), &pick(z_v.nrows())?);
    let alignment = if positives.is_empty() {
        None
    } else {
        let chosen = sample(&mut rng, positives.len(), sample_size.min(positives.len())).into_vec();
        let mut acc = 0.0;
        for &k in &chosen {
            let (u, v) = positives[k];
            let d = &z_u.row(u as usize) - &z_v.row(v as usize);
            acc += d.dot(&d);
        }
        Some(acc / chosen.len() as f64)
    };
    let grad = uniform_grad_closed_form(items.view(), false)?;
    let tangent = tangent_project(items.view(), &grad);
    let norms = |g: &Array2<f64>| g.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect::<Vec<_>>();
    let mut hist = vec![0; HISTOGRAM_BINS];
    for m in 0..items.nrows() {
        let best = (0..items.nrows())
            .filter(|&n| n != m)
            .map(|n| items.row(m).dot(&items.row(n)))
            .fold(f64::NEG_INFINITY, f64::max);
        let bin = (((best.clamp(-1.0, 1.0) + 1.0) / 2.0) * HISTOGRAM_BINS as f64) as usize;
        hist[bin.min(HISTOGRAM_BINS - 1)] += 1;
    }
    Ok(GeometryReport {
        sample_size,
        alignment,
        uniformity_user: uniform_loss(users.view())?,
        uniformity_item: uniform_loss(items.view())?,
        laplacian_energy: laplacian_energy(items.view(), false)?,
        grad_norms_ambient: norms(&grad),
        grad_norms_tangent: norms(&tangent),
        nn_cosine_histogram: hist,
        convention: Convention::new(false).describe(),
    })
}
