//! Training objectives with hand-derived gradients.
//!
//! Every `*_grad` function returns the loss value together with its gradient
//! with respect to each matrix input. Pairwise terms are evaluated in row
//! blocks so a batch never materializes a full `B × B` matrix.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::NORM_FLOOR;

const BLOCK: usize = 512;

fn need_rows(got: usize, need: usize) -> Result<()> {
    if got < need {
        Err(Error::InsufficientBatch { got, need })
    } else {
        Ok(())
    }
}

fn same_shape(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn blocks(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).step_by(BLOCK).map(move |lo| (lo, (lo + BLOCK).min(n)))
}

/// Row-normalized copy plus the original norms; rows below the floor become zero.
fn unit_rows(x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms: Array1<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut u = x.to_owned();
    for (mut row, &n) in u.rows_mut().into_iter().zip(&norms) {
        if n > NORM_FLOOR {
            row /= n;
        } else {
            row.fill(0.0);
        }
    }
    (u, norms)
}

/// Pulls a gradient taken with respect to normalized rows back to the raw rows.
fn through_normalize(g: &Array2<f64>, unit: &Array2<f64>, norms: &Array1<f64>) -> Array2<f64> {
    let mut out = g.clone();
    for ((mut row, u), &n) in out.rows_mut().into_iter().zip(unit.rows()).zip(norms) {
        if n > NORM_FLOOR {
            let radial = row.dot(&u);
            row.scaled_add(-radial, &u);
            row /= n;
        } else {
            row.fill(0.0);
        }
    }
    out
}

/// Running log-sum-exp.
#[derive(Clone, Copy)]
struct Lse {
    max: f64,
    sum: f64,
}

impl Lse {
    fn new() -> Self {
        Lse { max: f64::NEG_INFINITY, sum: 0.0 }
    }

    fn push(&mut self, x: f64) {
        if x > self.max {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        } else {
            self.sum += (x - self.max).exp();
        }
    }

    fn value(&self) -> f64 {
        self.max + self.sum.ln()
    }
}

fn sq_norms(z: ArrayView2<f64>) -> Array1<f64> {
    z.rows().into_iter().map(|r| r.dot(&r)).collect()
}

/// Block of `-2 ‖z_i - z_j‖²` for rows `lo..hi` against all rows.
fn uniform_logits(z: ArrayView2<f64>, sq: &Array1<f64>, lo: usize, hi: usize) -> Array2<f64> {
    let mut g = z.slice(s![lo..hi, ..]).dot(&z.t());
    for (r, mut row) in g.rows_mut().into_iter().enumerate() {
        let i = lo + r;
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = (sq[i] + sq[j] - 2.0 * *v).max(0.0);
            *v = -2.0 * d2;
        }
    }
    g
}

/// A loss value with the gradients of its three inputs.
pub type ValueAndThreeGrads = (f64, Array2<f64>, Array2<f64>, Array2<f64>);

pub fn align_loss(z_u: ArrayView2<f64>, z_v: ArrayView2<f64>) -> Result<f64> {
    Ok(align_grad(z_u, z_v)?.0)
}

pub fn align_grad(z_u: ArrayView2<f64>, z_v: ArrayView2<f64>) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    same_shape(z_u, z_v)?;
    need_rows(z_u.nrows(), 1)?;
    let b = z_u.nrows() as f64;
    let diff = &z_u - &z_v;
    let value = diff.iter().map(|x| x * x).sum::<f64>() / b;
    let gu = &diff * (2.0 / b);
    let gv = -&gu;
    Ok((value, gu, gv))
}

pub fn uniform_loss(z: ArrayView2<f64>) -> Result<f64> {
    need_rows(z.nrows(), 2)?;
    let sq = sq_norms(z);
    let mut lse = Lse::new();
    for (lo, hi) in blocks(z.nrows()) {
        let logits = uniform_logits(z, &sq, lo, hi);
        for (r, row) in logits.rows().into_iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                if j != lo + r {
                    lse.push(x);
                }
            }
        }
    }
    let b = z.nrows() as f64;
    Ok(lse.value() - (b * (b - 1.0)).ln())
}

/// Normalized ordered-pair weights `π_mn` for rows `lo..hi`, diagonal zero.
pub(crate) fn uniform_weights_block(z: ArrayView2<f64>, sq: &Array1<f64>, log_s: f64, lo: usize, hi: usize) -> Array2<f64> {
    let mut p = uniform_logits(z, sq, lo, hi);
    for (r, mut row) in p.rows_mut().into_iter().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if j == lo + r { 0.0 } else { (*v - log_s).exp() };
        }
    }
    p
}

pub fn uniform_grad(z: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    let value = uniform_loss(z)?;
    let b = z.nrows() as f64;
    let log_s = value + (b * (b - 1.0)).ln();
    let sq = sq_norms(z);
    let mut grad = Array2::zeros(z.dim());
    for (lo, hi) in blocks(z.nrows()) {
        let p = uniform_weights_block(z, &sq, log_s, lo, hi);
        let rowsum = p.sum_axis(Axis(1));
        // grad_m = -8 Σ_n π_mn (z_m - z_n)
        let mut g = p.dot(&z);
        let zc = z.slice(s![lo..hi, ..]);
        for ((mut gr, zr), &r) in g.rows_mut().into_iter().zip(zc.rows()).zip(&rowsum) {
            gr.scaled_add(-r, &zr);
            gr *= 8.0;
        }
        grad.slice_mut(s![lo..hi, ..]).assign(&g);
    }
    Ok((value, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UniformityTarget {
    UserOnly,
    UserAndItem,
    ItemOnly,
}

impl UniformityTarget {
    pub fn users(self) -> bool {
        matches!(self, UniformityTarget::UserOnly | UniformityTarget::UserAndItem)
    }

    pub fn items(self) -> bool {
        matches!(self, UniformityTarget::ItemOnly | UniformityTarget::UserAndItem)
    }
}

impl std::str::FromStr for UniformityTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "user_only" => Ok(UniformityTarget::UserOnly),
            "user_and_item" => Ok(UniformityTarget::UserAndItem),
            "item_only" => Ok(UniformityTarget::ItemOnly),
            _ => Err(Error::Config(format!("unknown uniformity target {s:?}"))),
        }
    }
}

pub fn au_loss(z_u: ArrayView2<f64>, z_v: ArrayView2<f64>, omega: f64, target: UniformityTarget) -> Result<f64> {
    if omega.is_nan() || omega < 0.0 {
        return Err(Error::Config(format!("omega must be >= 0, got {omega}")));
    }
    let mut value = align_loss(z_u, z_v)?;
    if target.users() {
        value += omega * uniform_loss(z_u)?;
    }
    if target.items() {
        value += omega * uniform_loss(z_v)?;
    }
    Ok(value)
}

pub fn orthogonality_penalty(w: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let mut m = w.t().dot(&w);
    for i in 0..m.nrows() {
        m[[i, i]] -= 1.0;
    }
    let value = m.iter().map(|x| x * x).sum();
    (value, w.dot(&m) * 4.0)
}

pub fn coarse_loss(z: ArrayView2<f64>, anchors: ArrayView2<f64>, coarse_map: ArrayView2<f64>) -> Result<f64> {
    Ok(coarse_grad(z, anchors, coarse_map)?.0)
}

/// Gradients are with respect to `z`, `anchors` and `coarse_map`.
pub fn coarse_grad(
    z: ArrayView2<f64>,
    anchors: ArrayView2<f64>,
    coarse_map: ArrayView2<f64>,
) -> Result<ValueAndThreeGrads> {
    same_shape(z, anchors)?;
    need_rows(z.nrows(), 1)?;
    let d = z.ncols();
    if coarse_map.dim() != (d, d) {
        return Err(Error::Shape(format!("coarse map is {:?}, need {d}×{d}", coarse_map.dim())));
    }
    let projected = anchors.dot(&coarse_map.t());
    let (zu, zn) = unit_rows(z);
    let (pu, pn) = unit_rows(projected.view());
    if let Some(b) = pn.iter().position(|&n| n <= NORM_FLOOR) {
        return Err(Error::Degenerate(format!("projected anchor {b} has zero norm")));
    }
    if let Some(b) = zn.iter().position(|&n| n <= NORM_FLOOR) {
        return Err(Error::Degenerate(format!("representation {b} has zero norm")));
    }
    let b = z.nrows() as f64;
    let cos: Array1<f64> = zu.rows().into_iter().zip(pu.rows()).map(|(a, c)| a.dot(&c)).collect();
    let (penalty, g_pen) = orthogonality_penalty(coarse_map);
    let value = cos.iter().map(|c| 1.0 - c).sum::<f64>() / b + penalty;
    // d(1 - cos)/dẑ = -p̂, d(1 - cos)/dp̂ = -ẑ
    let gz = through_normalize(&(&pu * (-1.0 / b)), &zu, &zn);
    let gp = through_normalize(&(&zu * (-1.0 / b)), &pu, &pn);
    let ga = gp.dot(&coarse_map);
    let gw = gp.t().dot(&anchors) + g_pen;
    Ok((value, gz, ga, gw))
}

/// Batch-local nearest neighbor by cosine, lowest index on ties.
pub fn mine_neighbors(z: ArrayView2<f64>) -> Result<Vec<usize>> {
    need_rows(z.nrows(), 2)?;
    let (u, _) = unit_rows(z);
    let n = u.nrows();
    let mut out = Vec::with_capacity(n);
    for (lo, hi) in blocks(n) {
        let sims = u.slice(s![lo..hi, ..]).dot(&u.t());
        for (r, row) in sims.rows().into_iter().enumerate() {
            let i = lo + r;
            let approx_max = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &c)| c)
                .fold(f64::NEG_INFINITY, f64::max);
            // Blocked products may round differently from a plain dot, so
            // near-maximal candidates are re-scored sequentially.
            let mut best = usize::MAX;
            let mut best_cos = f64::NEG_INFINITY;
            for (j, &c) in row.iter().enumerate() {
                if j == i || c < approx_max - 1e-9 {
                    continue;
                }
                let exact = seq_dot(u.row(i).as_slice().unwrap(), u.row(j).as_slice().unwrap());
                if exact > best_cos {
                    best_cos = exact;
                    best = j;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

fn seq_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn fine_loss(z: ArrayView2<f64>, c_pro: ArrayView2<f64>, neighbors: &[usize]) -> Result<f64> {
    Ok(fine_grad(z, c_pro, neighbors)?.0)
}

/// Gradients are with respect to `z` and `c_pro`; neighbors are held fixed.
pub fn fine_grad(
    z: ArrayView2<f64>,
    c_pro: ArrayView2<f64>,
    neighbors: &[usize],
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    same_shape(z, c_pro)?;
    let n = z.nrows();
    need_rows(n, 2)?;
    if neighbors.len() != n || neighbors.iter().enumerate().any(|(i, &j)| j >= n || j == i) {
        return Err(Error::Shape("neighbor indices do not fit the batch".into()));
    }
    let (zu, zn) = unit_rows(z);
    let (cu, cn) = unit_rows(c_pro);
    let nf = n as f64;

    let mut positive = 0.0;
    let mut lse = Lse::new();
    for (lo, hi) in blocks(n) {
        let cos = zu.slice(s![lo..hi, ..]).dot(&cu.t());
        for (r, row) in cos.rows().into_iter().enumerate() {
            let star = neighbors[lo + r];
            for (j, &c) in row.iter().enumerate() {
                if j == star {
                    positive += c;
                } else {
                    lse.push(c);
                }
            }
        }
    }
    let log_s = lse.value();
    let value = -(positive / nf - (log_s - (nf * (nf - 1.0)).ln()));

    let mut gzu = Array2::zeros(z.dim());
    let mut gcu = Array2::<f64>::zeros(c_pro.dim());
    for (lo, hi) in blocks(n) {
        let mut gc = zu.slice(s![lo..hi, ..]).dot(&cu.t());
        for (r, mut row) in gc.rows_mut().into_iter().enumerate() {
            let star = neighbors[lo + r];
            for (j, v) in row.iter_mut().enumerate() {
                *v = if j == star { -1.0 / nf } else { (*v - log_s).exp() };
            }
        }
        gzu.slice_mut(s![lo..hi, ..]).assign(&gc.dot(&cu));
        gcu += &gc.t().dot(&zu.slice(s![lo..hi, ..]));
    }
    Ok((
        value,
        through_normalize(&gzu, &zu, &zn),
        through_normalize(&gcu, &cu, &cn),
    ))
}

pub fn infonce(a: ArrayView2<f64>, b: ArrayView2<f64>, tau: f64) -> Result<f64> {
    Ok(infonce_grad(a, b, tau)?.0)
}

pub fn infonce_grad(a: ArrayView2<f64>, b: ArrayView2<f64>, tau: f64) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    same_shape(a, b)?;
    let n = a.nrows();
    need_rows(n, 1)?;
    let nf = n as f64;
    let mut value = 0.0;
    let mut ga = Array2::zeros(a.dim());
    let mut gb = Array2::<f64>::zeros(b.dim());
    for (lo, hi) in blocks(n) {
        let mut p = a.slice(s![lo..hi, ..]).dot(&b.t()) / tau;
        for (r, mut row) in p.rows_mut().into_iter().enumerate() {
            let i = lo + r;
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            value += lse - row[i];
            row.mapv_inplace(|x| (x - lse).exp() / (nf * tau));
            row[i] -= 1.0 / (nf * tau);
        }
        ga.slice_mut(s![lo..hi, ..]).assign(&p.dot(&b));
        gb += &p.t().dot(&a.slice(s![lo..hi, ..]));
    }
    Ok((value / nf, ga, gb))
}

pub fn intra_loss(
    z_u: ArrayView2<f64>,
    z_v: ArrayView2<f64>,
    mu_u: ArrayView2<f64>,
    mu_v: ArrayView2<f64>,
    tau: f64,
) -> Result<f64> {
    Ok(infonce(z_u, mu_u, tau)? + infonce(z_v, mu_v, tau)?)
}

pub fn inter_loss(
    z_u: ArrayView2<f64>,
    z_v: ArrayView2<f64>,
    mu_u: ArrayView2<f64>,
    mu_v: ArrayView2<f64>,
    tau: f64,
) -> Result<f64> {
    Ok(infonce(z_u, z_v, tau)? + infonce(mu_u, mu_v, tau)?)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn bpr_loss(z_u: ArrayView2<f64>, z_pos: ArrayView2<f64>, z_neg: ArrayView2<f64>) -> Result<f64> {
    Ok(bpr_grad(z_u, z_pos, z_neg)?.0)
}

/// Gradients are with respect to users, positives and negatives.
pub fn bpr_grad(
    z_u: ArrayView2<f64>,
    z_pos: ArrayView2<f64>,
    z_neg: ArrayView2<f64>,
) -> Result<ValueAndThreeGrads> {
    same_shape(z_u, z_pos)?;
    same_shape(z_u, z_neg)?;
    need_rows(z_u.nrows(), 1)?;
    let nf = z_u.nrows() as f64;
    let diff = &z_pos - &z_neg;
    let mut value = 0.0;
    let mut gu = Array2::zeros(z_u.dim());
    let mut gp = Array2::zeros(z_u.dim());
    for (b, (u, dv)) in z_u.rows().into_iter().zip(diff.rows()).enumerate() {
        let x = u.dot(&dv);
        value += softplus(-x);
        let g = -crate::intent::sigmoid(-x) / nf;
        gu.row_mut(b).assign(&(&dv * g));
        gp.row_mut(b).assign(&(&u * g));
    }
    let gn = -&gp;
    Ok((value / nf, gu, gp, gn))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "au")]
    Au,
    #[serde(rename = "bpr")]
    Bpr,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "au" | "AU" => Ok(Objective::Au),
            "bpr" | "BPR" => Ok(Objective::Bpr),
            _ => Err(Error::Config(format!("unknown objective {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub use_fine: bool,
    pub use_coarse: bool,
    pub use_intra: bool,
    pub use_inter: bool,
    /// Intent reconstruction; when off, intra regularization is off as well.
    pub use_dual_intent: bool,
    pub uniformity_target: UniformityTarget,
    pub objective: Objective,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            use_fine: true,
            use_coarse: true,
            use_intra: true,
            use_inter: true,
            use_dual_intent: true,
            uniformity_target: UniformityTarget::UserOnly,
            objective: Objective::Au,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub omega: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Align,
    UniformUser,
    UniformItem,
    Bpr,
    Coarse,
    Fine,
    Intra,
    Inter,
    L2,
}

impl LossToggles {
    pub fn enabled(&self, c: Component) -> bool {
        let au = self.objective == Objective::Au;
        match c {
            Component::Align => au,
            Component::UniformUser => au && self.uniformity_target.users(),
            Component::UniformItem => au && self.uniformity_target.items(),
            Component::Bpr => !au,
            Component::Coarse => self.use_coarse,
            Component::Fine => self.use_fine,
            Component::Intra => self.use_intra && self.use_dual_intent,
            Component::Inter => self.use_inter,
            Component::L2 => true,
        }
    }
}

impl LossWeights {
    /// Weight of a component in the total; zero when the toggles disable it.
    pub fn coefficient(&self, c: Component, toggles: &LossToggles) -> f64 {
        if !toggles.enabled(c) {
            return 0.0;
        }
        match c {
            Component::Align | Component::Bpr => 1.0,
            Component::UniformUser | Component::UniformItem => self.omega,
            Component::Coarse | Component::Fine => self.lambda1,
            Component::Intra | Component::Inter => self.lambda2,
            Component::L2 => self.weight_decay,
        }
    }
}

/// Raw component values; `l2_reg` holds `‖Θ‖²` before weight decay.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub align: f64,
    pub uniform_user: f64,
    pub uniform_item: f64,
    pub bpr: f64,
    pub coarse: f64,
    pub fine: f64,
    pub intra: f64,
    pub inter: f64,
    pub l2_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn get(&self, c: Component) -> f64 {
        match c {
            Component::Align => self.align,
            Component::UniformUser => self.uniform_user,
            Component::UniformItem => self.uniform_item,
            Component::Bpr => self.bpr,
            Component::Coarse => self.coarse,
            Component::Fine => self.fine,
            Component::Intra => self.intra,
            Component::Inter => self.inter,
            Component::L2 => self.l2_reg,
        }
    }

    fn slot(&mut self, c: Component) -> &mut f64 {
        match c {
            Component::Align => &mut self.align,
            Component::UniformUser => &mut self.uniform_user,
            Component::UniformItem => &mut self.uniform_item,
            Component::Bpr => &mut self.bpr,
            Component::Coarse => &mut self.coarse,
            Component::Fine => &mut self.fine,
            Component::Intra => &mut self.intra,
            Component::Inter => &mut self.inter,
            Component::L2 => &mut self.l2_reg,
        }
    }

    pub fn set(&mut self, c: Component, v: f64) {
        *self.slot(c) = v;
    }

    pub fn is_finite(&self) -> bool {
        ALL_COMPONENTS.iter().all(|&c| self.get(c).is_finite()) && self.total.is_finite()
    }

    /// Componentwise mean of several breakdowns.
    pub fn mean(parts: &[LossBreakdown]) -> LossBreakdown {
        let mut out = LossBreakdown::default();
        if parts.is_empty() {
            return out;
        }
        let n = parts.len() as f64;
        for &c in &ALL_COMPONENTS {
            out.set(c, parts.iter().map(|p| p.get(c)).sum::<f64>() / n);
        }
        out.total = parts.iter().map(|p| p.total).sum::<f64>() / n;
        out
    }
}

pub const ALL_COMPONENTS: [Component; 9] = [
    Component::Align,
    Component::UniformUser,
    Component::UniformItem,
    Component::Bpr,
    Component::Coarse,
    Component::Fine,
    Component::Intra,
    Component::Inter,
    Component::L2,
];

/// Zeroes disabled components and fills in the weighted total.
pub fn total_loss(parts: LossBreakdown, weights: &LossWeights, toggles: &LossToggles) -> LossBreakdown {
    let mut out = LossBreakdown::default();
    let mut total = 0.0;
    for &c in &ALL_COMPONENTS {
        if toggles.enabled(c) {
            let v = parts.get(c);
            out.set(c, v);
            total += weights.coefficient(c, toggles) * v;
        }
    }
    out.total = total;
    out
}
