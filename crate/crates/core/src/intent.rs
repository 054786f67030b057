//! Prototype and distribution intents, and representation reconstruction.

use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::semantic::ProjectorParams;
use crate::tape::softmax_rows;

#[derive(Debug, Clone, PartialEq)]
pub struct IntentBank {
    /// Prototype intents, `K × d`.
    pub proto_bank: Array2<f64>,
    /// Distribution intents, `K × d`.
    pub dist_bank: Array2<f64>,
    /// Affinity projection for sampled directions, `K × d`.
    pub dist_proj: Array2<f64>,
    pub eta: f64,
    pub kappa: f64,
}

impl IntentBank {
    pub fn intents(&self) -> usize {
        self.proto_bank.nrows()
    }
}

/// Everything the optimizer updates.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub user_mu: Array2<f64>,
    pub item_mu: Array2<f64>,
    pub bank: IntentBank,
    pub projector: ProjectorParams,
    /// `d × d` map applied to coarse-matching anchors.
    pub coarse_map: Array2<f64>,
}

/// Shapes and scalars needed to initialize a [`ModelState`].
#[derive(Debug, Clone, Copy)]
pub struct ModelShape {
    pub users: usize,
    pub items: usize,
    pub dim: usize,
    pub intents: usize,
    pub source_dim: usize,
    pub hidden: usize,
    pub eta: f64,
    pub kappa: f64,
}

pub const PARAM_NAMES: [&str; 10] = [
    "user_mu",
    "item_mu",
    "proto_bank",
    "dist_bank",
    "dist_proj",
    "projector.w1",
    "projector.b1",
    "projector.w2",
    "projector.b2",
    "coarse_map",
];

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = rng.sample(StandardNormal);
        std * z
    })
}

impl ModelState {
    pub fn init(shape: ModelShape, rng: &mut Rng) -> Result<Self> {
        if shape.intents == 0 {
            return Err(Error::Config("need at least one intent".into()));
        }
        if shape.eta <= 0.0 || shape.kappa < 0.0 {
            return Err(Error::Config("eta must be > 0 and kappa >= 0".into()));
        }
        let d = shape.dim;
        let user_mu = gaussian(shape.users, d, 0.1, rng);
        let item_mu = gaussian(shape.items, d, 0.1, rng);
        let proto_bank = gaussian(shape.intents, d, 0.1, rng);
        let dist_bank = gaussian(shape.intents, d, 0.1, rng);
        let dist_proj = gaussian(shape.intents, d, 0.1, rng);
        let projector = ProjectorParams::init(shape.source_dim, shape.hidden, d, rng);
        let mut state = ModelState {
            user_mu,
            item_mu,
            bank: IntentBank {
                proto_bank,
                dist_bank,
                dist_proj,
                eta: shape.eta as f32 as f64,
                kappa: shape.kappa as f32 as f64,
            },
            projector,
            coarse_map: Array2::eye(d),
        };
        state.round_to_storage();
        Ok(state)
    }

    pub fn dim(&self) -> usize {
        self.user_mu.ncols()
    }

    /// Trainable tensors in [`PARAM_NAMES`] order.
    pub fn params(&self) -> [&Array2<f64>; 10] {
        [
            &self.user_mu,
            &self.item_mu,
            &self.bank.proto_bank,
            &self.bank.dist_bank,
            &self.bank.dist_proj,
            &self.projector.w1,
            &self.projector.b1,
            &self.projector.w2,
            &self.projector.b2,
            &self.coarse_map,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Array2<f64>; 10] {
        [
            &mut self.user_mu,
            &mut self.item_mu,
            &mut self.bank.proto_bank,
            &mut self.bank.dist_bank,
            &mut self.bank.dist_proj,
            &mut self.projector.w1,
            &mut self.projector.b1,
            &mut self.projector.w2,
            &mut self.projector.b2,
            &mut self.coarse_map,
        ]
    }

    /// Name of the first tensor holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        PARAM_NAMES
            .iter()
            .zip(self.params())
            .find(|(_, p)| p.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| *n)
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint precision.
    pub fn round_to_storage(&mut self) {
        for p in self.params_mut() {
            p.mapv_inplace(|v| v as f32 as f64);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.params().iter().map(|p| p.iter().map(|v| v * v).sum::<f64>()).sum()
    }
}

/// Soft assignment of unit semantic rows to prototypes.
pub fn prototype_assign(s: ArrayView2<f64>, proto_bank: ArrayView2<f64>, eta: f64) -> Result<Array2<f64>> {
    assign(s.dot(&proto_bank.t()), eta)
}

/// Soft assignment of sampled directions via the affinity `h · Wᵀ`.
pub fn distribution_assign(h: ArrayView2<f64>, dist_proj: ArrayView2<f64>, eta: f64) -> Result<Array2<f64>> {
    assign(h.dot(&dist_proj.t()), eta)
}

fn assign(logits: Array2<f64>, eta: f64) -> Result<Array2<f64>> {
    if eta.is_nan() || eta <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {eta}")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite assignment logits".into()));
    }
    Ok(softmax_rows(&logits, eta))
}

/// Convex combination of bank rows, `probs · bank`.
pub fn mix_intents(probs: ArrayView2<f64>, bank: ArrayView2<f64>) -> Result<Array2<f64>> {
    if probs.ncols() != bank.nrows() {
        return Err(Error::Shape(format!(
            "{} assignment columns for {} bank rows",
            probs.ncols(),
            bank.nrows()
        )));
    }
    Ok(probs.dot(&bank))
}

fn unit(v: ArrayView1<f64>) -> Option<Array1<f64>> {
    let n = v.dot(&v).sqrt();
    (n > crate::tape::NORM_FLOOR).then(|| &v / n)
}

/// Draws the cosine `t = μ̂·x` of a vMF sample (Wood's rejection scheme).
fn vmf_cosine(kappa: f64, d: usize, beta: &Beta<f64>, rng: &mut Rng) -> f64 {
    let dm1 = (d - 1) as f64;
    // b = (-2κ + sqrt(4κ² + (d-1)²)) / (d-1), rearranged to avoid cancellation.
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    loop {
        let z = beta.sample(rng);
        let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
        let u: f64 = rng.random();
        if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
            return w.clamp(-1.0, 1.0);
        }
    }
}

/// One von Mises-Fisher draw per row, concentrated around the row's direction.
///
/// Uses the tangent-normal decomposition `t·μ̂ + sqrt(1-t²)·ξ` with `ξ` a
/// uniform unit vector orthogonal to `μ̂`. `kappa = 0` is uniform on the
/// sphere, in which case a zero mean row is acceptable.
pub fn vmf_sample(mu_dir: ArrayView2<f64>, kappa: f64, rng: &mut Rng) -> Result<Array2<f64>> {
    let d = mu_dir.ncols();
    if d < 2 {
        return Err(Error::Shape("vMF sampling needs at least 2 dimensions".into()));
    }
    if kappa.is_nan() || kappa < 0.0 {
        return Err(Error::Config(format!("kappa must be >= 0, got {kappa}")));
    }
    let half = (d - 1) as f64 / 2.0;
    let beta = Beta::new(half, half).expect("positive shape");
    let mut out = Array2::zeros(mu_dir.dim());
    for (i, (mut row, mu)) in out.rows_mut().into_iter().zip(mu_dir.rows()).enumerate() {
        let mean = match unit(mu) {
            Some(m) => m,
            None if kappa == 0.0 => {
                let mut e = Array1::zeros(d);
                e[0] = 1.0;
                e
            }
            None => {
                return Err(Error::Degenerate(format!(
                    "row {i} has zero norm, vMF mean direction undefined"
                )))
            }
        };
        let t = vmf_cosine(kappa, d, &beta, rng);
        let tangent = loop {
            let g: Array1<f64> = Array1::from_shape_simple_fn(d, || rng.sample(StandardNormal));
            let g = &g - &(&mean * g.dot(&mean));
            if let Some(tv) = unit(g.view()) {
                break tv;
            }
        };
        let s = (1.0 - t * t).max(0.0).sqrt();
        row.assign(&(&mean * t + &tangent * s));
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    Ok(out)
}

/// How the intent term of a reconstruction is modulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpsilonMode {
    /// Fresh standard normal noise per element.
    TrainGaussian,
    /// Intents contribute deterministically.
    EvalOnes,
    /// Intents are dropped.
    Zero,
}

impl FromStr for EpsilonMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train_gaussian" => Ok(EpsilonMode::TrainGaussian),
            "eval_ones" => Ok(EpsilonMode::EvalOnes),
            "zero" => Ok(EpsilonMode::Zero),
            other => Err(Error::Config(format!("unknown epsilon mode {other:?}"))),
        }
    }
}

pub fn sample_epsilon(mode: EpsilonMode, rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    match mode {
        EpsilonMode::TrainGaussian => Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal)),
        EpsilonMode::EvalOnes => Array2::ones((rows, cols)),
        EpsilonMode::Zero => Array2::zeros((rows, cols)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// Layer mean plus modulated intents, before normalization.
    pub raw: Array2<f64>,
    /// Row-normalized `raw`; what the hypersphere losses consume.
    pub unit: Array2<f64>,
}

/// Layer mean of propagated embeddings plus `(c_pro + c_dis) ⊙ ε`.
pub fn reconstruct(
    layers: &[Array2<f64>],
    c_pro: ArrayView2<f64>,
    c_dis: ArrayView2<f64>,
    mode: EpsilonMode,
    rng: &mut Rng,
) -> Result<Reconstruction> {
    let first = layers
        .first()
        .ok_or_else(|| Error::Shape("no layers to reconstruct from".into()))?;
    let dim = first.dim();
    if layers.iter().any(|l| l.dim() != dim) || c_pro.dim() != dim || c_dis.dim() != dim {
        return Err(Error::Shape("layer and intent shapes differ".into()));
    }
    let mut mean = Array2::zeros(dim);
    for l in layers {
        mean += l;
    }
    mean /= layers.len() as f64;
    let eps = sample_epsilon(mode, dim.0, dim.1, rng);
    let raw = mean + &((&c_pro + &c_dis) * &eps);
    let unit = crate::semantic::normalize_rows(raw.clone());
    Ok(Reconstruction { raw, unit })
}

pub fn score(z_u: ArrayView1<f64>, z_v: ArrayView1<f64>) -> f64 {
    z_u.dot(&z_v)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bernoulli view of the interaction score.
pub fn score_prob(z_u: ArrayView1<f64>, z_v: ArrayView1<f64>) -> f64 {
    sigmoid(score(z_u, z_v))
}

/// Intent-marginal interaction probability, for diagnostics only.
///
/// Each intent perturbs both sides by `c_k = (c^Pro_k + c^Dis_k) / 2`.
pub fn intent_marginal_prob(
    z_u: ArrayView1<f64>,
    z_v: ArrayView1<f64>,
    probs_pro: ArrayView1<f64>,
    probs_dis: ArrayView1<f64>,
    bank: &IntentBank,
) -> f64 {
    let c = (&bank.proto_bank + &bank.dist_bank) * 0.5;
    c.axis_iter(Axis(0))
        .zip(probs_pro.iter().zip(probs_dis))
        .map(|(ck, (&pp, &pd))| sigmoid((&z_u + &ck).dot(&(&z_v + &ck))) * pp * pd)
        .sum()
}
