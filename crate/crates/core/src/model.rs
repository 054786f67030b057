//! Per-batch forward pass on the tape, and full-population embeddings for
//! evaluation.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{propagate, InteractionGraph};
use crate::error::{Error, Result};
use crate::intent::{
    distribution_assign, mix_intents, prototype_assign, sample_epsilon, vmf_sample, EpsilonMode, ModelState,
};
use crate::losses::{
    align_grad, bpr_grad, coarse_grad, fine_grad, infonce_grad, mine_neighbors, uniform_grad, Component,
    LossBreakdown, LossToggles, LossWeights, Objective, ALL_COMPONENTS,
};
use crate::rng::Rng;
use crate::semantic::{normalize_rows, project_semantic, row_count_check, ProjectorVars, SemanticStore};
use crate::tape::{Tape, Var};

/// Where the coarse-matching anchor comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoarseAnchor {
    Semantic,
    Prototype,
}

impl std::str::FromStr for CoarseAnchor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic" => Ok(CoarseAnchor::Semantic),
            "prototype" => Ok(CoarseAnchor::Prototype),
            _ => Err(Error::Config(format!("unknown coarse anchor {s:?}"))),
        }
    }
}

/// The slice of the training configuration a forward pass needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardConfig {
    pub layers: usize,
    pub tau: f64,
    pub toggles: LossToggles,
    pub weights: LossWeights,
    pub anchor: CoarseAnchor,
    pub check_invariants: bool,
}

/// Row indices of one mini-batch. `negatives` is present for the BPR objective.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub users: Vec<usize>,
    pub items: Vec<usize>,
    pub negatives: Option<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Everything random about a forward pass, so it can be replayed exactly.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchNoise {
    pub h_user: Option<Array2<f64>>,
    pub h_item: Option<Array2<f64>>,
    pub eps_user: Option<Array2<f64>>,
    pub eps_item: Option<Array2<f64>>,
    pub neighbors: Option<Vec<usize>>,
}

pub struct NoiseRngs {
    pub vmf: Rng,
    pub epsilon: Rng,
}

pub enum Noise<'a> {
    Sample(&'a mut NoiseRngs),
    Replay(&'a BatchNoise),
}

pub struct BatchOutput {
    pub breakdown: LossBreakdown,
    /// Gradients in [`crate::intent::PARAM_NAMES`] order.
    pub grads: Vec<Array2<f64>>,
    pub noise: BatchNoise,
    /// Rows checked against the unit-norm and softmax invariants.
    pub rows_checked: usize,
}

struct ParamVars {
    user_mu: Var,
    item_mu: Var,
    proto: Var,
    dist_bank: Var,
    dist_proj: Var,
    projector: ProjectorVars,
    coarse_map: Var,
}

impl ParamVars {
    fn record(t: &mut Tape, s: &ModelState) -> Self {
        ParamVars {
            user_mu: t.param(s.user_mu.clone()),
            item_mu: t.param(s.item_mu.clone()),
            proto: t.param(s.bank.proto_bank.clone()),
            dist_bank: t.param(s.bank.dist_bank.clone()),
            dist_proj: t.param(s.bank.dist_proj.clone()),
            projector: ProjectorVars {
                w1: t.param(s.projector.w1.clone()),
                b1: t.param(s.projector.b1.clone()),
                w2: t.param(s.projector.w2.clone()),
                b2: t.param(s.projector.b2.clone()),
            },
            coarse_map: t.param(s.coarse_map.clone()),
        }
    }

    fn all(&self) -> [Var; 10] {
        [
            self.user_mu,
            self.item_mu,
            self.proto,
            self.dist_bank,
            self.dist_proj,
            self.projector.w1,
            self.projector.b1,
            self.projector.w2,
            self.projector.b2,
            self.coarse_map,
        ]
    }
}

pub const UNIT_TOLERANCE: f64 = 1e-6;

fn check_unit_rows(m: &Array2<f64>, what: &str) -> Result<usize> {
    for (i, r) in m.rows().into_iter().enumerate() {
        let n = r.dot(&r).sqrt();
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Invariant(format!("{what} row {i} has norm {n}")));
        }
    }
    Ok(m.nrows())
}

fn check_softmax_rows(m: &Array2<f64>, what: &str) -> Result<usize> {
    for (i, r) in m.rows().into_iter().enumerate() {
        let s: f64 = r.sum();
        if (s - 1.0).abs() > UNIT_TOLERANCE || r.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Invariant(format!("{what} row {i} sums to {s}")));
        }
    }
    Ok(m.nrows())
}

fn layer_mean_var(t: &mut Tape, base: Var, graph: &Arc<InteractionGraph>, layers: usize) -> Var {
    let mut acc = base;
    let mut cur = base;
    for _ in 0..layers {
        cur = t.propagate(cur, graph);
        acc = t.add(acc, cur);
    }
    if layers == 0 {
        acc
    } else {
        t.scale(acc, 1.0 / (layers + 1) as f64)
    }
}

struct Side {
    mu: Var,
    s: Option<Var>,
    c_pro: Option<Var>,
    z: Var,
}

struct Recorder<'a> {
    t: Tape,
    p: ParamVars,
    state: &'a ModelState,
    cfg: &'a ForwardConfig,
    noise_out: BatchNoise,
    checked: usize,
}

impl Recorder<'_> {
    fn check_softmax(&mut self, v: Var, what: &str) -> Result<()> {
        if self.cfg.check_invariants {
            self.checked += check_softmax_rows(self.t.value(v), what)?;
        }
        Ok(())
    }

    fn side(
        &mut self,
        mean: Var,
        raw: Option<Array2<f64>>,
        is_user: bool,
        noise: &mut Noise<'_>,
    ) -> Result<Side> {
        let toggles = self.cfg.toggles;
        let eta = self.state.bank.eta;
        let mu = self.t.normalize_rows(mean);
        let s = raw.map(|raw| {
            let raw = self.t.constant(raw);
            let proj = self.state.projector.record(&mut self.t, &self.p.projector, raw);
            self.t.normalize_rows(proj)
        });
        let c_pro = match s {
            Some(s) => {
                let logits = self.t.matmul_t(s, self.p.proto);
                let probs = self.t.softmax_rows(logits, eta);
                self.check_softmax(probs, "prototype assignment")?;
                Some(self.t.matmul(probs, self.p.proto))
            }
            None => None,
        };
        let z = if toggles.use_dual_intent {
            let c_pro = c_pro.expect("semantic side is computed when intents are on");
            let rows = self.t.value(mean).nrows();
            let d = self.t.value(mean).ncols();
            let (h, eps) = match noise {
                Noise::Sample(r) => {
                    let h = vmf_sample(self.t.value(mu).view(), self.state.bank.kappa, &mut r.vmf)?;
                    let eps = sample_epsilon(EpsilonMode::TrainGaussian, rows, d, &mut r.epsilon);
                    (h, eps)
                }
                Noise::Replay(n) => {
                    let pick = |a: &Option<Array2<f64>>, b: &Option<Array2<f64>>| {
                        if is_user { a.clone() } else { b.clone() }
                    };
                    let h = pick(&n.h_user, &n.h_item).ok_or_else(|| Error::Shape("replay lacks h".into()))?;
                    let eps = pick(&n.eps_user, &n.eps_item).ok_or_else(|| Error::Shape("replay lacks ε".into()))?;
                    (h, eps)
                }
            };
            if is_user {
                self.noise_out.h_user = Some(h.clone());
                self.noise_out.eps_user = Some(eps.clone());
            } else {
                self.noise_out.h_item = Some(h.clone());
                self.noise_out.eps_item = Some(eps.clone());
            }
            let h = self.t.constant(h);
            let logits = self.t.matmul_t(h, self.p.dist_proj);
            let probs = self.t.softmax_rows(logits, eta);
            self.check_softmax(probs, "distribution assignment")?;
            let c_dis = self.t.matmul(probs, self.p.dist_bank);
            let c = self.t.add(c_pro, c_dis);
            let eps = self.t.constant(eps);
            let mod_c = self.t.mul(c, eps);
            let raw = self.t.add(mean, mod_c);
            self.t.normalize_rows(raw)
        } else {
            mu
        };
        Ok(Side { mu, s, c_pro, z })
    }

    fn loss(&mut self, value_grads: (f64, Vec<(Var, Array2<f64>)>)) -> Var {
        let (value, pairs) = value_grads;
        let (vars, grads): (Vec<Var>, Vec<Array2<f64>>) = pairs.into_iter().unzip();
        self.t.scalar(value, &vars, grads)
    }

    fn val(&self, v: Var) -> ArrayView2<'_, f64> {
        self.t.value(v).view()
    }
}

/// Records one training step's objective and returns its gradients.
pub fn forward_batch(
    state: &ModelState,
    graph: &Arc<InteractionGraph>,
    semantic: &SemanticStore,
    cfg: &ForwardConfig,
    batch: &Batch,
    mut noise: Noise<'_>,
) -> Result<BatchOutput> {
    let toggles = cfg.toggles;
    if batch.is_empty() || batch.items.len() != batch.len() {
        return Err(Error::Shape("batch users and items must be nonempty and aligned".into()));
    }
    let bpr = toggles.objective == Objective::Bpr;
    let negatives = match (&batch.negatives, bpr) {
        (Some(n), true) if n.len() == batch.len() => n.as_slice(),
        (_, true) => return Err(Error::Shape("BPR batch needs one negative per row".into())),
        _ => &[],
    };
    row_count_check(semantic, graph.user_count, graph.item_count)?;

    let mut t = Tape::new();
    let p = ParamVars::record(&mut t, state);
    let mut r = Recorder { t, p, state, cfg, noise_out: BatchNoise::default(), checked: 0 };

    let base = r.t.concat_rows(&[r.p.user_mu, r.p.item_mu]);
    let mean = layer_mean_var(&mut r.t, base, graph, cfg.layers);
    let m = graph.user_count;
    let item_idx: Vec<usize> = batch.items.iter().chain(negatives).copied().collect();
    let item_rows: Vec<usize> = item_idx.iter().map(|v| m + v).collect();
    let mean_u = r.t.gather_rows(mean, &batch.users);
    let mean_i = r.t.gather_rows(mean, &item_rows);

    let needs_semantic =
        toggles.use_dual_intent || toggles.enabled(Component::Fine) || toggles.enabled(Component::Coarse);
    let raw_u = needs_semantic.then(|| semantic.raw_user.select(Axis(0), &batch.users));
    let raw_i = needs_semantic.then(|| semantic.raw_item.select(Axis(0), &item_idx));
    let us = r.side(mean_u, raw_u, true, &mut noise)?;
    let is = r.side(mean_i, raw_i, false, &mut noise)?;

    let b = batch.len();
    let pos: Vec<usize> = (0..b).collect();
    let gather_pos = |r: &mut Recorder<'_>, v: Var| if bpr { r.t.gather_rows(v, &pos) } else { v };
    let z_u = us.z;
    let z_v = gather_pos(&mut r, is.z);
    let mu_u = us.mu;
    let mu_v = gather_pos(&mut r, is.mu);

    if cfg.check_invariants {
        r.checked += check_unit_rows(r.t.value(z_u), "user representation")?;
        r.checked += check_unit_rows(r.t.value(is.z), "item representation")?;
    }

    let mut parts = LossBreakdown::default();
    let mut terms: Vec<(Component, Var)> = Vec::new();

    if toggles.enabled(Component::Align) {
        let (v, gu, gv) = align_grad(r.val(z_u), r.val(z_v))?;
        terms.push((Component::Align, r.loss((v, vec![(z_u, gu), (z_v, gv)]))));
    }
    if toggles.enabled(Component::UniformUser) {
        let (v, g) = uniform_grad(r.val(z_u))?;
        terms.push((Component::UniformUser, r.loss((v, vec![(z_u, g)]))));
    }
    if toggles.enabled(Component::UniformItem) {
        let (v, g) = uniform_grad(r.val(z_v))?;
        terms.push((Component::UniformItem, r.loss((v, vec![(z_v, g)]))));
    }
    if toggles.enabled(Component::Bpr) {
        let neg: Vec<usize> = (b..2 * b).collect();
        let z_n = r.t.gather_rows(is.z, &neg);
        let (v, gu, gp, gn) = bpr_grad(r.val(z_u), r.val(z_v), r.val(z_n))?;
        terms.push((Component::Bpr, r.loss((v, vec![(z_u, gu), (z_v, gp), (z_n, gn)]))));
    }

    let matching = toggles.enabled(Component::Coarse) || toggles.enabled(Component::Fine);
    if matching {
        let z_cat = r.t.concat_rows(&[z_u, z_v]);
        let c_v = us.c_pro.map(|_| gather_pos(&mut r, is.c_pro.expect("both sides share toggles")));
        let c_cat = us.c_pro.zip(c_v).map(|(a, b)| r.t.concat_rows(&[a, b]));
        if toggles.enabled(Component::Coarse) {
            let anchor = match cfg.anchor {
                CoarseAnchor::Prototype => c_cat.expect("prototype anchors computed"),
                CoarseAnchor::Semantic => {
                    let s_v = gather_pos(&mut r, is.s.expect("semantic side computed"));
                    r.t.concat_rows(&[us.s.expect("semantic side computed"), s_v])
                }
            };
            let (v, gz, ga, gw) = coarse_grad(r.val(z_cat), r.val(anchor), r.val(r.p.coarse_map))?;
            let w = r.p.coarse_map;
            terms.push((Component::Coarse, r.loss((v, vec![(z_cat, gz), (anchor, ga), (w, gw)]))));
        }
        if toggles.enabled(Component::Fine) {
            let c_cat = c_cat.expect("prototype intents computed");
            let neighbors = match &noise {
                Noise::Replay(n) if n.neighbors.is_some() => n.neighbors.clone().unwrap(),
                _ => mine_neighbors(r.val(z_cat))?,
            };
            let (v, gz, gc) = fine_grad(r.val(z_cat), r.val(c_cat), &neighbors)?;
            r.noise_out.neighbors = Some(neighbors);
            terms.push((Component::Fine, r.loss((v, vec![(z_cat, gz), (c_cat, gc)]))));
        }
    }
    if toggles.enabled(Component::Intra) {
        let (v1, a1, b1) = infonce_grad(r.val(z_u), r.val(mu_u), cfg.tau)?;
        let (v2, a2, b2) = infonce_grad(r.val(z_v), r.val(mu_v), cfg.tau)?;
        terms.push((Component::Intra, r.loss((v1 + v2, vec![(z_u, a1), (mu_u, b1), (z_v, a2), (mu_v, b2)]))));
    }
    if toggles.enabled(Component::Inter) {
        let (v1, a1, b1) = infonce_grad(r.val(z_u), r.val(z_v), cfg.tau)?;
        let (v2, a2, b2) = infonce_grad(r.val(mu_u), r.val(mu_v), cfg.tau)?;
        terms.push((Component::Inter, r.loss((v1 + v2, vec![(z_u, a1), (z_v, b1), (mu_u, a2), (mu_v, b2)]))));
    }
    let squares: Vec<(Var, f64)> = r.p.all().iter().map(|&v| (r.t.sum_squares(v), 1.0)).collect();
    terms.push((Component::L2, r.t.weighted_sum(&squares)));

    let weighted: Vec<(Var, f64)> = terms
        .iter()
        .map(|&(c, v)| (v, cfg.weights.coefficient(c, &toggles)))
        .collect();
    for &(c, v) in &terms {
        parts.set(c, r.t.scalar_value(v));
    }
    let total = r.t.weighted_sum(&weighted);
    parts.total = r.t.scalar_value(total);
    debug_assert!(ALL_COMPONENTS.iter().all(|&c| toggles.enabled(c) || parts.get(c) == 0.0));

    let mut g = r.t.backward(total);
    let grads = r
        .p
        .all()
        .iter()
        .zip(state.params())
        .map(|(&v, p)| g.take(v).unwrap_or_else(|| Array2::zeros(p.dim())))
        .collect();
    Ok(BatchOutput { breakdown: parts, grads, noise: r.noise_out, rows_checked: r.checked })
}

/// Layer mean of propagated base embeddings as (users, items).
pub fn layer_mean(
    state: &ModelState,
    graph: &InteractionGraph,
    layers: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let seq = propagate(graph, state.user_mu.view(), state.item_mu.view(), layers)?;
    let mut u = Array2::zeros(state.user_mu.dim());
    let mut v = Array2::zeros(state.item_mu.dim());
    for (a, b) in &seq {
        u += a;
        v += b;
    }
    let n = seq.len() as f64;
    Ok((u / n, v / n))
}

/// Reconstructed, unit-norm representations of every user and item with
/// deterministic intents: `h` is the mean direction and `ε = 1`.
pub fn eval_embeddings(
    state: &ModelState,
    graph: &InteractionGraph,
    semantic: &SemanticStore,
    cfg: &ForwardConfig,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (mean_u, mean_v) = layer_mean(state, graph, cfg.layers)?;
    if !cfg.toggles.use_dual_intent {
        return Ok((normalize_rows(mean_u), normalize_rows(mean_v)));
    }
    row_count_check(semantic, graph.user_count, graph.item_count)?;
    let (s_u, s_v) = project_semantic(semantic, &state.projector)?;
    let bank = &state.bank;
    let side = |mean: Array2<f64>, s: Array2<f64>| -> Result<Array2<f64>> {
        let c_pro = mix_intents(prototype_assign(s.view(), bank.proto_bank.view(), bank.eta)?.view(), bank.proto_bank.view())?;
        let h = normalize_rows(mean.clone());
        let c_dis = mix_intents(distribution_assign(h.view(), bank.dist_proj.view(), bank.eta)?.view(), bank.dist_bank.view())?;
        Ok(normalize_rows(mean + c_pro + c_dis))
    };
    Ok((side(mean_u, s_u)?, side(mean_v, s_v)?))
}

/// Full score matrix `users × items` in row blocks.
pub fn score_matrix(z_u: ArrayView2<f64>, z_v: ArrayView2<f64>, users: &[usize]) -> Array2<f64> {
    let rows = z_u.select(Axis(0), users);
    rows.dot(&z_v.t())
}

pub fn slice_rows(m: &Array2<f64>, lo: usize, hi: usize) -> Array2<f64> {
    m.slice(s![lo..hi, ..]).to_owned()
}
