//! Mini-batch training loop with Adam and validation-based early stopping.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{build_graph, DatasetSplit, EdgeList, InteractionGraph};
use crate::error::{Error, Result};
use crate::eval::evaluate_embeddings;
use crate::intent::{ModelState, PARAM_NAMES};
use crate::losses::{LossBreakdown, Objective};
use crate::model::{eval_embeddings, forward_batch, Batch, Noise, NoiseRngs};
use crate::rng::{self, Rng, Stream};
use crate::semantic::SemanticStore;

pub const NEGATIVE_RETRIES: usize = 100;

/// Uniform with-replacement draw of training edges.
///
/// `train_items` must hold each user's train items sorted ascending; it is
/// only consulted for negatives. Returns the batch and the number of
/// negatives that fell back to an unconstrained draw.
pub fn sample_batch(
    train: &EdgeList,
    train_items: &[Vec<u32>],
    batch: usize,
    with_negatives: bool,
    rng: &mut Rng,
) -> (Batch, usize) {
    assert!(!train.is_empty(), "cannot sample from an empty edge list");
    let mut users = Vec::with_capacity(batch);
    let mut items = Vec::with_capacity(batch);
    for _ in 0..batch {
        let (u, v) = train.pairs[rng.random_range(0..train.len())];
        users.push(u as usize);
        items.push(v as usize);
    }
    let mut fallbacks = 0;
    let negatives = with_negatives.then(|| {
        users
            .iter()
            .map(|&u| {
                for _ in 0..NEGATIVE_RETRIES {
                    let v = rng.random_range(0..train.item_count);
                    if train_items[u].binary_search(&(v as u32)).is_err() {
                        return v;
                    }
                }
                fallbacks += 1;
                rng.random_range(0..train.item_count)
            })
            .collect()
    });
    if fallbacks > 0 {
        log::warn!("{fallbacks} negatives accepted without the train-set check");
    }
    (Batch { users, items, negatives }, fallbacks)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a Array2<f64>>) -> Self {
        let zeros: Vec<Array2<f64>> = shapes.into_iter().map(|p| Array2::zeros(p.dim())).collect();
        AdamState { v: zeros.clone(), m: zeros, step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update. All gradients are checked before any
/// parameter changes.
pub fn adam_step(
    params: &mut [&mut Array2<f64>],
    grads: &[Array2<f64>],
    names: &[&str],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || grads.len() != state.m.len() {
        return Err(Error::Shape("parameter, gradient and moment counts differ".into()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let name = names.get(i).copied().unwrap_or("?");
        if p.dim() != g.dim() || state.m[i].dim() != g.dim() {
            return Err(Error::Shape(format!("gradient shape mismatch for {name}")));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in {name}")));
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        ndarray::Zip::from(&mut **p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + state.eps);
        });
    }
    Ok(())
}

/// Everything training reads but never writes.
pub struct TrainData {
    pub split: DatasetSplit,
    pub graph: Arc<InteractionGraph>,
    pub semantic: SemanticStore,
    train_items: Vec<Vec<u32>>,
}

impl TrainData {
    pub fn new(split: DatasetSplit, semantic: SemanticStore, degree_prefactor: bool) -> Result<Self> {
        let mut graph = build_graph(&split.train)?;
        if degree_prefactor {
            graph = graph.with_degree_prefactor();
        }
        crate::semantic::row_count_check(&semantic, graph.user_count, graph.item_count)?;
        let mut train_items = split.train.items_by_user();
        for items in &mut train_items {
            items.sort_unstable();
        }
        Ok(TrainData { split, graph: Arc::new(graph), semantic, train_items })
    }

    pub fn users(&self) -> usize {
        self.graph.user_count
    }

    pub fn items(&self) -> usize {
        self.graph.item_count
    }
}

/// Independent random streams of one run.
pub struct RunRngs {
    pub batch: Rng,
    pub noise: NoiseRngs,
}

impl RunRngs {
    pub fn new(seed: u64) -> Self {
        RunRngs {
            batch: rng::stream(seed, Stream::Batch),
            noise: NoiseRngs { vmf: rng::stream(seed, Stream::Vmf), epsilon: rng::stream(seed, Stream::Epsilon) },
        }
    }
}

pub fn init_state(data: &TrainData, cfg: &TrainConfig) -> Result<ModelState> {
    cfg.validate()?;
    let shape = cfg.shape(data.users(), data.items(), data.semantic.dim());
    ModelState::init(shape, &mut rng::stream(cfg.seed, Stream::Init))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutcome {
    pub mean: LossBreakdown,
    pub steps: Vec<LossBreakdown>,
    pub rows_checked: usize,
}

pub fn steps_per_epoch(train_len: usize, batch: usize) -> usize {
    train_len.div_ceil(batch)
}

pub fn train_epoch(
    state: &mut ModelState,
    adam: &mut AdamState,
    data: &TrainData,
    cfg: &TrainConfig,
    rngs: &mut RunRngs,
) -> Result<EpochOutcome> {
    let fwd = cfg.forward();
    let bpr = cfg.toggles.objective == Objective::Bpr;
    let steps = steps_per_epoch(data.split.train.len(), cfg.batch);
    let mut records = Vec::with_capacity(steps);
    let mut checked = 0;
    for _ in 0..steps {
        let (batch, _) = sample_batch(&data.split.train, &data.train_items, cfg.batch, bpr, &mut rngs.batch);
        let out = forward_batch(state, &data.graph, &data.semantic, &fwd, &batch, Noise::Sample(&mut rngs.noise))?;
        if !out.breakdown.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {:?}", out.breakdown)));
        }
        adam_step(&mut state.params_mut(), &out.grads, &PARAM_NAMES, adam, cfg.lr)?;
        state.round_to_storage();
        if let Some(name) = state.first_non_finite() {
            return Err(Error::Numeric(format!("{name} became non-finite")));
        }
        checked += out.rows_checked;
        records.push(out.breakdown);
    }
    Ok(EpochOutcome { mean: LossBreakdown::mean(&records), steps: records, rows_checked: checked })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience: patience.max(1), best: None, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        match self.best {
            Some((_, b)) if metric <= b => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, metric));
                self.stale = 0;
                StopDecision::Improved
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_recall20: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_recall20: f64,
    pub termination: Termination,
    pub rows_checked: usize,
}

pub const VALIDATION_CUTOFF: usize = 20;

/// Validation Recall@20 with deterministic intents.
pub fn validation_recall(state: &ModelState, data: &TrainData, cfg: &TrainConfig) -> Result<f64> {
    let (zu, zv) = eval_embeddings(state, &data.graph, &data.semantic, &cfg.forward())?;
    let m = evaluate_embeddings(
        zu.view(),
        zv.view(),
        &data.split.train,
        &data.split.validation,
        &[VALIDATION_CUTOFF],
        None,
    )?;
    Ok(m.cutoffs[0].recall)
}

/// Runs epochs until patience or `epochs_max`, then restores the best state.
/// Per-step loss records go to `step_log` as JSON lines.
pub fn fit(
    data: &TrainData,
    cfg: &TrainConfig,
    mut step_log: Option<&mut dyn Write>,
) -> Result<(ModelState, TrainReport)> {
    let mut state = init_state(data, cfg)?;
    let mut adam = AdamState::new(state.params());
    let mut rngs = RunRngs::new(cfg.seed);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_state = state.clone();
    let mut epochs = Vec::new();
    let mut termination = Termination::MaxEpochs;
    let mut rows_checked = 0;
    for epoch in 1..=cfg.epochs_max {
        let start = Instant::now();
        let outcome = train_epoch(&mut state, &mut adam, data, cfg, &mut rngs)?;
        rows_checked += outcome.rows_checked;
        if let Some(w) = step_log.as_deref_mut() {
            for (step, loss) in outcome.steps.iter().enumerate() {
                let rec = StepRecord { epoch, step, loss: *loss };
                let line = serde_json::to_string(&rec).expect("plain struct serializes");
                writeln!(w, "{line}").map_err(|e| Error::io("train_log.jsonl", e))?;
            }
        }
        let val = validation_recall(&state, data, cfg)?;
        log::info!("epoch {epoch}: loss {:.6} val R@20 {val:.4}", outcome.mean.total);
        epochs.push(EpochRecord { epoch, loss: outcome.mean, val_recall20: val, seconds: start.elapsed().as_secs_f64() });
        match stopper.observe(epoch, val) {
            StopDecision::Improved => best_state = state.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                termination = Termination::Patience;
                break;
            }
        }
    }
    let (best_epoch, best_val) = stopper.best.expect("at least one epoch ran");
    let report = TrainReport { epochs, best_epoch, best_val_recall20: best_val, termination, rows_checked };
    Ok((best_state, report))
}
