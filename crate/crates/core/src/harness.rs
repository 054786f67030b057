//! End-to-end runs that read and write experiment artifacts.
//!
//! A prepared dataset directory holds `train.tsv`, `validation.tsv`,
//! `test.tsv`, `edges.tsv`, `user_map.tsv`, `item_map.tsv`, `meta.json`,
//! `dataset_stats.json` and, when available, `user_semantic.bin` and
//! `item_semantic.bin`.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_model, save_model};
use crate::config::TrainConfig;
use crate::data::synthetic::SyntheticInteractions;
use crate::data::{
    build_graph, k_core_filter, largest_connected_component, load_interactions, split_dataset, DatasetSplit,
    DatasetStats, EdgeList,
};
use crate::diagnostics::{check_instances, measure_geometry, random_instances, GeometryReport, GradientCheckReport};
use crate::error::{Error, Result};
use crate::eval::{evaluate_embeddings, paired_t_test, MetricsReport, RunMetrics, CUTOFFS, GROUPS};
use crate::intent::ModelState;
use crate::model::eval_embeddings;
use crate::rng::{self, Stream};
use crate::semantic::{normalize_rows, read_vectors, synth_semantic_vectors, write_vectors, SemanticStore};
use crate::trainer::{fit, TrainData, TrainReport};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub users: usize,
    pub items: usize,
    pub k: usize,
    pub seed: u64,
}

/// Where the raw interactions come from.
#[derive(Debug, Clone)]
pub enum Source {
    /// Raw tab-separated `user, item[, rating]` records, plus optional semantic vectors whose
    /// rows follow first-appearance order in that file.
    File {
        interactions: PathBuf,
        min_rating: Option<f64>,
        semantic: Option<(PathBuf, PathBuf)>,
    },
    /// Clustered generator with cluster-derived semantic vectors.
    Synthetic {
        generator: SyntheticInteractions,
        semantic_dim: usize,
        noise_scale: f64,
    },
}

fn write_map(path: &Path, labels: &[String], count: usize) -> Result<()> {
    let mut text = String::new();
    for i in 0..count {
        let label = labels.get(i).cloned().unwrap_or_else(|| i.to_string());
        text.push_str(&format!("{i}\t{label}\n"));
    }
    write_text(path, &text)
}

/// Filter, split and persist a dataset; returns its statistics.
pub fn run_prepare(source: &Source, k: usize, seed: u64, out_dir: &Path) -> Result<DatasetStats> {
    create_dir(out_dir)?;
    let (raw, semantic_raw) = match source {
        Source::File { interactions, min_rating, semantic } => {
            let raw = load_interactions(interactions, *min_rating)?;
            let sem = match semantic {
                Some((u, i)) => Some((read_vectors(u)?, read_vectors(i)?)),
                None => None,
            };
            (raw, sem)
        }
        Source::Synthetic { generator, .. } => (generator.generate(seed).0, None),
    };
    let filtered = largest_connected_component(&k_core_filter(&raw, k)?)?;
    let split = split_dataset(&filtered, seed);
    filtered.write_tsv(&out_dir.join("edges.tsv"))?;
    split.train.write_tsv(&out_dir.join("train.tsv"))?;
    split.validation.write_tsv(&out_dir.join("validation.tsv"))?;
    split.test.write_tsv(&out_dir.join("test.tsv"))?;
    write_map(&out_dir.join("user_map.tsv"), &filtered.user_labels, filtered.user_count)?;
    write_map(&out_dir.join("item_map.tsv"), &filtered.item_labels, filtered.item_count)?;

    let store = match (source, semantic_raw) {
        (Source::Synthetic { generator, semantic_dim, noise_scale }, _) => {
            let graph = build_graph(&split.train)?;
            Some(synth_semantic_vectors(&graph, *semantic_dim, generator.clusters, *noise_scale, seed))
        }
        (_, Some((u, i))) => Some(SemanticStore {
            raw_user: reindex(&u, &raw.user_labels, &filtered.user_labels, "user")?,
            raw_item: reindex(&i, &raw.item_labels, &filtered.item_labels, "item")?,
        }),
        _ => None,
    };
    if let Some(store) = store {
        write_vectors(&out_dir.join("user_semantic.bin"), store.raw_user.view())?;
        write_vectors(&out_dir.join("item_semantic.bin"), store.raw_item.view())?;
    }
    let stats = filtered.stats();
    let meta = DatasetMeta { users: filtered.user_count, items: filtered.item_count, k, seed };
    write_json(&out_dir.join("meta.json"), &meta)?;
    write_json(&out_dir.join("dataset_stats.json"), &stats)?;
    Ok(stats)
}

/// Selects the semantic rows of surviving nodes by label.
fn reindex(raw: &Array2<f64>, raw_labels: &[String], kept: &[String], what: &str) -> Result<Array2<f64>> {
    if raw.nrows() != raw_labels.len() {
        return Err(Error::Alignment(format!(
            "{} {what} semantic rows for {} {what}s in the interaction file",
            raw.nrows(),
            raw_labels.len()
        )));
    }
    let position: HashMap<&str, usize> = raw_labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let rows: Vec<usize> = kept.iter().map(|l| position[l.as_str()]).collect();
    Ok(raw.select(Axis(0), &rows))
}

pub struct Dataset {
    pub meta: DatasetMeta,
    pub split: DatasetSplit,
    pub semantic: SemanticStore,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = read_json(&dir.join("meta.json"))?;
    let read = |name: &str| EdgeList::read_indexed_tsv(&dir.join(name), meta.users, meta.items);
    let split = DatasetSplit { train: read("train.tsv")?, validation: read("validation.tsv")?, test: read("test.tsv")? };
    let semantic = crate::semantic::load_semantic_vectors(
        &dir.join("user_semantic.bin"),
        &dir.join("item_semantic.bin"),
        meta.users,
        meta.items,
    )?;
    Ok(Dataset { meta, split, semantic })
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub data_dir: PathBuf,
    pub config: TrainConfig,
    pub variant: String,
    /// Applied after the variant.
    pub overrides: Vec<(String, String)>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl ExperimentSpec {
    /// Config for one seed: base, then variant, then overrides.
    pub fn resolve(&self, seed: u64) -> Result<TrainConfig> {
        let mut cfg = self.config.clone();
        cfg.apply_variant(&self.variant)?;
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.diau";
pub const CONFIG_FILE: &str = "config.txt";

pub struct TrainOutcome {
    pub metrics: MetricsReport,
    pub reports: Vec<TrainReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: usize,
    pub users: Vec<usize>,
    pub recall20: Vec<f64>,
    pub ndcg20: Vec<f64>,
    pub recall20_mean: f64,
    pub ndcg20_mean: f64,
}

fn group_summary(runs: &[RunMetrics]) -> Vec<GroupSummary> {
    let groups = runs.first().map(|r| r.groups.len()).unwrap_or(0);
    (0..groups)
        .map(|g| {
            let at20 = |r: &RunMetrics| {
                r.groups[g].cutoffs.iter().find(|c| c.n == 20).copied().unwrap_or_default()
            };
            let recall20: Vec<f64> = runs.iter().map(|r| at20(r).recall).collect();
            let ndcg20: Vec<f64> = runs.iter().map(|r| at20(r).ndcg).collect();
            GroupSummary {
                group: g,
                users: runs.iter().map(|r| r.groups[g].users).collect(),
                recall20_mean: mean(&recall20),
                ndcg20_mean: mean(&ndcg20),
                recall20,
                ndcg20,
            }
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn seed_dir(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("seed_{seed}"))
}

/// Trains every seed, evaluates on test, and writes all artifacts.
pub fn run_train(spec: &ExperimentSpec) -> Result<TrainOutcome> {
    if spec.seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let data = load_dataset(&spec.data_dir)?;
    create_dir(&spec.out_dir)?;
    let mut runs = Vec::new();
    let mut reports = Vec::new();
    for &seed in &spec.seeds {
        let cfg = spec.resolve(seed)?;
        let dir = seed_dir(&spec.out_dir, seed);
        create_dir(&dir)?;
        let td = TrainData::new(data.split.clone(), data.semantic.clone(), cfg.degree_prefactor)?;
        let log_path = dir.join("train_log.jsonl");
        let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let mut log = BufWriter::new(file);
        let (state, report) = fit(&td, &cfg, Some(&mut log))?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        save_model(&dir.join(CHECKPOINT_FILE), &state)?;
        write_text(&dir.join(CONFIG_FILE), &cfg.to_text())?;
        write_json(&dir.join("train_report.json"), &report)?;
        let metrics = evaluate_state(&state, &td, &cfg)?;
        write_json(&dir.join("metrics.json"), &metrics)?;
        log::info!("seed {seed}: test R@20 {:.4}", metrics.table_row().r20);
        runs.push(metrics);
        reports.push(report);
    }
    let metrics = MetricsReport::new(spec.seeds.clone(), runs);
    write_json(&spec.out_dir.join("metrics.json"), &metrics)?;
    write_json(&spec.out_dir.join("sparsity_groups.json"), &group_summary(&metrics.runs))?;
    Ok(TrainOutcome { metrics, reports })
}

pub fn evaluate_state(state: &ModelState, data: &TrainData, cfg: &TrainConfig) -> Result<RunMetrics> {
    let (zu, zv) = eval_embeddings(state, &data.graph, &data.semantic, &cfg.forward())?;
    evaluate_embeddings(zu.view(), zv.view(), &data.split.train, &data.split.test, &CUTOFFS, Some(GROUPS))
}

/// Config stored beside a checkpoint, or the defaults.
pub fn config_for_checkpoint(checkpoint: &Path) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = checkpoint.parent().map(|p| p.join(CONFIG_FILE)).filter(|p| p.exists()) {
        cfg.apply_file(&path)?;
    }
    Ok(cfg)
}

/// Test-set metrics of a saved model.
pub fn run_evaluate(data_dir: &Path, checkpoint: &Path, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<RunMetrics> {
    let data = load_dataset(data_dir)?;
    let state = load_model(checkpoint)?;
    let td = TrainData::new(data.split, data.semantic, cfg.degree_prefactor)?;
    if state.user_mu.nrows() != td.users() || state.item_mu.nrows() != td.items() {
        return Err(Error::Alignment("checkpoint does not match the dataset".into()));
    }
    let metrics = evaluate_state(&state, &td, cfg)?;
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        let report = MetricsReport::new(vec![cfg.seed], vec![metrics.clone()]);
        write_json(&dir.join("metrics.json"), &report)?;
    }
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub status: String,
    pub message: Option<String>,
    pub r20_mean: f64,
    pub r20_std: f64,
    pub n20_mean: f64,
    pub n20_std: f64,
    pub r20_per_seed: Vec<f64>,
    pub n20_per_seed: Vec<f64>,
}

impl AblationRow {
    fn failed(variant: &str, err: &Error) -> Self {
        AblationRow {
            variant: variant.to_string(),
            status: "error".into(),
            message: Some(err.to_string()),
            r20_mean: f64::NAN,
            r20_std: f64::NAN,
            n20_mean: f64::NAN,
            n20_std: f64::NAN,
            r20_per_seed: vec![],
            n20_per_seed: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub variant: String,
    pub baseline: String,
    pub metric: String,
    pub p_value: Option<f64>,
    pub note: Option<String>,
}

const TSV_HEADER: &str = "variant\tstatus\tR@20_mean\tR@20_std\tN@20_mean\tN@20_std\tR@20_per_seed\tN@20_per_seed\tmessage";

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut out = format!("{TSV_HEADER}\n");
    for r in rows {
        let msg = r.message.as_deref().unwrap_or("").replace(['\t', '\n'], " ");
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.variant,
            r.status,
            r.r20_mean,
            r.r20_std,
            r.n20_mean,
            r.n20_std,
            join(&r.r20_per_seed),
            join(&r.n20_per_seed),
            msg
        ));
    }
    out
}

pub fn read_ablation_tsv(path: &Path) -> Result<Vec<AblationRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Parse { line: n + 1, message: "malformed ablation row".into() };
        if cols.len() != 9 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let list = |s: &str| -> Result<Vec<f64>> {
            if s.is_empty() {
                Ok(vec![])
            } else {
                s.split(',').map(num).collect()
            }
        };
        rows.push(AblationRow {
            variant: cols[0].to_string(),
            status: cols[1].to_string(),
            r20_mean: num(cols[2])?,
            r20_std: num(cols[3])?,
            n20_mean: num(cols[4])?,
            n20_std: num(cols[5])?,
            r20_per_seed: list(cols[6])?,
            n20_per_seed: list(cols[7])?,
            message: (!cols[8].is_empty()).then(|| cols[8].to_string()),
        });
    }
    Ok(rows)
}

/// Paired tests of every variant against `full` when both succeeded.
pub fn significance(rows: &[AblationRow]) -> Vec<Significance> {
    let Some(base) = rows.iter().find(|r| r.variant == "full" && r.status == "ok") else {
        return vec![];
    };
    let mut out = Vec::new();
    for r in rows.iter().filter(|r| r.variant != "full" && r.status == "ok") {
        for (metric, a, b) in [
            ("R@20", &r.r20_per_seed, &base.r20_per_seed),
            ("N@20", &r.n20_per_seed, &base.n20_per_seed),
        ] {
            let (p_value, note) = match paired_t_test(a, b) {
                Ok(p) => (Some(p), None),
                Err(e) => (None, Some(e.to_string())),
            };
            out.push(Significance {
                variant: r.variant.clone(),
                baseline: "full".into(),
                metric: metric.into(),
                p_value,
                note,
            });
        }
    }
    out
}

/// One row per variant; a failing variant is recorded and the rest continue.
pub fn run_ablation_matrix(base: &ExperimentSpec, variants: &[String]) -> Result<Vec<AblationRow>> {
    create_dir(&base.out_dir)?;
    let mut rows = Vec::new();
    for v in variants {
        let spec = ExperimentSpec { variant: v.clone(), out_dir: base.out_dir.join(v), ..base.clone() };
        match run_train(&spec) {
            Ok(outcome) => {
                let r20: Vec<f64> = outcome.metrics.per_seed.iter().map(|r| r.r20).collect();
                let n20: Vec<f64> = outcome.metrics.per_seed.iter().map(|r| r.n20).collect();
                rows.push(AblationRow {
                    variant: v.clone(),
                    status: "ok".into(),
                    message: None,
                    r20_mean: mean(&r20),
                    r20_std: sample_std(&r20),
                    n20_mean: mean(&n20),
                    n20_std: sample_std(&n20),
                    r20_per_seed: r20,
                    n20_per_seed: n20,
                });
            }
            Err(e) => {
                log::error!("variant {v} failed: {e}");
                rows.push(AblationRow::failed(v, &e));
            }
        }
    }
    write_text(&base.out_dir.join("ablation.tsv"), &ablation_tsv(&rows))?;
    write_json(&base.out_dir.join("ablation.json"), &rows)?;
    write_json(&base.out_dir.join("significance.json"), &significance(&rows))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub checkpoint: String,
    pub convention: String,
    pub gradient_check: GradientCheckReport,
    pub geometry: GeometryReport,
    pub passed: bool,
}

pub const RANDOM_INSTANCES: usize = 20;
pub const MODEL_INSTANCES: usize = 20;

/// Geometry of a saved model plus the uniformity-gradient agreement suite.
///
/// With a dataset the geometry uses reconstructed representations and the
/// training interactions; without one it uses the normalized base embeddings.
pub fn run_diagnostics(
    checkpoint: &Path,
    data_dir: Option<&Path>,
    cfg: &TrainConfig,
    sample_size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DiagnosticsReport> {
    let state = load_model(checkpoint)?;
    let (zu, zv, positives) = match data_dir {
        Some(dir) => {
            let data = load_dataset(dir)?;
            let td = TrainData::new(data.split, data.semantic, cfg.degree_prefactor)?;
            let (zu, zv) = eval_embeddings(&state, &td.graph, &td.semantic, &cfg.forward())?;
            (zu, zv, td.split.train.pairs.clone())
        }
        None => (normalize_rows(state.user_mu.clone()), normalize_rows(state.item_mu.clone()), vec![]),
    };
    let mut rng = rng::stream(seed, Stream::Geometry);
    let mut instances = random_instances(RANDOM_INSTANCES, &mut rng);
    for _ in 0..MODEL_INSTANCES {
        use rand::Rng as _;
        let b = rng.random_range(2..=8.min(zv.nrows()).max(2));
        let rows = rand::seq::index::sample(&mut rng, zv.nrows(), b.min(zv.nrows())).into_vec();
        instances.push(zv.select(Axis(0), &rows));
    }
    let gradient_check = check_instances(&instances)?;
    let geometry = measure_geometry(zu.view(), zv.view(), &positives, sample_size, seed)?;
    let report = DiagnosticsReport {
        checkpoint: checkpoint.display().to_string(),
        convention: gradient_check.convention.clone(),
        passed: gradient_check.passed,
        gradient_check,
        geometry,
    };
    create_dir(out_dir)?;
    write_json(&out_dir.join("geometry.json"), &report)?;
    let mut tsv = String::from("point\tambient\ttangent\n");
    for (i, (a, t)) in report.geometry.grad_norms_ambient.iter().zip(&report.geometry.grad_norms_tangent).enumerate() {
        tsv.push_str(&format!("{i}\t{a}\t{t}\n"));
    }
    write_text(&out_dir.join("grad_norms.tsv"), &tsv)?;
    Ok(report)
}
