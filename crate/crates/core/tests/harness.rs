use std::fs;
use std::path::Path;

use diaurec::checkpoint::save_model;
use diaurec::config::TrainConfig;
use diaurec::data::synthetic::SyntheticInteractions;
use diaurec::harness::{
    read_ablation_tsv, run_ablation_matrix, run_diagnostics, run_evaluate, run_prepare, run_train, seed_dir,
    significance, ExperimentSpec, Source, CHECKPOINT_FILE,
};
use diaurec::intent::{ModelShape, ModelState};
use diaurec::rng::Rng;
use diaurec::Error;
use rand::SeedableRng;
use serde_json::Value;

fn small_synthetic(dir: &Path) {
    let source = Source::Synthetic {
        generator: SyntheticInteractions { users: 60, items: 40, clusters: 3, ..SyntheticInteractions::default() },
        semantic_dim: 12,
        noise_scale: 0.1,
    };
    run_prepare(&source, 3, 7, dir).unwrap();
}

fn small_config() -> TrainConfig {
    TrainConfig { dim: 8, batch: 128, lr: 5e-3, intents: 4, epochs_max: 2, check_invariants: true, ..TrainConfig::default() }
}

fn spec(data: &Path, out: &Path, variant: &str) -> ExperimentSpec {
    ExperimentSpec {
        data_dir: data.to_path_buf(),
        config: small_config(),
        variant: variant.into(),
        overrides: vec![],
        seeds: vec![1, 2],
        out_dir: out.to_path_buf(),
    }
}

fn step_records(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn tiny_fixture_prepares_to_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw.txt");
    fs::write(&raw, "a\tx\na\ty\nb\tx\nb\tz\nc\ty\nc\tz\nd\tx\nd\ty\ne\tz\ne\tx\n").unwrap();
    let src = Source::File { interactions: raw, min_rating: None, semantic: None };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let stats = run_prepare(&src, 1, 11, &a).unwrap();
    run_prepare(&src, 1, 11, &b).unwrap();
    assert_eq!(stats.interactions, 10);
    assert!((stats.sparsity - 100.0 * (1.0 - 10.0 / 15.0)).abs() < 1e-12);
    for f in ["edges.tsv", "train.tsv", "validation.tsv", "test.tsv", "user_map.tsv", "item_map.tsv", "meta.json", "dataset_stats.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn identical_specs_give_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_synthetic(&data);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_train(&spec(&data, &a, "full")).unwrap();
    run_train(&spec(&data, &b, "full")).unwrap();
    assert_eq!(fs::read(a.join("metrics.json")).unwrap(), fs::read(b.join("metrics.json")).unwrap());
    for s in [1, 2] {
        let ca = fs::read(seed_dir(&a, s).join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(ca, fs::read(seed_dir(&b, s).join(CHECKPOINT_FILE)).unwrap());
    }
    let metrics: Value = serde_json::from_slice(&fs::read(a.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["per_seed"].as_array().unwrap().len(), 2);
    assert!(a.join("sparsity_groups.json").exists());
}

#[test]
fn bpr_variant_logs_only_the_bpr_term() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_synthetic(&data);
    let out = tmp.path().join("bpr");
    run_train(&ExperimentSpec { seeds: vec![3], ..spec(&data, &out, "bpr") }).unwrap();
    let steps = step_records(&seed_dir(&out, 3).join("train_log.jsonl"));
    assert!(!steps.is_empty());
    for s in &steps {
        assert_eq!(s["align"], 0.0);
        assert_eq!(s["uniform_user"], 0.0);
        assert_eq!(s["uniform_item"], 0.0);
        assert!(s["bpr"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn layers_zero_variant_trains_and_evaluates() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_synthetic(&data);
    let out = tmp.path().join("l0");
    run_train(&ExperimentSpec { seeds: vec![5], ..spec(&data, &out, "layers_0") }).unwrap();
    let cfg_text = fs::read_to_string(seed_dir(&out, 5).join("config.txt")).unwrap();
    assert!(cfg_text.lines().any(|l| l.replace(' ', "") == "layers=0"));
    let mut cfg = small_config();
    cfg.apply_text(&cfg_text).unwrap();
    let m = run_evaluate(&data, &seed_dir(&out, 5).join(CHECKPOINT_FILE), &cfg, None).unwrap();
    assert!(m.users_evaluated > 0);
}

#[test]
fn ablation_rows_survive_a_failing_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_synthetic(&data);
    let out = tmp.path().join("abl");
    let variants = vec!["full".to_string(), "no_such_variant".to_string(), "wo_bothm".to_string()];
    let rows = run_ablation_matrix(&spec(&data, &out, "full"), &variants).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1].status, "error");
    assert!(rows[1].message.as_deref().unwrap().contains("no_such_variant"));
    assert_eq!(rows[0].status, "ok");
    assert_eq!(rows[2].status, "ok");
    let back = read_ablation_tsv(&out.join("ablation.tsv")).unwrap();
    assert_eq!(back[0], rows[0]);
    assert_eq!(back[2], rows[2]);
    assert_eq!(significance(&back), significance(&rows));
    assert!(out.join("significance.json").exists());
}

#[test]
fn diagnostics_on_a_fresh_model() {
    let tmp = tempfile::tempdir().unwrap();
    let shape = ModelShape { users: 30, items: 20, dim: 6, intents: 3, source_dim: 5, hidden: 8, eta: 1.0, kappa: 10.0 };
    let state = ModelState::init(shape, &mut Rng::seed_from_u64(9)).unwrap();
    let ckpt = tmp.path().join("m.diau");
    save_model(&ckpt, &state).unwrap();
    let report = run_diagnostics(&ckpt, None, &TrainConfig::default(), 16, 1, &tmp.path().join("d")).unwrap();
    assert!(report.passed);
    assert!(report.convention.contains("exp(-2"));
    let json: Value = serde_json::from_slice(&fs::read(tmp.path().join("d/geometry.json")).unwrap()).unwrap();
    assert!(json["convention"].as_str().is_some());

    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[0] = b'X';
    fs::write(&ckpt, bytes).unwrap();
    let err = run_diagnostics(&ckpt, None, &TrainConfig::default(), 16, 1, &tmp.path().join("d")).unwrap_err();
    assert!(matches!(err, Error::Format(_)));
}
