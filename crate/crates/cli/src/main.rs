use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diaurec::config::{synthetic_preset, TrainConfig, VARIANTS};
use diaurec::data::synthetic::SyntheticInteractions;
use diaurec::harness::{
    config_for_checkpoint, run_ablation_matrix, run_diagnostics, run_evaluate, run_prepare, run_train, ExperimentSpec,
    Source,
};
use diaurec::{Error, Result};

/// Default root for run outputs when `--out` is absent.
const OUT_ROOT_ENV: &str = "DIAUREC_OUT_ROOT";

#[derive(Parser)]
#[command(name = "diaurec", version, about = "Dual-intent alignment/uniformity recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter and split raw interactions, or generate the synthetic dataset.
    Prepare(PrepareArgs),
    /// Train one variant over one or more seeds and evaluate on test.
    Train(TrainArgs),
    /// Test-set metrics of a saved checkpoint.
    Evaluate(EvaluateArgs),
    /// Train a list of variants and tabulate R@20/N@20.
    Ablate(AblateArgs),
    /// Geometry report and gradient agreement suite for a checkpoint.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct PrepareArgs {
    /// Raw tab-separated `user, item[, rating]` file.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    input: Option<PathBuf>,
    /// Use the clustered synthetic generator instead of a file.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 300)]
    users: usize,
    #[arg(long, default_value_t = 200)]
    items: usize,
    #[arg(long, default_value_t = 5)]
    clusters: usize,
    #[arg(long, default_value_t = 64)]
    semantic_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_scale: f64,
    /// Keep only interactions rated at least this much.
    #[arg(long)]
    min_rating: Option<f64>,
    /// User semantic vectors, rows in first-appearance order of the input.
    #[arg(long, requires = "item_semantic")]
    user_semantic: Option<PathBuf>,
    #[arg(long, requires = "user_semantic")]
    item_semantic: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Prepared dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Start from the small-batch synthetic settings instead of the defaults.
    #[arg(long)]
    synthetic_preset: bool,
    #[arg(long, default_value = "full")]
    variant: String,
    /// Seeds, comma separated or repeated; defaults to the config seed.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    synthetic_preset: bool,
    /// Variants to run, comma separated; all presets when absent.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prepared dataset; without it the base embeddings are measured.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value_t = 256)]
    sample_size: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn out_dir(flag: Option<PathBuf>, sub: &str) -> PathBuf {
    flag.unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(sub)
    })
}

fn parse_sets(sets: &[String]) -> Result<Vec<(String, String)>> {
    sets.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))
        })
        .collect()
}

fn layered(mut base: TrainConfig, args: &ConfigArgs) -> Result<(TrainConfig, Vec<(String, String)>)> {
    if let Some(path) = &args.config {
        base.apply_file(path)?;
    }
    Ok((base, parse_sets(&args.sets)?))
}

fn with_sets(cfg: TrainConfig, args: &ConfigArgs) -> Result<TrainConfig> {
    let (mut cfg, sets) = layered(cfg, args)?;
    for (k, v) in &sets {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn experiment(
    data: &Path,
    cfg: &ConfigArgs,
    preset: bool,
    variant: &str,
    seeds: &[u64],
    out: PathBuf,
) -> Result<ExperimentSpec> {
    let base = if preset { synthetic_preset() } else { TrainConfig::default() };
    let (config, overrides) = layered(base, cfg)?;
    let mut seeds = seeds.to_vec();
    if seeds.is_empty() {
        let mut probe = config.clone();
        for (k, v) in &overrides {
            probe.set(k, v)?;
        }
        seeds.push(probe.seed);
    }
    let spec = ExperimentSpec {
        data_dir: data.to_path_buf(),
        config,
        variant: variant.to_string(),
        overrides,
        seeds,
        out_dir: out,
    };
    spec.resolve(spec.seeds[0])?;
    Ok(spec)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(a) => {
            let source = match a.input {
                Some(interactions) => Source::File {
                    interactions,
                    min_rating: a.min_rating,
                    semantic: a.user_semantic.zip(a.item_semantic),
                },
                None => Source::Synthetic {
                    generator: SyntheticInteractions {
                        users: a.users,
                        items: a.items,
                        clusters: a.clusters,
                        ..SyntheticInteractions::default()
                    },
                    semantic_dim: a.semantic_dim,
                    noise_scale: a.noise_scale,
                },
            };
            let out = out_dir(a.out, "data");
            let stats = run_prepare(&source, a.k, a.seed, &out)?;
            println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
            log::info!("dataset written to {}", out.display());
        }
        Command::Train(a) => {
            let spec = experiment(&a.data, &a.cfg, a.synthetic_preset, &a.variant, &a.seed, out_dir(a.out, "train"))?;
            let outcome = run_train(&spec)?;
            println!("{}", serde_json::to_string_pretty(&outcome.metrics.mean).expect("row serializes"));
        }
        Command::Evaluate(a) => {
            let cfg = with_sets(config_for_checkpoint(&a.checkpoint)?, &a.cfg)?;
            let out = out_dir(a.out, "evaluate");
            let metrics = run_evaluate(&a.data, &a.checkpoint, &cfg, Some(&out))?;
            println!("{}", serde_json::to_string_pretty(&metrics.table_row()).expect("row serializes"));
        }
        Command::Ablate(a) => {
            let variants = if a.variants.is_empty() {
                VARIANTS.iter().map(|v| v.to_string()).collect()
            } else {
                a.variants
            };
            for v in &variants {
                if !VARIANTS.contains(&v.as_str()) {
                    return Err(Error::Config(format!("unknown variant `{v}`")));
                }
            }
            let spec = experiment(&a.data, &a.cfg, a.synthetic_preset, "full", &a.seed, out_dir(a.out, "ablate"))?;
            let rows = run_ablation_matrix(&spec, &variants)?;
            for r in &rows {
                println!("{}\t{}\t{:.4}±{:.4}\t{:.4}±{:.4}", r.variant, r.status, r.r20_mean, r.r20_std, r.n20_mean, r.n20_std);
            }
        }
        Command::Diagnose(a) => {
            let cfg = with_sets(config_for_checkpoint(&a.checkpoint)?, &a.cfg)?;
            let out = out_dir(a.out, "diagnose");
            let report = run_diagnostics(&a.checkpoint, a.data.as_deref(), &cfg, a.sample_size, a.seed, &out)?;
            let g = &report.gradient_check;
            println!("convention: {}", report.convention);
            println!("instances: {}  passed: {}", g.instances, report.passed);
            if !report.passed {
                return Err(Error::Numeric("uniformity gradient identities exceeded tolerance".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
