//! Training configuration, flat `key=value` files, and named variants.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::intent::ModelShape;
use crate::losses::{LossToggles, LossWeights, Objective, UniformityTarget};
use crate::model::{CoarseAnchor, ForwardConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub batch: usize,
    pub lr: f64,
    pub tau: f64,
    pub eta: f64,
    pub intents: usize,
    pub omega: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub layers: usize,
    pub kappa: f64,
    pub weight_decay: f64,
    pub epochs_max: usize,
    pub patience: usize,
    pub seed: u64,
    /// Projector hidden width; 0 means `4 * dim`.
    pub hidden: usize,
    pub toggles: LossToggles,
    pub coarse_anchor: CoarseAnchor,
    /// Apply the extra `1/(|N_u||N_v|)` edge factor on top of symmetric normalization.
    pub degree_prefactor: bool,
    pub check_invariants: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 32,
            batch: 4096,
            lr: 1e-4,
            tau: 0.2,
            eta: 1.0,
            intents: 128,
            omega: 1.0,
            lambda1: 0.2,
            lambda2: 0.2,
            layers: 2,
            kappa: 10.0,
            weight_decay: 1e-6,
            epochs_max: 100,
            patience: 5,
            seed: 2024,
            hidden: 0,
            toggles: LossToggles::default(),
            coarse_anchor: CoarseAnchor::Semantic,
            degree_prefactor: false,
            check_invariants: cfg!(debug_assertions),
        }
    }
}

pub const KEYS: [&str; 26] = [
    "dim",
    "batch",
    "lr",
    "tau",
    "eta",
    "intents",
    "omega",
    "lambda1",
    "lambda2",
    "layers",
    "kappa",
    "weight_decay",
    "epochs_max",
    "patience",
    "seed",
    "hidden",
    "use_fine",
    "use_coarse",
    "use_intra",
    "use_inter",
    "use_dual_intent",
    "uniformity_target",
    "objective",
    "coarse_anchor",
    "degree_prefactor",
    "check_invariants",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key}={value:?}")))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "dim" => self.dim = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "eta" => self.eta = parse(key, v)?,
            "intents" | "K" => self.intents = parse(key, v)?,
            "omega" => self.omega = parse(key, v)?,
            "lambda1" => self.lambda1 = parse(key, v)?,
            "lambda2" => self.lambda2 = parse(key, v)?,
            "layers" | "L" => self.layers = parse(key, v)?,
            "kappa" => self.kappa = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "epochs_max" => self.epochs_max = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "use_fine" => self.toggles.use_fine = parse(key, v)?,
            "use_coarse" => self.toggles.use_coarse = parse(key, v)?,
            "use_intra" => self.toggles.use_intra = parse(key, v)?,
            "use_inter" => self.toggles.use_inter = parse(key, v)?,
            "use_dual_intent" => self.toggles.use_dual_intent = parse(key, v)?,
            "uniformity_target" => self.toggles.uniformity_target = v.parse()?,
            "objective" => self.toggles.objective = v.parse()?,
            "coarse_anchor" => self.coarse_anchor = v.parse()?,
            "degree_prefactor" => self.degree_prefactor = parse(key, v)?,
            "check_invariants" => self.check_invariants = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.toggles;
        Some(match key {
            "dim" => self.dim.to_string(),
            "batch" => self.batch.to_string(),
            "lr" => self.lr.to_string(),
            "tau" => self.tau.to_string(),
            "eta" => self.eta.to_string(),
            "intents" => self.intents.to_string(),
            "omega" => self.omega.to_string(),
            "lambda1" => self.lambda1.to_string(),
            "lambda2" => self.lambda2.to_string(),
            "layers" => self.layers.to_string(),
            "kappa" => self.kappa.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "epochs_max" => self.epochs_max.to_string(),
            "patience" => self.patience.to_string(),
            "seed" => self.seed.to_string(),
            "hidden" => self.hidden.to_string(),
            "use_fine" => t.use_fine.to_string(),
            "use_coarse" => t.use_coarse.to_string(),
            "use_intra" => t.use_intra.to_string(),
            "use_inter" => t.use_inter.to_string(),
            "use_dual_intent" => t.use_dual_intent.to_string(),
            "uniformity_target" => match t.uniformity_target {
                UniformityTarget::UserOnly => "user_only",
                UniformityTarget::UserAndItem => "user_and_item",
                UniformityTarget::ItemOnly => "item_only",
            }
            .to_string(),
            "objective" => match t.objective {
                Objective::Au => "au",
                Objective::Bpr => "bpr",
            }
            .to_string(),
            "coarse_anchor" => match self.coarse_anchor {
                CoarseAnchor::Semantic => "semantic",
                CoarseAnchor::Prototype => "prototype",
            }
            .to_string(),
            "degree_prefactor" => self.degree_prefactor.to_string(),
            "check_invariants" => self.check_invariants.to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// One `key=value` line per key, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("every key is readable")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim as f64),
            ("batch", self.batch as f64),
            ("tau", self.tau),
            ("eta", self.eta),
            ("intents", self.intents as f64),
            ("epochs_max", self.epochs_max as f64),
            ("patience", self.patience as f64),
        ];
        for (k, v) in positive {
            if v.is_nan() || v <= 0.0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        let non_negative = [
            ("lr", self.lr),
            ("omega", self.omega),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("kappa", self.kappa),
            ("weight_decay", self.weight_decay),
        ];
        for (k, v) in non_negative {
            if v.is_nan() || v < 0.0 {
                return Err(Error::Config(format!("{k} must be non-negative")));
            }
        }
        if self.dim < 2 {
            return Err(Error::Config("dim must be at least 2".into()));
        }
        Ok(())
    }

    pub fn hidden_width(&self) -> usize {
        if self.hidden == 0 {
            4 * self.dim
        } else {
            self.hidden
        }
    }

    pub fn forward(&self) -> ForwardConfig {
        ForwardConfig {
            layers: self.layers,
            tau: self.tau,
            toggles: self.toggles,
            weights: LossWeights {
                omega: self.omega,
                lambda1: self.lambda1,
                lambda2: self.lambda2,
                weight_decay: self.weight_decay,
            },
            anchor: self.coarse_anchor,
            check_invariants: self.check_invariants,
        }
    }

    pub fn shape(&self, users: usize, items: usize, source_dim: usize) -> ModelShape {
        ModelShape {
            users,
            items,
            dim: self.dim,
            intents: self.intents,
            source_dim,
            hidden: self.hidden_width(),
            eta: self.eta,
            kappa: self.kappa,
        }
    }

    /// Applies a named variant on top of the current values.
    pub fn apply_variant(&mut self, name: &str) -> Result<()> {
        for (k, v) in variant_overrides(name)? {
            self.set(k, v)?;
        }
        Ok(())
    }
}

pub const VARIANTS: [&str; 15] = [
    "full",
    "wo_fm",
    "wo_cm",
    "wo_bothm",
    "wo_diir",
    "wo_ir",
    "wo_bothr",
    "bpr",
    "au_user_item",
    "au_item",
    "layers_0",
    "layers_1",
    "layers_2",
    "layers_3",
    "layers_4",
];

/// Keys a variant changes relative to `full`.
pub fn variant_overrides(name: &str) -> Result<Vec<(&'static str, &'static str)>> {
    Ok(match name {
        "full" => vec![],
        "wo_fm" => vec![("use_fine", "false")],
        "wo_cm" => vec![("use_coarse", "false")],
        "wo_bothm" => vec![("use_fine", "false"), ("use_coarse", "false")],
        "wo_diir" => vec![("use_dual_intent", "false"), ("use_intra", "false")],
        "wo_ir" => vec![("use_inter", "false")],
        "wo_bothr" => vec![("use_intra", "false"), ("use_inter", "false")],
        "bpr" => vec![("objective", "bpr")],
        "au_user_item" => vec![("uniformity_target", "user_and_item")],
        "au_item" => vec![("uniformity_target", "item_only")],
        "layers_0" => vec![("layers", "0")],
        "layers_1" => vec![("layers", "1")],
        "layers_2" => vec![("layers", "2")],
        "layers_3" => vec![("layers", "3")],
        "layers_4" => vec![("layers", "4")],
        other => return Err(Error::Config(format!("unknown variant {other:?}"))),
    })
}

/// Small-batch settings for the desk-scale synthetic dataset.
pub fn synthetic_preset() -> TrainConfig {
    TrainConfig {
        dim: 64,
        batch: 512,
        lr: 3e-3,
        intents: 16,
        patience: 10,
        ..TrainConfig::default()
    }
}
