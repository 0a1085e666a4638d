//! Flat `key=value` run configuration shared by every subcommand.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::fusion::FusionConfig;
use crate::generation::{DecodeOptions, Strategy};
use crate::model::ModelConfig;
use crate::objectives::{LossWeights, Objective, ObjectiveSet, PerObjective};
use crate::optim::AdamConfig;
use crate::training::TrainOptions;
use crate::transformer::TransformerConfig;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("config field {field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: &str, message: impl Into<String>) -> Self {
        ConfigError { field: field.to_string(), message: message.into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    SpatialOnly,
    TemporalOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::SpatialOnly, Ablation::TemporalOnly];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::SpatialOnly => "spatial_only",
            Ablation::TemporalOnly => "temporal_only",
        }
    }
}

impl FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("expected full, spatial_only or temporal_only, got {s:?}"))
    }
}

fn parse_objectives(s: &str) -> Result<ObjectiveSet, String> {
    let mut set = ObjectiveSet::default();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let o = Objective::parse(part).ok_or_else(|| format!("unknown objective {part:?}"))?;
        set.set(o, true);
    }
    if !Objective::ALL.iter().any(|&o| set.get(o)) {
        return Err("at least one objective is required".into());
    }
    Ok(set)
}

fn objectives_string(set: &ObjectiveSet) -> String {
    set.names().join(",")
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| format!("bad list entry {p:?}")))
        .collect()
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub max_frames: usize,
    pub max_regions: usize,
    pub max_turns: usize,
    pub objectives: ObjectiveSet,
    pub weights: LossWeights,
    pub mask_rate: f64,
    pub corrupt_rate: f64,
    pub lr: f64,
    pub warmup: u64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: u64,
    /// Stop after this many optimizer steps in total (across resumes).
    pub max_steps: Option<u64>,
    pub seed: Option<u64>,
    pub ablation: Ablation,
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Evaluate the gold references instead of a checkpoint.
    pub gold: bool,
    pub strategy: Strategy,
    pub k: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    /// Seeds trained by `ablate`.
    pub seeds: Vec<u64>,
    /// Objectives knocked out one at a time by `ablate`, in addition to the pooling modes.
    pub knockouts: Vec<Objective>,
    /// Corpus generation (`corpus` subcommand).
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub frames: usize,
    pub regions: usize,
    pub turns: usize,
    pub d_emb: usize,
    pub noise: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            max_seq_len: 80,
            dropout: 0.0,
            max_frames: 8,
            max_regions: 16,
            max_turns: 10,
            objectives: ObjectiveSet::all(),
            weights: LossWeights::standard(),
            mask_rate: crate::objectives::MASK_RATE,
            corrupt_rate: crate::objectives::CORRUPT_RATE,
            lr: DESK_PEAK_LR,
            warmup: 300,
            grad_clip: 1.0,
            batch_size: 16,
            epochs: 14,
            max_steps: None,
            seed: None,
            ablation: Ablation::Full,
            corpus: None,
            checkpoint: None,
            out: None,
            gold: false,
            strategy: Strategy::Greedy,
            k: 1,
            temperature: 1.0,
            max_new_tokens: 12,
            seeds: vec![1, 2, 3],
            knockouts: Vec::new(),
            n_train: 2000,
            n_val: 200,
            n_test: 200,
            frames: 4,
            regions: 4,
            turns: 3,
            d_emb: 32,
            noise: 0.1,
        }
    }
}

/// Peak learning rate of the desk configuration, which trains from scratch.
pub const DESK_PEAK_LR: f64 = 1e-3;

fn parse<T: FromStr>(field: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::new(field, format!("cannot parse {v:?}")))
}

impl RunConfig {
    /// Applies one setting. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let opt_path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "n_layers" => self.n_layers = parse(key, v)?,
            "n_heads" => self.n_heads = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "d_ff" => self.d_ff = parse(key, v)?,
            "max_seq_len" => self.max_seq_len = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "max_frames" => self.max_frames = parse(key, v)?,
            "max_regions" => self.max_regions = parse(key, v)?,
            "max_turns" => self.max_turns = parse(key, v)?,
            "objectives" => self.objectives = parse_objectives(v).map_err(|m| ConfigError::new(key, m))?,
            "weight_gen" => self.weights.gen = parse(key, v)?,
            "weight_mlm" => self.weights.mlm = parse(key, v)?,
            "weight_mvm" => self.weights.mvm = parse(key, v)?,
            "weight_mvt" => self.weights.mvt = parse(key, v)?,
            "mask_rate" => self.mask_rate = parse(key, v)?,
            "corrupt_rate" => self.corrupt_rate = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "warmup" => self.warmup = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "max_steps" => self.max_steps = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "seed" => self.seed = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "ablation" => self.ablation = v.parse().map_err(|m: String| ConfigError::new(key, m))?,
            "corpus" => self.corpus = opt_path(v),
            "checkpoint" => self.checkpoint = opt_path(v),
            "out" => self.out = opt_path(v),
            "gold" => self.gold = parse(key, v)?,
            "strategy" => {
                self.strategy = match v {
                    "greedy" => Strategy::Greedy,
                    "top_k" => Strategy::TopK,
                    _ => return Err(ConfigError::new(key, format!("expected greedy or top_k, got {v:?}"))),
                }
            }
            "k" => self.k = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "max_new_tokens" => self.max_new_tokens = parse(key, v)?,
            "seeds" => self.seeds = parse_list(v).map_err(|m| ConfigError::new(key, m))?,
            "knockouts" => {
                self.knockouts = v
                    .split(',')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(|p| {
                        Objective::parse(p).ok_or_else(|| ConfigError::new(key, format!("unknown objective {p:?}")))
                    })
                    .collect::<Result<_, _>>()?
            }
            "n_train" => self.n_train = parse(key, v)?,
            "n_val" => self.n_val = parse(key, v)?,
            "n_test" => self.n_test = parse(key, v)?,
            "frames" => self.frames = parse(key, v)?,
            "regions" => self.regions = parse(key, v)?,
            "turns" => self.turns = parse(key, v)?,
            "d_emb" => self.d_emb = parse(key, v)?,
            "noise" => self.noise = parse(key, v)?,
            _ => return Err(ConfigError::new(key, "unknown key")),
        }
        Ok(())
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                ConfigError::new(&format!("line {}", i + 1), format!("expected key=value, got {line:?}"))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Every field as `(key, value)`, in a fixed order; parses back to the same config.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        vec![
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_model", self.d_model.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("dropout", self.dropout.to_string()),
            ("max_frames", self.max_frames.to_string()),
            ("max_regions", self.max_regions.to_string()),
            ("max_turns", self.max_turns.to_string()),
            ("objectives", objectives_string(&self.objectives)),
            ("weight_gen", self.weights.gen.to_string()),
            ("weight_mlm", self.weights.mlm.to_string()),
            ("weight_mvm", self.weights.mvm.to_string()),
            ("weight_mvt", self.weights.mvt.to_string()),
            ("mask_rate", self.mask_rate.to_string()),
            ("corrupt_rate", self.corrupt_rate.to_string()),
            ("lr", self.lr.to_string()),
            ("warmup", self.warmup.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("max_steps", self.max_steps.map(|s| s.to_string()).unwrap_or_default()),
            ("seed", self.seed.map(|s| s.to_string()).unwrap_or_default()),
            ("ablation", self.ablation.name().to_string()),
            ("corpus", path(&self.corpus)),
            ("checkpoint", path(&self.checkpoint)),
            ("out", path(&self.out)),
            ("gold", self.gold.to_string()),
            (
                "strategy",
                match self.strategy {
                    Strategy::Greedy => "greedy",
                    Strategy::TopK => "top_k",
                }
                .to_string(),
            ),
            ("k", self.k.to_string()),
            ("temperature", self.temperature.to_string()),
            ("max_new_tokens", self.max_new_tokens.to_string()),
            ("seeds", join(&self.seeds)),
            ("knockouts", self.knockouts.iter().map(|o| o.name()).collect::<Vec<_>>().join(",")),
            ("n_train", self.n_train.to_string()),
            ("n_val", self.n_val.to_string()),
            ("n_test", self.n_test.to_string()),
            ("frames", self.frames.to_string()),
            ("regions", self.regions.to_string()),
            ("turns", self.turns.to_string()),
            ("d_emb", self.d_emb.to_string()),
            ("noise", self.noise.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Checks every field; the first offending one is named.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("max_frames", self.max_frames),
            ("max_regions", self.max_regions),
            ("max_turns", self.max_turns),
            ("batch_size", self.batch_size),
            ("max_new_tokens", self.max_new_tokens),
            ("frames", self.frames),
            ("regions", self.regions),
            ("turns", self.turns),
            ("d_emb", self.d_emb),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(ConfigError::new(k, "must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ConfigError::new("n_heads", format!("must divide d_model {}", self.d_model)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ConfigError::new("dropout", "must lie in [0, 1)"));
        }
        for (k, v) in [("mask_rate", self.mask_rate), ("corrupt_rate", self.corrupt_rate)] {
            if !(0.0..1.0).contains(&v) {
                return Err(ConfigError::new(k, "must lie in [0, 1)"));
            }
        }
        if self.mask_rate == 0.0 && (self.objectives.mlm || self.objectives.mvm) {
            return Err(ConfigError::new("mask_rate", "must be positive when mlm or mvm is enabled"));
        }
        for o in Objective::ALL {
            let w = self.weights.get(o);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(ConfigError::new(&format!("weight_{}", o.name()), "must be finite and non-negative"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ConfigError::new("lr", "must be positive"));
        }
        if self.warmup == 0 {
            return Err(ConfigError::new("warmup", "must be positive"));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(ConfigError::new("grad_clip", "must be finite and non-negative"));
        }
        if self.strategy == Strategy::TopK && self.k == 0 {
            return Err(ConfigError::new("k", "must be at least 1 for top_k"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ConfigError::new("temperature", "must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(ConfigError::new("noise", "must be finite and non-negative"));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::new("seeds", "must list at least one seed"));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            transformer: TransformerConfig {
                n_layers: self.n_layers,
                n_heads: self.n_heads,
                d_model: self.d_model,
                d_ff: self.d_ff,
                vocab_size,
                max_seq_len: self.max_seq_len,
                dropout: self.dropout,
            },
            fusion: FusionConfig {
                d_emb: self.d_emb,
                max_frames: self.max_frames,
                max_regions: self.max_regions,
                max_turns: self.max_turns,
            },
        }
    }

    pub fn train_options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            objectives: self.objectives,
            weights: self.weights,
            mask_rate: self.mask_rate,
            corrupt_rate: self.corrupt_rate,
            peak_lr: self.lr,
            warmup_steps: self.warmup,
            grad_clip: self.grad_clip,
            adam: AdamConfig::default(),
            seed,
        }
    }

    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions {
            strategy: self.strategy,
            k: self.k,
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
            seed: self.seed.unwrap_or(0),
        }
    }
}

impl PerObjective<bool> {
    /// Knocks out one objective.
    pub fn without(mut self, o: Objective) -> Self {
        self.set(o, false);
        self
    }
}
