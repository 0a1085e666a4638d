//! Central finite-difference verification of every parameter gradient of the
//! combined multi-task loss, in `f64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::corpus::training_data;
use crate::data::synth::{generate_corpus, SynthConfig};
use crate::error::Result;
use crate::fusion::FusionConfig;
use crate::model::{Model, ModelConfig};
use crate::objectives::{LossWeights, ObjectiveSet, PairSource};
use crate::training::{batch_loss_and_grads_sequential, prepare_instance, PreparedInstance, TrainOptions};
use crate::transformer::TransformerConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            step: 3e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            seed: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `name[flat index]` of the element with the largest relative error.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub loss: f64,
    pub passed: bool,
}

/// The toy problem: a small model and a fixed batch that activates every
/// objective with both matched and mismatched pairs.
pub fn toy_problem(cfg: &GradcheckConfig) -> Result<(Model<f64>, Vec<PreparedInstance<f64>>)> {
    let synth = SynthConfig { seed: cfg.seed, n_dialogues: 2, frames: 2, regions: 2, turns: 2, d_emb: 4, noise: 0.1 };
    let corpus = generate_corpus(&synth, [2, 0, 0])?;
    let data = training_data::<f64>(&corpus.train, &corpus.vocab);
    let config = ModelConfig {
        transformer: TransformerConfig {
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            d_model: cfg.d_model,
            d_ff: cfg.d_ff,
            vocab_size: corpus.vocab.len(),
            max_seq_len: 48,
            dropout: 0.0,
        },
        fusion: FusionConfig { d_emb: 4, max_frames: 2, max_regions: 2, max_turns: 3 },
    };
    let mut model = Model::<f64>::init(config, cfg.seed)?;
    // Move zero biases and unit gains off their initial values.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xF00D);
    for i in 0..model.params.len() {
        let noise = crate::params::normal_tensor::<f64, _>(model.params.tensor(i).shape(), 0.1, &mut rng);
        let t = model.params.tensor_mut(i);
        for (a, b) in t.data_mut().iter_mut().zip(noise.data()) {
            *a += b;
        }
    }
    let opts = TrainOptions { objectives: ObjectiveSet::all(), mask_rate: 0.3, ..Default::default() };
    let sources = [
        (0, PairSource::Matched),
        (3, PairSource::Matched),
        (1, PairSource::SwappedVideo(2)),
        (2, PairSource::SwappedDialogue(1)),
    ];
    let mut preps = Vec::new();
    for (i, src) in sources {
        preps.push(prepare_instance(&model, &data, i, src, &opts, &mut rng)?);
    }
    Ok((model, preps))
}

fn combined(model: &Model<f64>, preps: &[PreparedInstance<f64>]) -> Result<f64> {
    Ok(batch_loss_and_grads_sequential(model, preps, LossWeights::standard(), false)?.0.combined)
}

/// Compares analytic and central-difference gradients for every element of every parameter.
pub fn check(
    model: &mut Model<f64>,
    preps: &[PreparedInstance<f64>],
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    let (bundle, grads) = batch_loss_and_grads_sequential(model, preps, LossWeights::standard(), true)?;
    let grads = grads.expect("requested gradients");
    let mut report = GradcheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        loss: bundle.combined,
        passed: true,
    };
    for (p, grad) in grads.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = model.params.tensor(p).data()[j];
            model.params.tensor_mut(p).data_mut()[j] = orig + cfg.step;
            let plus = combined(model, preps)?;
            model.params.tensor_mut(p).data_mut()[j] = orig - cfg.step;
            let minus = combined(model, preps)?;
            model.params.tensor_mut(p).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let analytic = grad.data()[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = rel;
                report.worst = format!("{}[{j}]", model.params.name(p));
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_err < cfg.tolerance;
    Ok(report)
}

pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let (mut model, preps) = toy_problem(cfg)?;
    check(&mut model, &preps, cfg)
}
