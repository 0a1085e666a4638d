//! Autoregressive response decoding.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::vocab::EOS;
use crate::error::{Result, TensorError};
use crate::fusion::{build_layout, DialogueInstance, ResponseInput, VideoFeatures};
use crate::model::Model;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    TopK,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    pub strategy: Strategy,
    pub k: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions { strategy: Strategy::Greedy, k: 1, temperature: 1.0, max_new_tokens: 12, seed: 0 }
    }
}

impl DecodeOptions {
    pub fn validate(&self) -> Result<()> {
        if self.strategy == Strategy::TopK && self.k == 0 {
            return Err(TensorError::Contract("k must be at least 1 for top_k".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(TensorError::Contract(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.max_new_tokens == 0 {
            return Err(TensorError::Contract("max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Samples from the `k` highest tempered logits, renormalized.
pub fn sample_top_k<T: Scalar>(logits: &[T], k: usize, temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order.truncate(k.min(logits.len()));
    let scaled: Vec<f64> = order.iter().map(|&i| logits[i].to_f64().unwrap() / temperature).collect();
    let max = scaled[0];
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (w, &i) in weights.iter().zip(&order) {
        if u < *w {
            return i;
        }
        u -= w;
    }
    order[order.len() - 1]
}

/// Decodes a response for `context` (its `target` is ignored). The end token is not returned.
pub fn generate<T: Scalar>(
    model: &Model<T>,
    context: &DialogueInstance,
    video: &VideoFeatures<T>,
    options: &DecodeOptions,
) -> Result<Vec<usize>> {
    options.validate()?;
    let mut context = context.clone();
    context.target.clear();
    let base = build_layout(&context, video, ResponseInput::Prefix(&[]), &model.config)?.len();
    let max = model.config.transformer.max_seq_len;
    if base + options.max_new_tokens > max {
        return Err(TensorError::Capacity { len: base + options.max_new_tokens, max });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut out = Vec::new();
    while out.len() < options.max_new_tokens {
        let layout = build_layout(&context, video, ResponseInput::Prefix(&out), &model.config)?;
        let logits = model.last_logits(&layout)?;
        let next = match options.strategy {
            Strategy::Greedy => argmax(&logits),
            Strategy::TopK => sample_top_k(&logits, options.k, options.temperature, &mut rng),
        };
        if next == EOS {
            break;
        }
        out.push(next);
    }
    Ok(out)
}

/// Per-instance outcome of [`batch_generate`].
pub type GenerationResults = BTreeMap<String, Result<Vec<usize>>>;

/// Decodes every instance independently; failures are kept per instance.
pub fn batch_generate<'a, T: Scalar>(
    model: &Model<T>,
    items: &[(&'a DialogueInstance, &'a VideoFeatures<T>)],
    options: &DecodeOptions,
) -> GenerationResults {
    items
        .par_iter()
        .map(|(inst, video)| (inst.id.clone(), generate(model, inst, video, options)))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}
