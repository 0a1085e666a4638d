//! Multi-task training step and epoch loop.
//!
//! All randomness is derived from `(seed, step, instance slot, purpose)`, so a
//! run is reproducible bit for bit, may be resumed from any step boundary, and
//! is independent of how many worker threads build the batch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::{Result, TensorError};
use crate::fusion::{build_layout, DialogueInstance, FusedLayout, ResponseInput, VideoFeatures};
use crate::model::Model;
use crate::objectives::{
    apply_plan, combine, corrupt_pair, generation_loss, lr_schedule, mlm_loss, mvm_loss, mvm_targets, mvt_loss,
    sample_masks, LossBundle, LossParts, LossWeights, Objective, ObjectiveSet, PairSource, PerObjective,
};
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
use crate::scalar::{lit, Scalar};
use crate::tensor::{add_into, Tensor};
use crate::transformer::{logits, Dropout};

const TAG_CORRUPT: u64 = 1;
const TAG_MASK: u64 = 2;
const TAG_DROPOUT: u64 = 3;
const TAG_SHUFFLE: u64 = 4;

/// Mixes a sequence of integers into one seed (splitmix64 finalizer per word).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Instances plus the videos they refer to. Several instances (the turns of
/// one dialogue) share a video; `video_of` also serves as the corruption group.
#[derive(Clone, Debug)]
pub struct TrainingData<T> {
    pub instances: Vec<DialogueInstance>,
    pub videos: Vec<VideoFeatures<T>>,
    pub video_of: Vec<usize>,
}

impl<T: Scalar> TrainingData<T> {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn video(&self, instance: usize) -> &VideoFeatures<T> {
        &self.videos[self.video_of[instance]]
    }

    /// Applies `f` to every video (used for pooling ablations).
    pub fn map_videos(mut self, f: impl Fn(&VideoFeatures<T>) -> VideoFeatures<T>) -> Self {
        self.videos = self.videos.iter().map(f).collect();
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub objectives: ObjectiveSet,
    pub weights: LossWeights,
    pub mask_rate: f64,
    pub corrupt_rate: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    /// Global-norm gradient cap; zero disables clipping.
    pub grad_clip: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            objectives: ObjectiveSet::all(),
            weights: LossWeights::standard(),
            mask_rate: crate::objectives::MASK_RATE,
            corrupt_rate: crate::objectives::CORRUPT_RATE,
            peak_lr: crate::objectives::FINETUNE_PEAK_LR,
            warmup_steps: 500,
            grad_clip: 1.0,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// A fused layout with masks applied and stop-gradient targets precomputed.
#[derive(Clone, Debug)]
pub struct PreparedInstance<T> {
    pub layout: FusedLayout<T>,
    pub mvm_targets: Option<Tensor<T>>,
    pub active: ObjectiveSet,
}

/// Assembles one training input: pair source, masking, targets.
pub fn prepare_instance<T: Scalar>(
    model: &Model<T>,
    data: &TrainingData<T>,
    index: usize,
    source: PairSource,
    opts: &TrainOptions,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedInstance<T>> {
    let (dialogue, video) = match source {
        PairSource::Matched => (&data.instances[index], data.video(index)),
        PairSource::SwappedVideo(j) => (&data.instances[index], data.video(j)),
        PairSource::SwappedDialogue(j) => (&data.instances[j], data.video(index)),
    };
    let mut layout = build_layout(dialogue, video, ResponseInput::Teacher, &model.config)?;
    let matched = source.is_matched();
    layout.mvt_label = matched;
    let obj = &opts.objectives;
    let mut active = PerObjective { gen: obj.gen && matched, mvt: obj.mvt, ..Default::default() };
    if obj.mlm || obj.mvm {
        let plan = sample_masks(&layout, opts.mask_rate, obj.mlm, obj.mvm, rng)?;
        apply_plan(&mut layout, &plan);
        active.mlm = matched && obj.mlm && !plan.token_positions.is_empty();
        active.mvm = matched && obj.mvm && !plan.region_positions.is_empty();
    }
    let mvm_targets = if active.mvm { mvm_targets(model, &layout)? } else { None };
    Ok(PreparedInstance { layout, mvm_targets, active })
}

/// Records the active per-objective losses of one prepared instance on `tape`.
pub fn instance_losses<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    bound: &crate::params::BoundParams,
    prep: &PreparedInstance<T>,
    dropout: Option<&mut Dropout>,
) -> Result<PerObjective<Option<Var>>> {
    let layout = &prep.layout;
    let hidden = model.hidden_on_tape(tape, bound, layout, dropout)?;
    let dec = &model.ids.decoder;
    let mut out = PerObjective::default();
    if prep.active.gen {
        let rows = layout.gen_positions();
        let labels: Vec<Option<usize>> = rows.iter().map(|&r| layout.gen_labels[r]).collect();
        let h = tape.select_rows(hidden, &rows)?;
        let l = logits(tape, bound, dec, h)?;
        out.gen = generation_loss(tape, l, &labels)?;
    }
    if prep.active.mlm {
        let rows = layout.mlm_positions();
        let labels: Vec<Option<usize>> = rows.iter().map(|&r| layout.mlm_labels[r]).collect();
        let h = tape.select_rows(hidden, &rows)?;
        let l = logits(tape, bound, dec, h)?;
        out.mlm = mlm_loss(tape, l, &labels)?;
    }
    if prep.active.mvm {
        let targets =
            prep.mvm_targets.as_ref().ok_or_else(|| TensorError::Contract("masked-region targets missing".into()))?;
        let rows: Vec<usize> = layout.masked_regions.iter().map(|&r| 1 + r).collect();
        let h = tape.select_rows(hidden, &rows)?;
        out.mvm = Some(mvm_loss(tape, bound, &model.ids.heads, h, targets)?);
    }
    if prep.active.mvt {
        // The final position is the only one that attends to the whole pair.
        let h = tape.select_rows(hidden, &[layout.len() - 1])?;
        out.mvt = Some(mvt_loss(tape, bound, &model.ids.heads, h, layout.mvt_label)?);
    }
    Ok(out)
}

/// Batch losses (per-objective mean over instances where it is active) and,
/// if `with_grads`, the gradient of the combined loss for every parameter.
pub fn batch_loss_and_grads<T: Scalar>(
    model: &Model<T>,
    preps: &[PreparedInstance<T>],
    weights: LossWeights,
    dropout_seeds: Option<&[u64]>,
    with_grads: bool,
) -> Result<(LossBundle, Option<Vec<Tensor<T>>>)> {
    batch_impl(model, preps, weights, dropout_seeds, with_grads, true)
}

/// [`batch_loss_and_grads`] on the calling thread only.
pub fn batch_loss_and_grads_sequential<T: Scalar>(
    model: &Model<T>,
    preps: &[PreparedInstance<T>],
    weights: LossWeights,
    with_grads: bool,
) -> Result<(LossBundle, Option<Vec<Tensor<T>>>)> {
    batch_impl(model, preps, weights, None, with_grads, false)
}

type InstanceResult<T> = Result<(PerObjective<Option<f64>>, Option<Vec<Tensor<T>>>)>;

fn batch_impl<T: Scalar>(
    model: &Model<T>,
    preps: &[PreparedInstance<T>],
    weights: LossWeights,
    dropout_seeds: Option<&[u64]>,
    with_grads: bool,
    parallel: bool,
) -> Result<(LossBundle, Option<Vec<Tensor<T>>>)> {
    let mut counts = PerObjective::<usize>::default();
    for p in preps {
        for o in Objective::ALL {
            if p.active.get(o) {
                counts.set(o, counts.get(o) + 1);
            }
        }
    }
    let coeff = |o: Objective| -> f64 {
        match counts.get(o) {
            0 => 0.0,
            n => weights.get(o) / n as f64,
        }
    };
    let rate = model.config.transformer.dropout;

    let pass = |(k, prep): (usize, &PreparedInstance<T>)| -> InstanceResult<T> {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let mut dropout = dropout_seeds.map(|s| Dropout::new(rate, s[k]));
        let parts = instance_losses(model, &mut tape, &bound, prep, dropout.as_mut())?;
        let mut values = PerObjective::default();
        let mut terms = Vec::new();
        for o in Objective::ALL {
            if let Some(v) = parts.get(o) {
                values.set(o, Some(tape.value(v).item().to_f64().unwrap()));
                terms.push(tape.scale(v, lit(coeff(o))));
            }
        }
        if !with_grads || terms.is_empty() {
            return Ok((values, None));
        }
        let root = tape.add_all(&terms)?;
        tape.backward(root)?;
        Ok((values, Some(model.params.collect_grads(&tape, &bound))))
    };
    let per_instance: Vec<InstanceResult<T>> = if parallel {
        preps.par_iter().enumerate().map(pass).collect()
    } else {
        preps.iter().enumerate().map(pass).collect()
    };

    let mut sums = PerObjective::<f64>::default();
    let mut grads: Option<Vec<Tensor<T>>> = None;
    for r in per_instance {
        let (values, g) = r?;
        for o in Objective::ALL {
            if let Some(v) = values.get(o) {
                sums.set(o, sums.get(o) + v);
            }
        }
        if let Some(g) = g {
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        add_into(a.data_mut(), b.data());
                    }
                }
            }
        }
    }
    let mut parts: LossParts = PerObjective::default();
    for o in Objective::ALL {
        if counts.get(o) > 0 {
            parts.set(o, Some(sums.get(o) / counts.get(o) as f64));
        }
    }
    let bundle = combine(parts, weights)?;
    let grads = if with_grads {
        Some(grads.unwrap_or_else(|| model.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect()))
    } else {
        None
    };
    Ok((bundle, grads))
}

/// Builds prepared inputs for a batch at a given global step.
pub fn prepare_batch<T: Scalar>(
    model: &Model<T>,
    data: &TrainingData<T>,
    batch: &[usize],
    opts: &TrainOptions,
    step: u64,
) -> Result<Vec<PreparedInstance<T>>> {
    let rate = if opts.objectives.mvt { opts.corrupt_rate } else { 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[opts.seed, step, TAG_CORRUPT]));
    let sources = corrupt_pair(batch, &data.video_of, rate, &mut rng);
    batch
        .par_iter()
        .zip(sources.par_iter())
        .enumerate()
        .map(|(k, (&i, &src))| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[opts.seed, step, k as u64, TAG_MASK]));
            prepare_instance(model, data, i, src, opts, &mut rng)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub step: u64,
    pub lr: f64,
    pub bundle: LossBundle,
    pub grad_norm: f64,
}

/// One optimization step on `batch` (indices into `data`). `step` is 1-based.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    state: &mut AdamState<T>,
    data: &TrainingData<T>,
    batch: &[usize],
    opts: &TrainOptions,
    step: u64,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(TensorError::Contract("empty batch".into()));
    }
    let preps = prepare_batch(model, data, batch, opts, step)?;
    let seeds: Option<Vec<u64>> = (model.config.transformer.dropout > 0.0)
        .then(|| (0..batch.len()).map(|k| derive_seed(&[opts.seed, step, k as u64, TAG_DROPOUT])).collect());
    let diverged = |e: TensorError| match e {
        TensorError::NonFinite { .. } | TensorError::NonFiniteGradient { .. } => {
            TensorError::NonFiniteLoss { step, detail: e.to_string() }
        }
        e => e,
    };
    let (bundle, grads) =
        batch_loss_and_grads(model, &preps, opts.weights, seeds.as_deref(), true).map_err(diverged)?;
    let finite =
        bundle.combined.is_finite() && Objective::ALL.iter().all(|&o| bundle.parts.get(o).is_none_or(f64::is_finite));
    if !finite {
        let p = bundle.parts;
        return Err(TensorError::NonFiniteLoss {
            step,
            detail: format!("gen={:?} mlm={:?} mvm={:?} mvt={:?}", p.gen, p.mlm, p.mvm, p.mvt),
        });
    }
    let mut grads = grads.expect("requested gradients");
    let grad_norm = clip_global_norm(&mut grads, opts.grad_clip);
    let lr = lr_schedule(step, opts.peak_lr, opts.warmup_steps)?;
    adam_step(&mut model.params, &grads, state, lr, opts.adam).map_err(diverged)?;
    Ok(StepOutcome { step, lr, bundle, grad_norm })
}

/// Position of a run, in steps; everything else is derived from the seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Progress {
    /// Number of optimizer steps completed.
    pub step: u64,
}

/// The order in which an epoch visits the training instances.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch, TAG_SHUFFLE]));
    order.shuffle(&mut rng);
    order
}

/// Steps in one epoch (the last batch may be short).
pub fn steps_per_epoch(n: usize, batch_size: usize) -> u64 {
    n.div_ceil(batch_size) as u64
}

/// Runs steps `progress.step + 1 ..= until` (or to the end of `epochs`),
/// calling `on_step` after each. Returns the number of steps taken.
#[allow(clippy::too_many_arguments)]
pub fn run<T: Scalar>(
    model: &mut Model<T>,
    state: &mut AdamState<T>,
    data: &TrainingData<T>,
    opts: &TrainOptions,
    batch_size: usize,
    epochs: u64,
    progress: &mut Progress,
    until: Option<u64>,
    mut on_step: impl FnMut(&StepOutcome, &Model<T>, &AdamState<T>) -> Result<()>,
) -> Result<u64> {
    if batch_size == 0 || data.is_empty() {
        return Err(TensorError::Contract("batch size and training set must be nonempty".into()));
    }
    let per_epoch = steps_per_epoch(data.len(), batch_size);
    let total = per_epoch * epochs;
    let last = until.map_or(total, |u| u.min(total));
    let mut taken = 0;
    let mut order_epoch = u64::MAX;
    let mut order = Vec::new();
    while progress.step < last {
        let epoch = progress.step / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(data.len(), opts.seed, epoch);
            order_epoch = epoch;
        }
        let b = (progress.step % per_epoch) as usize;
        let batch = &order[b * batch_size..((b + 1) * batch_size).min(order.len())];
        let outcome = train_step(model, state, data, batch, opts, progress.step + 1)?;
        progress.step += 1;
        taken += 1;
        on_step(&outcome, model, state)?;
    }
    Ok(taken)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(&[1, 2, 3]);
        assert_eq!(a, derive_seed(&[1, 2, 3]));
        assert_ne!(a, derive_seed(&[1, 3, 2]));
        assert_ne!(a, derive_seed(&[1, 2, 4]));
    }

    #[test]
    fn epoch_order_is_permutation() {
        let mut o = epoch_order(50, 3, 1);
        assert_ne!(o, epoch_order(50, 3, 2));
        o.sort();
        assert_eq!(o, (0..50).collect::<Vec<_>>());
    }
}
