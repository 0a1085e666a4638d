//! Multi-task fine-tuning objectives: masking samplers, pair corruption, the
//! four losses, their weighted combination and the learning-rate schedule.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::vocab::MASK;
use crate::error::{Result, TensorError};
use crate::fusion::{project_video_values, FusedLayout};
use crate::model::Model;
use crate::params::{normal_tensor, BoundParams, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transformer::INIT_STD;

/// Peak learning rate found by grid search for pretrained-model fine-tuning.
pub const FINETUNE_PEAK_LR: f64 = 5e-5;
pub const MASK_RATE: f64 = 0.15;
pub const CORRUPT_RATE: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Objective {
    Gen,
    Mlm,
    Mvm,
    Mvt,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::Gen, Objective::Mlm, Objective::Mvm, Objective::Mvt];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Gen => "gen",
            Objective::Mlm => "mlm",
            Objective::Mvm => "mvm",
            Objective::Mvt => "mvt",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == s)
    }
}

/// Per-objective values in the fixed order gen, mlm, mvm, mvt.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct PerObjective<V> {
    pub gen: V,
    pub mlm: V,
    pub mvm: V,
    pub mvt: V,
}

impl<V: Copy> PerObjective<V> {
    pub fn get(&self, o: Objective) -> V {
        match o {
            Objective::Gen => self.gen,
            Objective::Mlm => self.mlm,
            Objective::Mvm => self.mvm,
            Objective::Mvt => self.mvt,
        }
    }

    pub fn set(&mut self, o: Objective, v: V) {
        match o {
            Objective::Gen => self.gen = v,
            Objective::Mlm => self.mlm = v,
            Objective::Mvm => self.mvm = v,
            Objective::Mvt => self.mvt = v,
        }
    }
}

pub type ObjectiveSet = PerObjective<bool>;
pub type LossWeights = PerObjective<f64>;

impl ObjectiveSet {
    pub fn all() -> Self {
        PerObjective { gen: true, mlm: true, mvm: true, mvt: true }
    }

    pub fn only(o: Objective) -> Self {
        let mut s = PerObjective::default();
        s.set(o, true);
        s
    }

    pub fn names(&self) -> Vec<&'static str> {
        Objective::ALL.into_iter().filter(|&o| self.get(o)).map(Objective::name).collect()
    }
}

impl LossWeights {
    /// Generation weighted 1.5× the auxiliary objectives.
    pub fn standard() -> Self {
        PerObjective { gen: 1.5, mlm: 1.0, mvm: 1.0, mvt: 1.0 }
    }
}

/// Per-objective losses; `None` marks an inactive objective.
pub type LossParts = PerObjective<Option<f64>>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub parts: LossParts,
    pub weights: LossWeights,
    pub combined: f64,
}

/// Weighted sum over active objectives, accumulated in gen, mlm, mvm, mvt order.
pub fn combine(parts: LossParts, weights: LossWeights) -> Result<LossBundle> {
    let mut combined = 0.0;
    let mut active = 0;
    for o in Objective::ALL {
        if let Some(v) = parts.get(o) {
            combined += weights.get(o) * v;
            active += 1;
        }
    }
    if active == 0 {
        return Err(TensorError::Contract("no active objective to combine".into()));
    }
    Ok(LossBundle { parts, weights, combined })
}

/// Linear warmup to `peak`, then inverse-square-root decay:
/// `peak · min(step / warmup, √(warmup / step))`.
pub fn lr_schedule(step: u64, peak: f64, warmup_steps: u64) -> Result<f64> {
    if step == 0 {
        return Err(TensorError::Contract("lr_schedule step must be >= 1".into()));
    }
    if warmup_steps == 0 {
        return Err(TensorError::Contract("warmup_steps must be >= 1".into()));
    }
    let (s, w) = (step as f64, warmup_steps as f64);
    Ok(peak * (s / w).min((w / s).sqrt()))
}

/// Output heads for masked region modeling and video/text matching.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadIds {
    /// Projects a hidden state into the region-regression space.
    pub mvm_out: ParamId,
    /// Projects the original region feature into the same space; never trained.
    pub mvm_target: ParamId,
    pub mvt_weight: ParamId,
    pub mvt_bias: ParamId,
}

impl HeadIds {
    pub fn register<T: Scalar>(params: &mut ParamSet<T>, d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        HeadIds {
            mvm_out: params.push("head.mvm_out", normal_tensor(&[d_model, d_model], INIT_STD, rng)),
            mvm_target: params.push_frozen("head.mvm_target", normal_tensor(&[d_model, d_model], INIT_STD, rng)),
            mvt_weight: params.push("head.mvt_w", normal_tensor(&[d_model, 1], INIT_STD, rng)),
            mvt_bias: params.push("head.mvt_b", Tensor::zeros(&[1])),
        }
    }

    pub fn param_count(d_model: usize) -> usize {
        2 * d_model * d_model + d_model + 1
    }
}

/// Positions chosen for masking in one instance.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct MaskingPlan {
    /// Absolute text positions replaced by `[MASK]`.
    pub token_positions: Vec<usize>,
    /// Original ids at `token_positions`.
    pub original_tokens: Vec<usize>,
    /// Video row indices (0-based within the video segment) replaced by `[MASK]`.
    pub region_positions: Vec<usize>,
    /// Token masking was requested but the instance had no eligible position.
    pub tokens_skipped: bool,
    pub regions_skipped: bool,
}

/// Independent Bernoulli(`rate`) selection over `0..n`; if nothing is picked,
/// one index is forced uniformly at random. Empty when `n == 0`.
pub fn bernoulli_select(n: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let picked: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < rate).collect();
    if picked.is_empty() {
        vec![rng.random_range(0..n)]
    } else {
        picked
    }
}

/// Samples token and region masks for a layout. Token masking covers caption
/// and history (never the response); region masking covers every video row.
pub fn sample_masks<T: Scalar>(
    layout: &FusedLayout<T>,
    rate: f64,
    mask_tokens: bool,
    mask_regions: bool,
    rng: &mut ChaCha8Rng,
) -> Result<MaskingPlan> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(TensorError::Contract(format!("mask rate {rate} outside (0, 1)")));
    }
    let mut plan = MaskingPlan::default();
    if mask_tokens {
        let candidates = layout.token_mask_candidates();
        plan.tokens_skipped = candidates.is_empty();
        let start = layout.text_start();
        for k in bernoulli_select(candidates.len(), rate, rng) {
            let p = candidates[k];
            plan.token_positions.push(p);
            plan.original_tokens.push(layout.text.tokens[p - start]);
        }
    }
    if mask_regions {
        let n = layout.video_len();
        plan.regions_skipped = n == 0;
        plan.region_positions = bernoulli_select(n, rate, rng);
    }
    Ok(plan)
}

/// Writes `[MASK]` into the layout and records reconstruction targets.
pub fn apply_plan<T: Scalar>(layout: &mut FusedLayout<T>, plan: &MaskingPlan) {
    let start = layout.text_start();
    for (&p, &orig) in plan.token_positions.iter().zip(&plan.original_tokens) {
        layout.text.tokens[p - start] = MASK;
        layout.mlm_labels[p] = Some(orig);
    }
    layout.masked_regions = plan.region_positions.clone();
}

/// Where an instance's inputs come from for the matching objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairSource {
    Matched,
    /// Video taken from the given instance (of a different group).
    SwappedVideo(usize),
    /// Dialogue taken from the given instance (of a different group).
    SwappedDialogue(usize),
}

impl PairSource {
    pub fn is_matched(self) -> bool {
        matches!(self, PairSource::Matched)
    }
}

/// Selects about `rate` of `batch` for corruption. `group_of[i]` identifies the
/// video behind pool instance `i`; replacements always come from a different
/// group. With fewer than two groups corruption is disabled.
pub fn corrupt_pair(batch: &[usize], group_of: &[usize], rate: f64, rng: &mut ChaCha8Rng) -> Vec<PairSource> {
    let first = group_of.first().copied();
    let distinct = group_of.iter().any(|&g| Some(g) != first);
    if rate <= 0.0 || !distinct {
        if rate > 0.0 {
            log::warn!("video/text corruption disabled: pool has fewer than two distinct videos");
        }
        return vec![PairSource::Matched; batch.len()];
    }
    batch
        .iter()
        .map(|&i| {
            if rng.random::<f64>() >= rate {
                return PairSource::Matched;
            }
            let swap_video = rng.random::<bool>();
            let j = loop {
                let j = rng.random_range(0..group_of.len());
                if group_of[j] != group_of[i] {
                    break j;
                }
            };
            if swap_video {
                PairSource::SwappedVideo(j)
            } else {
                PairSource::SwappedDialogue(j)
            }
        })
        .collect()
}

/// Response cross-entropy; `None` when no position is labeled.
pub fn generation_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[Option<usize>]) -> Result<Option<Var>> {
    if labels.iter().all(Option::is_none) {
        return Ok(None);
    }
    tape.cross_entropy(logits, labels).map(Some)
}

/// Cross-entropy of original ids at masked positions; `None` for an empty plan.
pub fn mlm_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, mlm_labels: &[Option<usize>]) -> Result<Option<Var>> {
    if mlm_labels.iter().all(Option::is_none) {
        return Ok(None);
    }
    tape.cross_entropy(logits, mlm_labels).map(Some)
}

/// Regression targets for masked regions: `ReLU(z · W_V) · W_target`, computed
/// outside any tape so no gradient reaches the target branch.
pub fn mvm_targets<T: Scalar>(model: &Model<T>, layout: &FusedLayout<T>) -> Result<Option<Tensor<T>>> {
    if layout.masked_regions.is_empty() {
        return Ok(None);
    }
    let d = layout.video.cols();
    let mut rows = Vec::with_capacity(layout.masked_regions.len() * d);
    for &r in &layout.masked_regions {
        rows.extend_from_slice(layout.video.row(r));
    }
    let raw = Tensor::new(vec![layout.masked_regions.len(), d], rows)?;
    let spatial = project_video_values(&raw, model.params.get(model.ids.fusion.w_video))?;
    Ok(Some(spatial.matmul(model.params.get(model.ids.heads.mvm_target))?))
}

/// L1 between projected hidden states at masked regions and fixed targets.
pub fn mvm_loss<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    heads: &HeadIds,
    hidden_rows: Var,
    targets: &Tensor<T>,
) -> Result<Var> {
    let pred = tape.matmul(hidden_rows, bound.var(heads.mvm_out))?;
    let target = tape.constant(targets.clone());
    tape.l1_loss(pred, target)
}

/// Binary cross-entropy of the matching classifier on one hidden row.
pub fn mvt_loss<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    heads: &HeadIds,
    hidden_row: Var,
    matched: bool,
) -> Result<Var> {
    let z = tape.matmul(hidden_row, bound.var(heads.mvt_weight))?;
    let z = tape.add_row(z, bound.var(heads.mvt_bias))?;
    tape.bce_with_logits(z, if matched { T::one() } else { T::zero() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn combine_examples() {
        let w = LossWeights::standard();
        let all = PerObjective { gen: Some(2.0), mlm: Some(1.0), mvm: Some(1.0), mvt: Some(1.0) };
        assert_eq!(combine(all, w).unwrap().combined, 6.0);
        let gen_only = PerObjective { gen: Some(2.0), ..Default::default() };
        assert_eq!(combine(gen_only, w).unwrap().combined, 3.0);
        let zeros = PerObjective { gen: Some(0.0), mlm: Some(0.0), mvm: Some(0.0), mvt: Some(0.0) };
        assert_eq!(combine(zeros, w).unwrap().combined, 0.0);
        assert!(combine(PerObjective::default(), w).is_err());
    }

    #[test]
    fn schedule_points() {
        assert_eq!(lr_schedule(500, FINETUNE_PEAK_LR, 500).unwrap(), 5e-5);
        assert_eq!(lr_schedule(250, FINETUNE_PEAK_LR, 500).unwrap(), 2.5e-5);
        assert_eq!(lr_schedule(2000, FINETUNE_PEAK_LR, 500).unwrap(), 2.5e-5);
        assert!(lr_schedule(0, FINETUNE_PEAK_LR, 500).is_err());
        assert!(lr_schedule(1, FINETUNE_PEAK_LR, 0).is_err());
    }

    #[test]
    fn schedule_decreases_after_warmup() {
        let mut prev = lr_schedule(100, 1.0, 100).unwrap();
        for s in 101..400 {
            let lr = lr_schedule(s, 1.0, 100).unwrap();
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn forced_minimum_mask() {
        // rate tiny enough that no Bernoulli trial succeeds
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(bernoulli_select(3, 1e-12, &mut rng).len(), 1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(bernoulli_select(0, 0.5, &mut rng).is_empty());
    }

    #[test]
    fn corruption_rate_zero_and_distinct_source() {
        let groups: Vec<usize> = (0..40).map(|i| i / 4).collect();
        let batch: Vec<usize> = (0..40).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(corrupt_pair(&batch, &groups, 0.0, &mut rng).iter().all(|s| s.is_matched()));
        let out = corrupt_pair(&batch, &groups, 0.9, &mut rng);
        for (&i, s) in batch.iter().zip(&out) {
            match *s {
                PairSource::SwappedVideo(j) | PairSource::SwappedDialogue(j) => {
                    assert_ne!(groups[i], groups[j])
                }
                PairSource::Matched => {}
            }
        }
        assert!(out.iter().any(|s| !s.is_matched()));
    }

    #[test]
    fn singleton_pool_disables_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = corrupt_pair(&[0, 0], &[7], 1.0, &mut rng);
        assert!(out.iter().all(|s| s.is_matched()));
    }

    #[test]
    fn mvt_loss_symmetry_and_ln2() {
        let mut tape = Tape::<f64>::new();
        let mut p = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let heads = HeadIds::register(&mut p, 2, &mut rng);
        p.get_mut(heads.mvt_weight).data_mut().copy_from_slice(&[0.0, 0.0]);
        let b = p.bind(&mut tape);
        let h = tape.constant(Tensor::new(vec![1, 2], vec![0.3, -0.1]).unwrap());
        let l = mvt_loss(&mut tape, &b, &heads, h, true).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);

        let logit = 0.8;
        let mut t2 = Tape::<f64>::new();
        let x = t2.param(Tensor::scalar(logit));
        let y = t2.param(Tensor::scalar(-logit));
        let a = t2.bce_with_logits(x, 1.0).unwrap();
        let c = t2.bce_with_logits(y, 0.0).unwrap();
        assert!((t2.value(a).item() - t2.value(c).item()).abs() < 1e-15);
    }
}
