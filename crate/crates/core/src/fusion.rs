//! Early fusion of video regions and dialogue tokens into one embedded sequence.
//!
//! Layout of a fused sequence:
//!
//! ```text
//! [CLS] | f0r0 f0r1 .. f(F-1)r(P-1) | caption | u1 s1 .. u(t-1) s(t-1) u_t | response
//! ```
//!
//! Video rows are frame-major, region-minor. Each video row is the sum of its
//! projected feature and modality, temporal (frame) and position (region)
//! embeddings; each text row is the sum of token, modality, turn and
//! position embeddings. Text position ids restart at zero after the video.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::vocab::{CLS, EOS, MASK};
use crate::error::{Result, TensorError};
use crate::params::{normal_tensor, BoundParams, ParamId, ParamSet};
use crate::scalar::{from_usize, Scalar};
use crate::tensor::Tensor;
use crate::transformer::{AttentionMask, EMBED_INIT_STD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Cls = 0,
    Vis = 1,
    Cap = 2,
    Usr = 3,
    Sys = 4,
}

pub const MODALITY_COUNT: usize = 5;

/// Pretrained-style region features, shape `F × P × d_emb`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures<T> {
    grid: Tensor<T>,
}

impl<T: Scalar> VideoFeatures<T> {
    pub fn new(grid: Tensor<T>) -> Result<Self> {
        if grid.rank() != 3 {
            return Err(TensorError::Contract(format!("video grid must be F×P×d_emb, got {:?}", grid.shape())));
        }
        if !grid.is_finite() {
            return Err(TensorError::NonFinite { op: "video features" });
        }
        Ok(VideoFeatures { grid })
    }

    pub fn from_flat(frames: usize, regions: usize, d_emb: usize, data: Vec<T>) -> Result<Self> {
        Self::new(Tensor::new(vec![frames, regions, d_emb], data)?)
    }

    pub fn frames(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn regions(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn d_emb(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn grid(&self) -> &Tensor<T> {
        &self.grid
    }

    pub fn region(&self, frame: usize, region: usize) -> &[T] {
        self.grid.row(frame * self.regions() + region)
    }

    /// `(F·P) × d_emb`, frame-major.
    pub fn flattened(&self) -> Tensor<T> {
        let (n, d) = (self.frames() * self.regions(), self.d_emb());
        self.grid.clone().reshape(vec![n, d]).expect("same element count")
    }
}

/// Mean over the region axis: `F × 1 × d_emb`.
pub fn pool_spatial<T: Scalar>(video: &VideoFeatures<T>) -> VideoFeatures<T> {
    let (f, p, d) = (video.frames(), video.regions(), video.d_emb());
    let n: T = from_usize(p);
    let mut out = Vec::with_capacity(f * d);
    for fr in 0..f {
        for k in 0..d {
            let s = (0..p).fold(T::zero(), |s, r| s + video.region(fr, r)[k]);
            out.push(s / n);
        }
    }
    VideoFeatures::from_flat(f, 1, d, out).expect("pooled shape is valid")
}

/// Mean over the frame axis: `1 × P × d_emb`.
pub fn pool_temporal<T: Scalar>(video: &VideoFeatures<T>) -> VideoFeatures<T> {
    let (f, p, d) = (video.frames(), video.regions(), video.d_emb());
    let n: T = from_usize(f);
    let mut out = Vec::with_capacity(p * d);
    for r in 0..p {
        for k in 0..d {
            let s = (0..f).fold(T::zero(), |s, fr| s + video.region(fr, r)[k]);
            out.push(s / n);
        }
    }
    VideoFeatures::from_flat(1, p, d, out).expect("pooled shape is valid")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Turn {
    pub user: Vec<usize>,
    pub system: Vec<usize>,
}

/// One training or evaluation example: caption, completed turns, the current
/// user utterance, and the system response to produce.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogueInstance {
    pub id: String,
    pub caption: Vec<usize>,
    pub history: Vec<Turn>,
    pub question: Vec<usize>,
    /// Target response, ending with `[EOS]`.
    pub target: Vec<usize>,
    /// Reference responses for evaluation, without `[EOS]`.
    pub references: Vec<Vec<usize>>,
}

impl DialogueInstance {
    /// 1-based number of the current turn.
    pub fn current_turn(&self) -> usize {
        self.history.len() + 1
    }

    pub fn history_len(&self) -> usize {
        self.history.iter().map(|t| t.user.len() + t.system.len()).sum::<usize>() + self.question.len()
    }

    fn all_tokens(&self) -> impl Iterator<Item = usize> + '_ {
        self.caption
            .iter()
            .chain(self.history.iter().flat_map(|t| t.user.iter().chain(&t.system)))
            .chain(&self.question)
            .chain(&self.target)
            .copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct SegmentMetadata {
    pub modality: Vec<Modality>,
    /// Frame index for video positions, turn number for text positions.
    pub group: Vec<usize>,
    /// Region index for video positions, offset within the text segment for text.
    pub position: Vec<usize>,
}

impl SegmentMetadata {
    pub fn len(&self) -> usize {
        self.modality.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modality.is_empty()
    }

    fn push(&mut self, m: Modality, group: usize, position: usize) {
        self.modality.push(m);
        self.group.push(group);
        self.position.push(position);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub d_emb: usize,
    pub max_frames: usize,
    pub max_regions: usize,
    pub max_turns: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { d_emb: 32, max_frames: 8, max_regions: 16, max_turns: 10 }
    }
}

impl FusionConfig {
    /// `(MOD + F_max + P_max + T_max + 1 + S_max)·d + d_emb·d`.
    pub fn param_count(&self, d_model: usize, max_seq_len: usize) -> usize {
        (MODALITY_COUNT + self.max_frames + self.max_regions + self.max_turns + 1 + max_seq_len) * d_model
            + self.d_emb * d_model
    }
}

/// Encoder tables. The token table lives with the decoder (it is tied to the output).
#[derive(Clone, Debug, PartialEq)]
pub struct FusionIds {
    pub modality: ParamId,
    pub temporal: ParamId,
    pub video_position: ParamId,
    pub turn: ParamId,
    pub text_position: ParamId,
    pub w_video: ParamId,
}

impl FusionIds {
    pub fn register<T: Scalar>(
        params: &mut ParamSet<T>,
        cfg: &FusionConfig,
        d_model: usize,
        max_seq_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut table =
            |name: &str, rows: usize| params.push(name, normal_tensor(&[rows, d_model], EMBED_INIT_STD, rng));
        let modality = table("enc.modality", MODALITY_COUNT);
        let temporal = table("enc.video_temporal", cfg.max_frames);
        let video_position = table("enc.video_position", cfg.max_regions);
        let turn = table("enc.text_turn", cfg.max_turns + 1);
        let text_position = table("enc.text_position", max_seq_len);
        let w_video = params.push("enc.w_video", normal_tensor(&[cfg.d_emb, d_model], EMBED_INIT_STD, rng));
        FusionIds { modality, temporal, video_position, turn, text_position, w_video }
    }
}

/// `ReLU(Z · W_V)` over the frame-major `(F·P) × d_emb` region matrix.
pub fn project_video<T: Scalar>(tape: &mut Tape<T>, bound: &BoundParams, ids: &FusionIds, regions: Var) -> Result<Var> {
    let z = tape.matmul(regions, bound.var(ids.w_video))?;
    Ok(tape.relu(z))
}

/// Untaped `ReLU(Z · W_V)`; bitwise equal to [`project_video`].
pub fn project_video_values<T: Scalar>(regions: &Tensor<T>, w_video: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(regions.matmul(w_video)?.map(|x| if x > T::zero() { x } else { T::zero() }))
}

/// `spatial + mod[vis] + temporal[r ÷ P] + pos[r mod P]`, summed left to right.
pub fn encode_video<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    ids: &FusionIds,
    spatial: Var,
    frames: usize,
    regions: usize,
) -> Result<Var> {
    let n = frames * regions;
    if tape.value(spatial).rows() != n {
        return Err(TensorError::Shape { op: "encode_video", lhs: tape.value(spatial).shape().to_vec(), rhs: vec![n] });
    }
    let modality = tape.embed(bound.var(ids.modality), &vec![Modality::Vis as usize; n])?;
    let temporal_ids: Vec<usize> = (0..n).map(|r| r / regions).collect();
    let position_ids: Vec<usize> = (0..n).map(|r| r % regions).collect();
    let temporal = tape.embed(bound.var(ids.temporal), &temporal_ids)?;
    let position = tape.embed(bound.var(ids.video_position), &position_ids)?;
    tape.add_all(&[spatial, modality, temporal, position])
}

/// Token ids and per-position metadata of the text segment.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TextLayout {
    pub tokens: Vec<usize>,
    pub modality: Vec<Modality>,
    pub turn: Vec<usize>,
    pub position: Vec<usize>,
}

impl TextLayout {
    fn push_segment(&mut self, tokens: &[usize], m: Modality, turn: usize) {
        for &t in tokens {
            self.position.push(self.tokens.len());
            self.tokens.push(t);
            self.modality.push(m);
            self.turn.push(turn);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Caption (turn 0), then each completed turn's user and system utterance,
/// then the current question and `response` (both carrying turn `t`).
pub fn text_layout(instance: &DialogueInstance, response: &[usize]) -> TextLayout {
    let mut t = TextLayout::default();
    t.push_segment(&instance.caption, Modality::Cap, 0);
    for (k, turn) in instance.history.iter().enumerate() {
        t.push_segment(&turn.user, Modality::Usr, k + 1);
        t.push_segment(&turn.system, Modality::Sys, k + 1);
    }
    let current = instance.current_turn();
    t.push_segment(&instance.question, Modality::Usr, current);
    t.push_segment(response, Modality::Sys, current);
    t
}

/// `token + modality + turn + position`, summed left to right.
pub fn encode_text<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    token_table: ParamId,
    ids: &FusionIds,
    text: &TextLayout,
) -> Result<Var> {
    let modality: Vec<usize> = text.modality.iter().map(|&m| m as usize).collect();
    let token = tape.embed(bound.var(token_table), &text.tokens)?;
    let modality = tape.embed(bound.var(ids.modality), &modality)?;
    let turn = tape.embed(bound.var(ids.turn), &text.turn)?;
    let position = tape.embed(bound.var(ids.text_position), &text.position)?;
    tape.add_all(&[token, modality, turn, position])
}

/// Whether the response segment is the full teacher-forced target or a decoding prefix.
#[derive(Clone, Copy, Debug)]
pub enum ResponseInput<'a> {
    Teacher,
    Prefix(&'a [usize]),
}

/// Everything needed to embed and score one fused sequence, minus the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedLayout<T> {
    /// Region features, `(F·P) × d_emb`.
    pub video: Tensor<T>,
    pub frames: usize,
    pub regions: usize,
    /// Video rows whose projected feature is replaced by the `[MASK]` embedding.
    pub masked_regions: Vec<usize>,
    pub text: TextLayout,
    pub metadata: SegmentMetadata,
    /// Next-token targets for the response, indexed by absolute position.
    pub gen_labels: Vec<Option<usize>>,
    /// Original tokens at masked text positions.
    pub mlm_labels: Vec<Option<usize>>,
    /// True when video and dialogue belong together.
    pub mvt_label: bool,
    pub mask: AttentionMask,
    /// Absolute index of the first response token.
    pub response_start: usize,
}

impl<T: Scalar> FusedLayout<T> {
    pub fn len(&self) -> usize {
        self.metadata.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metadata.is_empty()
    }

    pub fn video_len(&self) -> usize {
        self.frames * self.regions
    }

    /// Absolute index of the first text position.
    pub fn text_start(&self) -> usize {
        1 + self.video_len()
    }

    /// Generation and masked-token targets merged into one per-position array.
    pub fn labels(&self) -> Vec<Option<usize>> {
        self.gen_labels.iter().zip(&self.mlm_labels).map(|(g, m)| g.or(*m)).collect()
    }

    pub fn gen_positions(&self) -> Vec<usize> {
        positions(&self.gen_labels)
    }

    pub fn mlm_positions(&self) -> Vec<usize> {
        positions(&self.mlm_labels)
    }

    /// Text positions eligible for token masking: caption and dialogue history,
    /// excluding the last position before the response (it predicts the first
    /// response token).
    pub fn token_mask_candidates(&self) -> Vec<usize> {
        let start = self.text_start();
        (start..self.response_start.saturating_sub(1))
            .filter(|&p| !matches!(self.text.tokens[p - start], CLS | EOS | MASK))
            .collect()
    }
}

fn positions(labels: &[Option<usize>]) -> Vec<usize> {
    labels.iter().enumerate().filter_map(|(i, l)| l.map(|_| i)).collect()
}

/// Lays out `[CLS] ⊕ video ⊕ text` and attaches labels. Checks every id and the capacity.
pub fn build_layout<T: Scalar>(
    instance: &DialogueInstance,
    video: &VideoFeatures<T>,
    response: ResponseInput<'_>,
    cfg: &crate::model::ModelConfig,
) -> Result<FusedLayout<T>> {
    let fc = &cfg.fusion;
    let tc = &cfg.transformer;
    if video.d_emb() != fc.d_emb {
        return Err(TensorError::Shape {
            op: "project_video",
            lhs: video.grid().shape().to_vec(),
            rhs: vec![fc.d_emb, tc.d_model],
        });
    }
    if video.frames() > fc.max_frames {
        return Err(TensorError::Index { what: "frame", index: video.frames() - 1, bound: fc.max_frames });
    }
    if video.regions() > fc.max_regions {
        return Err(TensorError::Index { what: "region", index: video.regions() - 1, bound: fc.max_regions });
    }
    if instance.current_turn() > fc.max_turns {
        return Err(TensorError::Index { what: "turn", index: instance.current_turn(), bound: fc.max_turns + 1 });
    }
    if let Some(bad) = instance.all_tokens().chain(instance_prefix(response)).find(|&t| t >= tc.vocab_size) {
        return Err(TensorError::Index { what: "token", index: bad, bound: tc.vocab_size });
    }
    let resp: &[usize] = match response {
        ResponseInput::Teacher => {
            if instance.target.is_empty() {
                return Err(TensorError::Contract(format!("instance {} has an empty target", instance.id)));
            }
            &instance.target
        }
        ResponseInput::Prefix(p) => p,
    };
    let text = text_layout(instance, resp);
    let (frames, regions) = (video.frames(), video.regions());
    let len = 1 + frames * regions + text.len();
    if len > tc.max_seq_len {
        return Err(TensorError::Capacity { len, max: tc.max_seq_len });
    }

    let mut metadata = SegmentMetadata::default();
    metadata.push(Modality::Cls, 0, 0);
    for f in 0..frames {
        for p in 0..regions {
            metadata.push(Modality::Vis, f, p);
        }
    }
    for i in 0..text.len() {
        metadata.push(text.modality[i], text.turn[i], text.position[i]);
    }

    let response_start = len - resp.len();
    let mut gen_labels = vec![None; len];
    if let ResponseInput::Teacher = response {
        for (k, &y) in resp.iter().enumerate() {
            gen_labels[response_start - 1 + k] = Some(y);
        }
    }
    Ok(FusedLayout {
        video: video.flattened(),
        frames,
        regions,
        masked_regions: Vec::new(),
        text,
        metadata,
        gen_labels,
        mlm_labels: vec![None; len],
        mvt_label: true,
        mask: AttentionMask::causal(len),
        response_start,
    })
}

fn instance_prefix(response: ResponseInput<'_>) -> impl Iterator<Item = usize> + '_ {
    let p: &[usize] = match response {
        ResponseInput::Teacher => &[],
        ResponseInput::Prefix(p) => p,
    };
    p.iter().copied()
}

/// Embeds a layout on `tape`, returning `Z_VT` (L×d).
pub fn embed_layout<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    token_table: ParamId,
    ids: &FusionIds,
    layout: &FusedLayout<T>,
) -> Result<Var> {
    let cls_token = tape.embed(bound.var(token_table), &[CLS])?;
    let cls_mod = tape.embed(bound.var(ids.modality), &[Modality::Cls as usize])?;
    let cls = tape.add(cls_token, cls_mod)?;

    let regions = tape.constant(layout.video.clone());
    let mut spatial = project_video(tape, bound, ids, regions)?;
    if !layout.masked_regions.is_empty() {
        let mask_rows = tape.embed(bound.var(token_table), &vec![MASK; layout.masked_regions.len()])?;
        spatial = tape.replace_rows(spatial, mask_rows, &layout.masked_regions)?;
    }
    let video = encode_video(tape, bound, ids, spatial, layout.frames, layout.regions)?;
    let text = encode_text(tape, bound, token_table, ids, &layout.text)?;
    tape.concat_rows(&[cls, video, text])
}

/// A layout together with its embedded sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedBatch<T> {
    pub layout: FusedLayout<T>,
    pub embeddings: Tensor<T>,
}

/// Builds the fused, embedded, teacher-forced sequence for one instance.
pub fn build_fused<T: Scalar>(
    instance: &DialogueInstance,
    video: &VideoFeatures<T>,
    model: &crate::model::Model<T>,
) -> Result<FusedBatch<T>> {
    let layout = build_layout(instance, video, ResponseInput::Teacher, &model.config)?;
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let z = embed_layout(&mut tape, &bound, model.ids.decoder.token_embedding, &model.ids.fusion, &layout)?;
    Ok(FusedBatch { embeddings: tape.value(z).clone(), layout })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(f: usize, p: usize, d: usize, fill: impl Fn(usize, usize, usize) -> f64) -> VideoFeatures<f64> {
        let mut data = Vec::new();
        for a in 0..f {
            for b in 0..p {
                for c in 0..d {
                    data.push(fill(a, b, c));
                }
            }
        }
        VideoFeatures::from_flat(f, p, d, data).unwrap()
    }

    #[test]
    fn pooling_shapes_and_values() {
        let v = video(2, 2, 1, |_, p, _| if p == 0 { 1.0 } else { 3.0 });
        let s = pool_spatial(&v);
        assert_eq!(s.grid().shape(), &[2, 1, 1]);
        assert_eq!(s.grid().data(), &[2.0, 2.0]);
        let v = video(2, 3, 1, |f, _, _| if f == 0 { 0.0 } else { 4.0 });
        let t = pool_temporal(&v);
        assert_eq!(t.grid().shape(), &[1, 3, 1]);
        assert_eq!(t.grid().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn pooling_constant_grid() {
        let v = video(3, 4, 2, |_, _, _| 0.7);
        assert!(pool_spatial(&v).grid().data().iter().all(|&x| (x - 0.7).abs() < 1e-12));
        assert!(pool_temporal(&v).grid().data().iter().all(|&x| (x - 0.7).abs() < 1e-12));
    }

    #[test]
    fn flatten_is_frame_major() {
        let v = video(2, 3, 1, |f, p, _| (10 * f + p) as f64);
        assert_eq!(v.flattened().data(), &[0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
    }

    #[test]
    fn text_layout_turns_and_modalities() {
        let inst = DialogueInstance {
            id: "x".into(),
            caption: vec![5, 6],
            history: vec![Turn { user: vec![7], system: vec![8, 9] }],
            question: vec![10],
            target: vec![11, EOS],
            references: vec![],
        };
        let t = text_layout(&inst, &inst.target);
        use Modality::*;
        assert_eq!(t.modality, vec![Cap, Cap, Usr, Sys, Sys, Usr, Sys, Sys]);
        assert_eq!(t.turn, vec![0, 0, 1, 1, 1, 2, 2, 2]);
        assert_eq!(t.position, (0..8).collect::<Vec<_>>());
    }
}
