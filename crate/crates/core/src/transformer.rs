//! Pre-norm GPT-style decoder stack over already-embedded sequences.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Result, TensorError};
use crate::params::{normal_tensor, BoundParams, ParamId, ParamSet};
use crate::scalar::{from_usize, lit, Scalar};
use crate::tensor::Tensor;

/// Score written into disallowed attention pairs before the softmax.
pub const MASK_SCORE: f64 = -1e9;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;
/// Embedding tables and the video projection start wider than the weights.
pub const EMBED_INIT_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TensorError::Contract(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("n_layers, n_heads, d_model and d_ff must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return bad("vocab_size and max_seq_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Element count of the decoder parameters (token table, blocks, final norm):
    /// `V·d + n_layers·(4d² + 2·d·d_ff + d_ff + 5d) + 2d`.
    pub fn decoder_param_count(&self) -> usize {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        v * d + self.n_layers * (4 * d * d + 2 * d * f + f + 5 * d) + 2 * d
    }
}

/// L×L admissibility matrix; `true` means the row position may attend to the column.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    len: usize,
    allowed: Arc<[bool]>,
}

impl AttentionMask {
    pub fn causal(len: usize) -> Self {
        let allowed: Vec<bool> = (0..len * len).map(|k| k % len <= k / len).collect();
        AttentionMask { len, allowed: allowed.into() }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.len + j]
    }

    pub(crate) fn shared(&self) -> Arc<[bool]> {
        self.allowed.clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerIds {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub w_value: ParamId,
    pub w_out: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ff_in: ParamId,
    pub ff_in_bias: ParamId,
    pub ff_out: ParamId,
    pub ff_out_bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderIds {
    /// Shared input embedding and (tied) output projection.
    pub token_embedding: ParamId,
    pub layers: Vec<LayerIds>,
    pub lnf_gain: ParamId,
    pub lnf_bias: ParamId,
}

impl DecoderIds {
    pub fn register<T: Scalar>(params: &mut ParamSet<T>, cfg: &TransformerConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let token_embedding = params.push("tok_emb", normal_tensor(&[cfg.vocab_size, d], EMBED_INIT_STD, rng));
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let mut w = |name: &str, shape: &[usize]| {
                    params.push(&format!("h{l}.{name}"), normal_tensor(shape, INIT_STD, rng))
                };
                let w_query = w("attn.w_q", &[d, d]);
                let w_key = w("attn.w_k", &[d, d]);
                let w_value = w("attn.w_v", &[d, d]);
                let w_out = w("attn.w_o", &[d, d]);
                let ff_in = w("mlp.w_in", &[d, f]);
                let ff_out = w("mlp.w_out", &[f, d]);
                LayerIds {
                    w_query,
                    w_key,
                    w_value,
                    w_out,
                    ff_in,
                    ff_out,
                    ln1_gain: params.push(&format!("h{l}.ln1.g"), Tensor::filled(&[d], T::one())),
                    ln1_bias: params.push(&format!("h{l}.ln1.b"), Tensor::zeros(&[d])),
                    ln2_gain: params.push(&format!("h{l}.ln2.g"), Tensor::filled(&[d], T::one())),
                    ln2_bias: params.push(&format!("h{l}.ln2.b"), Tensor::zeros(&[d])),
                    ff_in_bias: params.push(&format!("h{l}.mlp.b_in"), Tensor::zeros(&[f])),
                    ff_out_bias: params.push(&format!("h{l}.mlp.b_out"), Tensor::zeros(&[d])),
                }
            })
            .collect();
        DecoderIds {
            token_embedding,
            layers,
            lnf_gain: params.push("ln_f.g", Tensor::filled(&[d], T::one())),
            lnf_bias: params.push("ln_f.b", Tensor::zeros(&[d])),
        }
    }
}

/// Per-forward dropout source. Rate zero records nothing on the tape.
#[derive(Debug)]
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Dropout { rate, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn apply<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let scale: T = lit(1.0 / (1.0 - self.rate));
        let keep = (0..tape.value(x).len())
            .map(|_| if self.rng.random::<f64>() < self.rate { T::zero() } else { scale })
            .collect();
        tape.dropout(x, keep)
    }
}

/// Attention output plus the per-head weight matrices (for inspection).
pub struct AttentionOutput {
    pub output: Var,
    pub head_weights: Vec<Var>,
}

/// Masked multi-head self-attention without projection biases.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    layer: &LayerIds,
    cfg: &TransformerConfig,
    x: Var,
    mask: &AttentionMask,
) -> Result<AttentionOutput> {
    let len = tape.value(x).rows();
    if len > cfg.max_seq_len {
        return Err(TensorError::Capacity { len, max: cfg.max_seq_len });
    }
    if mask.len() != len {
        return Err(TensorError::Shape {
            op: "attention mask",
            lhs: vec![len, len],
            rhs: vec![mask.len(), mask.len()],
        });
    }
    let dh = cfg.head_dim();
    let q = tape.matmul(x, bound.var(layer.w_query))?;
    let k = tape.matmul(x, bound.var(layer.w_key))?;
    let v = tape.matmul(x, bound.var(layer.w_value))?;
    let scale: T = T::one() / from_usize::<T>(dh).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut head_weights = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_bt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let scores = tape.mask_fill(scores, mask.shared(), lit(MASK_SCORE))?;
        let weights = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(weights, vh)?);
        head_weights.push(weights);
    }
    let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let output = tape.matmul(merged, bound.var(layer.w_out))?;
    Ok(AttentionOutput { output, head_weights })
}

/// LN → attention → residual → LN → GELU MLP → residual.
pub fn transformer_block<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    layer: &LayerIds,
    cfg: &TransformerConfig,
    x: Var,
    mask: &AttentionMask,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let eps: T = lit(LAYER_NORM_EPS);
    let h = tape.layer_norm(x, bound.var(layer.ln1_gain), bound.var(layer.ln1_bias), eps)?;
    let mut attn = multi_head_attention(tape, bound, layer, cfg, h, mask)?.output;
    if let Some(d) = dropout.as_deref_mut() {
        attn = d.apply(tape, attn)?;
    }
    let x = tape.add(x, attn)?;
    let h = tape.layer_norm(x, bound.var(layer.ln2_gain), bound.var(layer.ln2_bias), eps)?;
    let h = tape.matmul(h, bound.var(layer.ff_in))?;
    let h = tape.add_row(h, bound.var(layer.ff_in_bias))?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, bound.var(layer.ff_out))?;
    let mut h = tape.add_row(h, bound.var(layer.ff_out_bias))?;
    if let Some(d) = dropout {
        h = d.apply(tape, h)?;
    }
    tape.add(x, h)
}

/// Runs every block and the final layer norm; returns hidden states (L×d).
pub fn decode<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    ids: &DecoderIds,
    cfg: &TransformerConfig,
    embeddings: Var,
    mask: &AttentionMask,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let len = tape.value(embeddings).rows();
    if len > cfg.max_seq_len {
        return Err(TensorError::Capacity { len, max: cfg.max_seq_len });
    }
    let mut x = embeddings;
    if let Some(d) = dropout.as_deref_mut() {
        x = d.apply(tape, x)?;
    }
    for layer in &ids.layers {
        x = transformer_block(tape, bound, layer, cfg, x, mask, dropout.as_deref_mut())?;
    }
    tape.layer_norm(x, bound.var(ids.lnf_gain), bound.var(ids.lnf_bias), lit(LAYER_NORM_EPS))
}

/// Vocabulary logits through the tied token embedding: `hidden · Eᵀ`.
pub fn logits<T: Scalar>(tape: &mut Tape<T>, bound: &BoundParams, ids: &DecoderIds, hidden: Var) -> Result<Var> {
    tape.matmul_bt(hidden, bound.var(ids.token_embedding))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(layers: usize, heads: usize, d: usize) -> TransformerConfig {
        TransformerConfig {
            n_layers: layers,
            n_heads: heads,
            d_model: d,
            d_ff: 2 * d,
            vocab_size: 7,
            max_seq_len: 16,
            dropout: 0.1,
        }
    }

    fn setup(c: &TransformerConfig, seed: u64) -> (ParamSet<f64>, DecoderIds) {
        let mut p = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = DecoderIds::register(&mut p, c, &mut rng);
        (p, ids)
    }

    fn random_input(tape: &mut Tape<f64>, len: usize, d: usize, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        tape.constant(normal_tensor(&[len, d], 1.0, &mut rng))
    }

    #[test]
    fn causal_mask_shape() {
        let m = AttentionMask::causal(4);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.allows(i, j), j <= i);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(2, 4, 8).validate().is_ok());
        assert!(cfg(2, 3, 8).validate().is_err());
        let mut c = cfg(1, 1, 4);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn param_count_formula_matches_allocation() {
        for (l, h, d) in [(1, 1, 4), (2, 4, 8), (3, 2, 6)] {
            let c = cfg(l, h, d);
            let (p, _) = setup(&c, 1);
            assert_eq!(p.element_count(), c.decoder_param_count());
        }
    }

    #[test]
    fn single_position_attention_is_value_then_output_projection() {
        let c = cfg(1, 2, 4);
        let (p, ids) = setup(&c, 3);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let x = random_input(&mut tape, 1, 4, 9);
        let out = multi_head_attention(&mut tape, &b, &ids.layers[0], &c, x, &AttentionMask::causal(1)).unwrap();
        let xv = tape.value(x).clone();
        let expect = xv.matmul(p.get(ids.layers[0].w_value)).unwrap().matmul(p.get(ids.layers[0].w_out)).unwrap();
        assert_eq!(tape.value(out.output), &expect);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let c = cfg(1, 2, 8);
        let (p, ids) = setup(&c, 4);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let x = random_input(&mut tape, 6, 8, 2);
        let out = multi_head_attention(&mut tape, &b, &ids.layers[0], &c, x, &AttentionMask::causal(6)).unwrap();
        for w in out.head_weights {
            for r in 0..6 {
                let row = tape.value(w).row(r);
                assert!(row.iter().all(|&x| x >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zeroed_block_outputs_make_block_identity() {
        let c = cfg(1, 2, 4);
        let (mut p, ids) = setup(&c, 5);
        let l = &ids.layers[0];
        for id in [l.w_out, l.ff_out, l.ff_out_bias] {
            p.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let x = random_input(&mut tape, 5, 4, 1);
        let y = transformer_block(&mut tape, &b, l, &c, x, &AttentionMask::causal(5), None).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn eval_mode_is_deterministic_and_shape_preserving() {
        let c = cfg(2, 2, 8);
        let (p, ids) = setup(&c, 6);
        let run = || {
            let mut tape = Tape::new();
            let b = p.bind(&mut tape);
            let x = random_input(&mut tape, 7, 8, 3);
            let y = transformer_block(&mut tape, &b, &ids.layers[0], &c, x, &AttentionMask::causal(7), None).unwrap();
            tape.value(y).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[7, 8]);
        assert_eq!(a, run());
    }

    #[test]
    fn capacity_error() {
        let c = cfg(1, 1, 4);
        let (p, ids) = setup(&c, 7);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let x = random_input(&mut tape, 17, 4, 1);
        let err = decode(&mut tape, &b, &ids, &c, x, &AttentionMask::causal(17), None).unwrap_err();
        assert_eq!(err, TensorError::Capacity { len: 17, max: 16 });
    }
}
