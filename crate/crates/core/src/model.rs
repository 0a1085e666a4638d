//! The full parameter set: decoder, fusion encoders and objective heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::fusion::{embed_layout, FusedLayout, FusionConfig, FusionIds};
use crate::objectives::HeadIds;
use crate::params::{BoundParams, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transformer::{decode, logits, DecoderIds, Dropout, TransformerConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub transformer: TransformerConfig,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        let f = &self.fusion;
        if f.d_emb == 0 || f.max_frames == 0 || f.max_regions == 0 || f.max_turns == 0 {
            return Err(crate::TensorError::Contract("fusion extents must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form element count of [`Model::init`]'s parameters.
    pub fn param_count(&self) -> usize {
        let t = &self.transformer;
        t.decoder_param_count() + self.fusion.param_count(t.d_model, t.max_seq_len) + HeadIds::param_count(t.d_model)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelIds {
    pub decoder: DecoderIds,
    pub fusion: FusionIds,
    pub heads: HeadIds,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub ids: ModelIds,
}

impl<T: Scalar> Model<T> {
    /// Normal(0, 0.02) weights, Normal(0, 0.1) embedding tables and video
    /// projection, zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let t = &config.transformer;
        let decoder = DecoderIds::register(&mut params, t, &mut rng);
        let fusion = FusionIds::register(&mut params, &config.fusion, t.d_model, t.max_seq_len, &mut rng);
        let heads = HeadIds::register(&mut params, t.d_model, &mut rng);
        Ok(Model { config, params, ids: ModelIds { decoder, fusion, heads } })
    }

    /// Rebuilds handles for a parameter set laid out by [`Model::init`] (e.g. from a checkpoint).
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        let reference = Model::<T>::init(config.clone(), 0)?;
        if reference.params.names() != params.names() {
            return Err(crate::TensorError::Contract("parameter names do not match the model layout".into()));
        }
        for i in 0..params.len() {
            if reference.params.tensor(i).shape() != params.tensor(i).shape() {
                return Err(crate::TensorError::Shape {
                    op: "from_params",
                    lhs: reference.params.tensor(i).shape().to_vec(),
                    rhs: params.tensor(i).shape().to_vec(),
                });
            }
        }
        Ok(Model { config, params, ids: reference.ids })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast(), ids: self.ids.clone() }
    }

    /// Embeds and decodes `layout` on `tape`; returns the final hidden states.
    pub fn hidden_on_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        layout: &FusedLayout<T>,
        dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let z = embed_layout(tape, bound, self.ids.decoder.token_embedding, &self.ids.fusion, layout)?;
        decode(tape, bound, &self.ids.decoder, &self.config.transformer, z, &layout.mask, dropout)
    }

    /// Hidden states (L×d) and vocabulary logits (L×V) for one fused sequence.
    pub fn forward(&self, layout: &FusedLayout<T>, dropout: Option<&mut Dropout>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let h = self.hidden_on_tape(&mut tape, &bound, layout, dropout)?;
        let l = logits(&mut tape, &bound, &self.ids.decoder, h)?;
        Ok((tape.value(h).clone(), tape.value(l).clone()))
    }

    /// Logits of the final position only.
    pub fn last_logits(&self, layout: &FusedLayout<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let h = self.hidden_on_tape(&mut tape, &bound, layout, None)?;
        let last = tape.value(h).rows() - 1;
        let row = tape.select_rows(h, &[last])?;
        let l = logits(&mut tape, &bound, &self.ids.decoder, row)?;
        Ok(tape.value(l).data().to_vec())
    }
}
