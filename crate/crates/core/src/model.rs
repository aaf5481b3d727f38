//! Tokeniser plus processor: the next-frame emulator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::FieldSchema;
use crate::error::{shape_err, Result};
use crate::metrics::NextFramePredictor;
use crate::params::{ParamSpec, ParamStore};
use crate::processor::{Processor, ProcessorConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokeniser::{denormalise, latent_dims, rms_scales, normalise_with, CompressionChoice, Tokeniser, TokeniserConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub tokeniser: TokeniserConfig,
    pub processor: ProcessorConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.tokeniser.validate()?;
        self.processor.validate()?;
        if self.tokeniser.latent_channels != self.processor.latent_dim {
            return Err(shape_err!(
                "tokeniser latent channels {} differ from processor latent dim {}",
                self.tokeniser.latent_channels,
                self.processor.latent_dim
            ));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<ParamSpec> {
        let mut v = crate::tokeniser::layout(&self.tokeniser);
        v.extend(crate::processor::layout(&self.processor));
        v
    }
}

pub struct Emulator<T: Scalar> {
    pub tokeniser: Tokeniser,
    pub processor: Processor,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Emulator<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let tokeniser = Tokeniser::new(cfg.tokeniser.clone())?;
        let processor = Processor::new(cfg.processor.clone())?;
        let mut params = ParamStore::new();
        tokeniser.init_params(&mut params, rng)?;
        processor.init_params(&mut params, rng)?;
        Ok(Self { tokeniser, processor, params })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig { tokeniser: self.tokeniser.cfg.clone(), processor: self.processor.cfg.clone() }
    }

    /// Full pipeline on a normalised `(B, C, T, H, W)` sequence; output has
    /// the same shape and position `t` predicts frame `t + 1`.
    pub fn forward_sequence(
        &self,
        g: &mut Graph<T>,
        x: Var,
        choice: &CompressionChoice,
        active: &[usize],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let s = &self.params;
        let z = self.tokeniser.encode(g, s, x, choice, active)?;
        let tok = self.processor.project_in(g, s, z)?;
        let tok = self.processor.forward(g, s, tok, rng)?;
        let z = self.processor.project_out(g, s, tok)?;
        self.tokeniser.decode(g, s, z, choice, active)
    }

    /// Normalised next-frame prediction `(B, C, 1, H, W)` from a normalised
    /// context: the decoded output at the final temporal position.
    pub fn predict_next_frame_var(
        &self,
        g: &mut Graph<T>,
        context: Var,
        choice: &CompressionChoice,
        active: &[usize],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let (_, _, t, h, w) = g.value(context).dims5()?;
        latent_dims(&self.tokeniser.cfg, t, h, w, choice)
            .map_err(|e| shape_err!("context of {t} frames cannot be encoded under {choice}: {e}"))?;
        let y = self.forward_sequence(g, context, choice, active, rng)?;
        g.narrow(y, 2, t - 1, 1)
    }

    /// Raw-space prediction: normalises the context per sample and field,
    /// predicts, and maps the frame back with the context's scales.
    pub fn predict_next_frame(
        &self,
        context: &Tensor<T>,
        schema: &FieldSchema,
        choice: &CompressionChoice,
        active: &[usize],
    ) -> Result<Tensor<T>> {
        let state = rms_scales(context, schema)?;
        let xn = normalise_with(context, &state)?;
        let mut g = Graph::new();
        let x = g.constant(xn);
        let y = self.predict_next_frame_var(&mut g, x, choice, active, None)?;
        denormalise(g.value(y), &state)
    }
}

/// Adapts an [`Emulator`] to the rollout evaluator's single-sample interface.
pub struct EmulatorPredictor<'a, T: Scalar> {
    pub model: &'a Emulator<T>,
    pub schema: FieldSchema,
    pub choice: CompressionChoice,
    pub active: Vec<usize>,
}

impl<T: Scalar> NextFramePredictor<T> for EmulatorPredictor<'_, T> {
    fn predict_next(&mut self, context: &Tensor<T>) -> Result<Tensor<T>> {
        let mut shape = vec![1];
        shape.extend_from_slice(context.shape());
        let (c, h, w) = (shape[1], shape[3], shape[4]);
        let y = self.model.predict_next_frame(&context.clone().reshape(&shape)?, &self.schema, &self.choice, &self.active)?;
        y.reshape(&[c, h, w])
    }
}
