//! Exact parameter and FLOP accounting for the scene-encoder / motion-decoder
//! transformer.
//!
//! Only the einsums inside attention and feed-forward blocks are counted.
//! Embedding, output-head and normalization layers are excluded. A
//! multiply-add counts as two FLOPs. All counts are exact integers and every
//! arithmetic step is overflow-checked.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Feed-forward hidden width as a multiple of `d`.
pub const FFN_MULT: u64 = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("invalid model shape: {0}")]
    InvalidShape(&'static str),
    #[error("FLOP count overflows u64")]
    Overflow,
}

/// Hyper-parameters that determine parameter and FLOP counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelShape {
    /// Encoder layers.
    pub enc_layers: u64,
    /// Decoder layers.
    pub dec_layers: u64,
    /// Hidden width.
    pub d_model: u64,
    /// Scene tokens seen by the encoder.
    pub scene_tokens: u64,
    /// Decoder query tokens (modeled agents times motion steps).
    pub query_tokens: u64,
}

impl ModelShape {
    pub fn new(
        enc_layers: u64,
        dec_layers: u64,
        d_model: u64,
        scene_tokens: u64,
        query_tokens: u64,
    ) -> Result<Self, LedgerError> {
        let shape = Self {
            enc_layers,
            dec_layers,
            d_model,
            scene_tokens,
            query_tokens,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<(), LedgerError> {
        if self.d_model == 0 {
            return Err(LedgerError::InvalidShape("d_model must be >= 1"));
        }
        if self.scene_tokens == 0 {
            return Err(LedgerError::InvalidShape("scene_tokens must be >= 1"));
        }
        if self.query_tokens == 0 {
            return Err(LedgerError::InvalidShape("query_tokens must be >= 1"));
        }
        Ok(())
    }

    /// The same shape with a different number of decoder queries.
    pub fn with_query_tokens(self, query_tokens: u64) -> Self {
        Self {
            query_tokens,
            ..self
        }
    }
}

/// Total training compute for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeBudget {
    pub total_flops: u64,
    pub examples: u64,
    pub flops_per_example: u64,
}

fn mul(a: u64, b: u64) -> Result<u64, LedgerError> {
    a.checked_mul(b).ok_or(LedgerError::Overflow)
}

fn add(a: u64, b: u64) -> Result<u64, LedgerError> {
    a.checked_add(b).ok_or(LedgerError::Overflow)
}

fn prod(xs: &[u64]) -> Result<u64, LedgerError> {
    xs.iter().try_fold(1u64, |acc, &x| mul(acc, x))
}

/// Non-embedding parameters: `(12 n + 16 m) d^2`.
pub fn param_count(shape: &ModelShape) -> Result<u64, LedgerError> {
    shape.validate()?;
    let per_layer = add(mul(12, shape.enc_layers)?, mul(16, shape.dec_layers)?)?;
    mul(per_layer, mul(shape.d_model, shape.d_model)?)
}

/// Encoder parameters only (`12 n d^2`).
pub fn encoder_param_count(shape: &ModelShape) -> Result<u64, LedgerError> {
    prod(&[12, shape.enc_layers, shape.d_model, shape.d_model])
}

/// Decoder parameters only (`16 m d^2`).
pub fn decoder_param_count(shape: &ModelShape) -> Result<u64, LedgerError> {
    prod(&[16, shape.dec_layers, shape.d_model, shape.d_model])
}

/// FLOPs of one encoder layer: `24 E d^2 + 4 d E^2`.
pub fn encoder_layer_flops(shape: &ModelShape) -> Result<u64, LedgerError> {
    let (e, d) = (shape.scene_tokens, shape.d_model);
    add(prod(&[24, e, d, d])?, prod(&[4, d, e, e])?)
}

/// FLOPs of one decoder layer: `28 D d^2 + 4 d D^2 + 4 E d^2 + 4 d D E`.
pub fn decoder_layer_flops(shape: &ModelShape) -> Result<u64, LedgerError> {
    let (e, q, d) = (shape.scene_tokens, shape.query_tokens, shape.d_model);
    let self_and_ffn = add(prod(&[28, q, d, d])?, prod(&[4, d, q, q])?)?;
    let cross = add(prod(&[4, e, d, d])?, prod(&[4, d, q, e])?)?;
    add(self_and_ffn, cross)
}

/// Encoder forward FLOPs for one example.
pub fn encoder_flops(shape: &ModelShape) -> Result<u64, LedgerError> {
    mul(shape.enc_layers, encoder_layer_flops(shape)?)
}

/// Decoder forward FLOPs for one example.
pub fn decoder_flops(shape: &ModelShape) -> Result<u64, LedgerError> {
    mul(shape.dec_layers, decoder_layer_flops(shape)?)
}

/// Forward FLOPs for one training example. Backward cost is not added.
pub fn flops_per_example(shape: &ModelShape) -> Result<u64, LedgerError> {
    shape.validate()?;
    add(encoder_flops(shape)?, decoder_flops(shape)?)
}

/// Training FLOPs for `examples` examples (forward-only accounting).
pub fn train_flops(shape: &ModelShape, examples: u64) -> Result<u64, LedgerError> {
    mul(flops_per_example(shape)?, examples)
}

pub fn compute_budget(shape: &ModelShape, examples: u64) -> Result<ComputeBudget, LedgerError> {
    let flops_per_example = flops_per_example(shape)?;
    Ok(ComputeBudget {
        total_flops: mul(flops_per_example, examples)?,
        examples,
        flops_per_example,
    })
}

/// Inference FLOPs for drawing `num_samples` joint rollouts from one scene.
///
/// The scene is encoded once; every sample is charged the full-sequence
/// decoder cost (no cache discount).
pub fn inference_flops(shape: &ModelShape, num_samples: u64) -> Result<u64, LedgerError> {
    shape.validate()?;
    if num_samples == 0 {
        return Err(LedgerError::InvalidShape("num_samples must be >= 1"));
    }
    add(
        encoder_flops(shape)?,
        mul(decoder_flops(shape)?, num_samples)?,
    )
}

/// Continuous relaxation of the per-example FLOPs used by the allocation
/// search, where layer counts may be fractional.
pub fn flops_per_example_f64(
    enc_layers: f64,
    dec_layers: f64,
    d_model: f64,
    scene_tokens: f64,
    query_tokens: f64,
) -> f64 {
    let (e, q, d) = (scene_tokens, query_tokens, d_model);
    enc_layers * (24.0 * e * d * d + 4.0 * d * e * e)
        + dec_layers * (28.0 * q * d * d + 4.0 * d * q * q + 4.0 * e * d * d + 4.0 * d * q * e)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(n: u64, m: u64, d: u64, e: u64, q: u64) -> ModelShape {
        ModelShape::new(n, m, d, e, q).unwrap()
    }

    #[test]
    fn empty_model_has_no_parameters() {
        assert_eq!(param_count(&shape(0, 0, 64, 1, 1)).unwrap(), 0);
    }

    #[test]
    fn two_by_two_width_128() {
        assert_eq!(param_count(&shape(2, 2, 128, 1, 1)).unwrap(), 917_504);
    }

    #[test]
    fn symmetric_models_put_four_sevenths_in_the_decoder() {
        for d in [1u64, 16, 64, 333] {
            let s = shape(2, 2, d, 8, 8);
            let total = param_count(&s).unwrap();
            let dec = decoder_param_count(&s).unwrap();
            assert_eq!(dec * 7, total * 4);
            assert_eq!(dec + encoder_param_count(&s).unwrap(), total);
        }
    }

    #[test]
    fn hand_evaluated_flops() {
        assert_eq!(flops_per_example(&shape(1, 0, 1, 2, 3)).unwrap(), 64);
        assert_eq!(flops_per_example(&shape(0, 1, 1, 2, 3)).unwrap(), 152);
        assert_eq!(flops_per_example(&shape(1, 1, 1, 2, 3)).unwrap(), 216);
    }

    #[test]
    fn train_flops_is_linear_in_examples() {
        let s = shape(2, 2, 32, 27, 88);
        let one = train_flops(&s, 1).unwrap();
        assert_eq!(train_flops(&s, 0).unwrap(), 0);
        assert_eq!(train_flops(&s, 37).unwrap(), 37 * one);
        let b = compute_budget(&s, 37).unwrap();
        assert_eq!(b.total_flops, b.flops_per_example * b.examples);
    }

    #[test]
    fn inference_flops_is_affine_in_samples() {
        let s = shape(2, 2, 128, 64, 176);
        let single = inference_flops(&s, 1).unwrap();
        assert_eq!(single, flops_per_example(&s).unwrap());
        let dec = decoder_flops(&s).unwrap();
        for k in [2u64, 8, 64, 1024] {
            assert_eq!(inference_flops(&s, k).unwrap(), single + (k - 1) * dec);
        }
        let dec_only = shape(0, 2, 128, 64, 176);
        assert_eq!(
            inference_flops(&dec_only, 2).unwrap(),
            2 * decoder_flops(&dec_only).unwrap()
        );
    }

    #[test]
    fn inference_flops_matches_independent_evaluation() {
        // n = m = 2, d = 128, E = 64, D = 176, 64 samples.
        // encoder layer: 24*64*128^2 + 4*128*64^2 = 25_165_824 + 2_097_152
        // decoder layer: 28*176*128^2 + 4*128*176^2 + 4*64*128^2 + 4*128*176*64
        //              = 80_740_352 + 15_859_712 + 4_194_304 + 5_767_168
        let enc = 2 * (25_165_824u64 + 2_097_152);
        let dec = 2 * (80_740_352u64 + 15_859_712 + 4_194_304 + 5_767_168);
        let s = shape(2, 2, 128, 64, 176);
        assert_eq!(inference_flops(&s, 64).unwrap(), enc + 64 * dec);
        assert_eq!(inference_flops(&s, 64).unwrap(), 13_694_402_560);
    }

    #[test]
    fn overflow_is_reported() {
        let s = shape(1, 1, 1 << 21, 1 << 20, 1 << 20);
        assert_eq!(flops_per_example(&s), Err(LedgerError::Overflow));
        let small = shape(1, 1, 8, 8, 8);
        assert_eq!(train_flops(&small, u64::MAX), Err(LedgerError::Overflow));
    }

    #[test]
    fn invalid_shapes_are_rejected() {
        assert!(ModelShape::new(1, 1, 0, 1, 1).is_err());
        assert!(ModelShape::new(1, 1, 1, 0, 1).is_err());
        assert!(ModelShape::new(1, 1, 1, 1, 0).is_err());
        assert!(inference_flops(&shape(1, 1, 1, 1, 1), 0).is_err());
    }

    #[test]
    fn continuous_relaxation_agrees_on_integers() {
        let s = shape(3, 3, 48, 27, 88);
        let exact = flops_per_example(&s).unwrap() as f64;
        let relaxed = flops_per_example_f64(3.0, 3.0, 48.0, 27.0, 88.0);
        assert_eq!(exact, relaxed);
    }
}
