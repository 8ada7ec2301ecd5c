//! Model parameters.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{CoreError, Result};
use crate::numerics::Mat;

use super::config::ModelConfig;

/// Per-layer gain/bias pair for layer normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNormParams {
    pub fn identity(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }
}

/// Weights for one transformer layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// LN applied before attention.
    pub ln_attn: LayerNormParams,
    /// Attention projections, each `hidden x hidden`.
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
    /// LN applied before the FFN.
    pub ln_ffn: LayerNormParams,
    /// Up projection `ffn x hidden`.
    pub w_up: Mat,
    /// Down projection `hidden x ffn`.
    pub w_down: Mat,
}

/// Full parameter set of the model.
///
/// Immutable after construction; forward passes share it read-only.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// Token embeddings, `hidden x vocab` (one column per token).
    pub w_embed: Mat,
    /// Unembedding, `vocab x hidden` (one row per token).
    pub w_unembed: Mat,
    pub layers: Vec<LayerWeights>,
    /// Final layer norm before the unembedding.
    pub ln_final: LayerNormParams,
    /// Learned absolute positional embeddings, `max_seq x hidden`.
    pub pos_embed: Mat,
}

impl ModelWeights {
    /// Zero-initialized weights of the right shapes (LN gains set to 1).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                ln_attn: LayerNormParams::identity(d),
                w_q: Mat::zeros(d, d),
                w_k: Mat::zeros(d, d),
                w_v: Mat::zeros(d, d),
                w_o: Mat::zeros(d, d),
                ln_ffn: LayerNormParams::identity(d),
                w_up: Mat::zeros(config.ffn, d),
                w_down: Mat::zeros(d, config.ffn),
            })
            .collect();
        Ok(Self {
            config,
            w_embed: Mat::zeros(d, config.vocab),
            w_unembed: Mat::zeros(config.vocab, d),
            layers,
            ln_final: LayerNormParams::identity(d),
            pos_embed: Mat::zeros(config.max_seq, d),
        })
    }

    /// Random small-scale weights from a seeded RNG; useful for property
    /// tests and benchmarks, not for implanted-fact experiments.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let d = config.hidden as f64;
        let scale = 1.0 / d.sqrt();
        let mut w = Self::zeros(config)?;
        let fill = |m: &mut Mat, s: f64, rng: &mut ChaCha20Rng| {
            for v in m.data_mut() {
                *v = (rng.gen::<f64>() * 2.0 - 1.0) * s;
            }
        };
        fill(&mut w.w_embed, scale, &mut rng);
        fill(&mut w.w_unembed, scale, &mut rng);
        fill(&mut w.pos_embed, scale, &mut rng);
        for layer in &mut w.layers {
            fill(&mut layer.w_q, scale, &mut rng);
            fill(&mut layer.w_k, scale, &mut rng);
            fill(&mut layer.w_v, scale, &mut rng);
            fill(&mut layer.w_o, scale, &mut rng);
            fill(&mut layer.w_up, scale, &mut rng);
            fill(&mut layer.w_down, scale, &mut rng);
        }
        Ok(w)
    }

    /// Unembedding row for a token (its logit read-out direction).
    pub fn unembed_row(&self, token: usize) -> Result<&[f64]> {
        if token >= self.config.vocab {
            return Err(CoreError::TokenOutOfRange {
                token,
                vocab: self.config.vocab,
            });
        }
        Ok(self.w_unembed.row(token))
    }

    /// Token embedding column.
    pub fn embedding(&self, token: usize) -> Result<Vec<f64>> {
        if token >= self.config.vocab {
            return Err(CoreError::TokenOutOfRange {
                token,
                vocab: self.config.vocab,
            });
        }
        Ok(self.w_embed.col(token))
    }

    /// Round every parameter through `f32`.
    ///
    /// Weights written to disk are stored as `f32`; constructors call this
    /// so that save/load round-trips reproduce the in-memory model exactly.
    pub fn quantize_f32(&mut self) {
        let q = |m: &mut Mat| {
            for v in m.data_mut() {
                *v = *v as f32 as f64;
            }
        };
        let qv = |v: &mut Vec<f64>| {
            for x in v.iter_mut() {
                *x = *x as f32 as f64;
            }
        };
        q(&mut self.w_embed);
        q(&mut self.w_unembed);
        q(&mut self.pos_embed);
        for layer in &mut self.layers {
            qv(&mut layer.ln_attn.gain);
            qv(&mut layer.ln_attn.bias);
            q(&mut layer.w_q);
            q(&mut layer.w_k);
            q(&mut layer.w_v);
            q(&mut layer.w_o);
            qv(&mut layer.ln_ffn.gain);
            qv(&mut layer.ln_ffn.bias);
            q(&mut layer.w_up);
            q(&mut layer.w_down);
        }
        qv(&mut self.ln_final.gain);
        qv(&mut self.ln_final.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Activation;

    #[test]
    fn random_weights_deterministic_per_seed() {
        let cfg = ModelConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            ffn: 12,
            vocab: 9,
            max_seq: 5,
            activation: Activation::Gelu,
        };
        let a = ModelWeights::random(cfg, 7).unwrap();
        let b = ModelWeights::random(cfg, 7).unwrap();
        let c = ModelWeights::random(cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn quantize_is_idempotent() {
        let cfg = ModelConfig {
            layers: 1,
            hidden: 4,
            heads: 1,
            ffn: 4,
            vocab: 5,
            max_seq: 3,
            activation: Activation::Relu,
        };
        let mut w = ModelWeights::random(cfg, 3).unwrap();
        w.quantize_f32();
        let once = w.clone();
        w.quantize_f32();
        assert_eq!(w, once);
    }
}
