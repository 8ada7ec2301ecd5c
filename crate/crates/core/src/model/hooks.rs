//! Forward-pass intervention hooks.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};

use super::config::ModelConfig;

/// Additive noise on input embeddings over a position range.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedNoise {
    /// First noised position (inclusive).
    pub start: usize,
    /// One noise vector per position in `start..start + vectors.len()`.
    pub vectors: Vec<Vec<f64>>,
}

/// On-the-fly suppression cancelling: at each layer, the FFN output at the
/// current position has its projection onto `target_direction` removed
/// (scaled by `alpha`) whenever that projection is negative.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineRectify {
    pub target_direction: Vec<f64>,
    pub alpha: f64,
}

/// Interventions applied during one forward pass.
///
/// Application order: `embed_noise` at the input, `restore_overrides`
/// after each layer's output, `ffn_patches` (or online rectification)
/// added to the FFN output at the current (final) position before the
/// residual addition.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HookSet {
    /// layer -> vector added to the FFN output at the final position.
    pub ffn_patches: BTreeMap<usize, Vec<f64>>,
    /// (layer, position) -> replacement for that layer's output state.
    pub restore_overrides: BTreeMap<(usize, usize), Vec<f64>>,
    /// Noise added to input embeddings.
    pub embed_noise: Option<EmbedNoise>,
    /// Dynamic per-layer suppression cancelling at the current position.
    pub online_rectify: Option<OnlineRectify>,
}

impl HookSet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.ffn_patches.is_empty()
            && self.restore_overrides.is_empty()
            && self.embed_noise.is_none()
            && self.online_rectify.is_none()
    }

    /// Check layer/position bounds and vector widths against a model shape.
    pub fn validate(&self, config: &ModelConfig, seq_len: usize) -> Result<()> {
        let d = config.hidden;
        for (&layer, patch) in &self.ffn_patches {
            if layer >= config.layers {
                return Err(CoreError::LayerOutOfRange {
                    layer,
                    layers: config.layers,
                });
            }
            if patch.len() != d {
                return Err(CoreError::DimensionMismatch {
                    context: "ffn_patch width",
                    expected: d,
                    got: patch.len(),
                });
            }
        }
        for (&(layer, position), state) in &self.restore_overrides {
            if layer >= config.layers {
                return Err(CoreError::LayerOutOfRange {
                    layer,
                    layers: config.layers,
                });
            }
            if position >= seq_len {
                return Err(CoreError::PositionOutOfRange {
                    position,
                    len: seq_len,
                });
            }
            if state.len() != d {
                return Err(CoreError::DimensionMismatch {
                    context: "restore_override width",
                    expected: d,
                    got: state.len(),
                });
            }
        }
        if let Some(noise) = &self.embed_noise {
            let end = noise.start + noise.vectors.len();
            if end > seq_len {
                return Err(CoreError::PositionOutOfRange {
                    position: end.saturating_sub(1),
                    len: seq_len,
                });
            }
            for v in &noise.vectors {
                if v.len() != d {
                    return Err(CoreError::DimensionMismatch {
                        context: "embed_noise width",
                        expected: d,
                        got: v.len(),
                    });
                }
            }
        }
        if let Some(rect) = &self.online_rectify {
            if rect.target_direction.len() != d {
                return Err(CoreError::DimensionMismatch {
                    context: "online_rectify direction width",
                    expected: d,
                    got: rect.target_direction.len(),
                });
            }
        }
        Ok(())
    }
}
