//! Model shape configuration.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// FFN activation function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            // tanh approximation of GELU
            Activation::Gelu => {
                0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
            }
        }
    }

    /// Stable integer code used by the weights file format.
    pub fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Gelu => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Gelu),
            other => Err(CoreError::WeightsFormat {
                reason: format!("unknown activation code {other}"),
            }),
        }
    }
}

/// Shape of a pre-LN decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of transformer layers.
    pub layers: usize,
    /// Hidden width of the residual stream.
    pub hidden: usize,
    /// Attention head count; must divide `hidden`.
    pub heads: usize,
    /// FFN inner width.
    pub ffn: usize,
    /// Vocabulary size.
    pub vocab: usize,
    /// Maximum sequence length.
    pub max_seq: usize,
    /// FFN activation.
    pub activation: Activation,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn == 0 || self.max_seq == 0 {
            return Err(CoreError::InvalidConfig {
                reason: "all counts must be >= 1".into(),
            });
        }
        if self.vocab < 4 {
            return Err(CoreError::InvalidConfig {
                reason: format!("vocab must be >= 4, got {}", self.vocab),
            });
        }
        if self.hidden % self.heads != 0 {
            return Err(CoreError::InvalidConfig {
                reason: format!("hidden {} not divisible by heads {}", self.hidden, self.heads),
            });
        }
        Ok(())
    }

    /// Per-head width.
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            ffn: 16,
            vocab: 11,
            max_seq: 6,
            activation: Activation::Relu,
        }
    }

    #[test]
    fn validates_divisibility_and_vocab() {
        assert!(base().validate().is_ok());
        let mut bad = base();
        bad.heads = 3;
        assert!(bad.validate().is_err());
        let mut bad = base();
        bad.vocab = 3;
        assert!(bad.validate().is_err());
        let mut bad = base();
        bad.layers = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn activation_codes_round_trip() {
        for act in [Activation::Relu, Activation::Gelu] {
            assert_eq!(Activation::from_code(act.code()).unwrap(), act);
        }
        assert!(Activation::from_code(7).is_err());
    }
}
