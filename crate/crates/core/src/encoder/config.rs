use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// tanh approximation of GELU
    Gelu,
    Relu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

/// `(1 + tanh(z)) / 2`, written as the logistic of `2z`.
fn gelu_gate(x: f64) -> f64 {
    let z = GELU_C * (x + 0.044715 * x * x * x);
    1.0 / (1.0 + (-2.0 * z).exp())
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => x * gelu_gate(x),
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let s = gelu_gate(x);
                let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                s + 2.0 * x * s * (1.0 - s) * dinner
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Hyperparameters of the miniature encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub dropout: f64,
    /// Candidate block width; 1 for single-token candidates.
    pub block_size: usize,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 2,
            layers: 2,
            ffn_dim: 64,
            max_positions: 256,
            dropout: 0.0,
            block_size: 1,
            activation: Activation::Gelu,
        }
    }
}

impl EncoderConfig {
    /// Zero layers is accepted and yields the embedding stack unchanged.
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.block_size == 0 {
            return Err(Error::Config("block_size must be at least 1".into()));
        }
        if self.ffn_dim == 0 || self.max_positions == 0 {
            return Err(Error::Config(
                "ffn_dim and max_positions must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (Activation::Gelu.apply(x + h) - Activation::Gelu.apply(x - h)) / (2.0 * h);
            assert!((fd - Activation::Gelu.derivative(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let c = EncoderConfig {
            dim: 10,
            heads: 3,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
