use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DdtmConfig {
    /// Embedding width.
    pub d: usize,
    pub heads: usize,
    /// Hidden width of the encoder feed-forward block.
    pub d_ff: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    /// Logit clamp `C` of the final `C * tanh(.)` layer.
    pub clip: f64,
}

impl Default for DdtmConfig {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 4,
            d_ff: 128,
            n_enc: 2,
            n_dec: 1,
            clip: 10.0,
        }
    }
}

impl DdtmConfig {
    /// Full-size model.
    pub fn full_scale() -> Self {
        Self {
            d: 128,
            heads: 8,
            d_ff: 512,
            n_enc: 4,
            n_dec: 2,
            clip: 10.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d_ff == 0 || self.n_enc == 0 || self.n_dec == 0 {
            return Err(CoreError::InvalidConfig(format!("model extents must be positive: {self:?}")));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(CoreError::InvalidConfig(format!(
                "d = {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(CoreError::InvalidConfig(format!("logit clamp {} must be positive", self.clip)));
        }
        Ok(())
    }
}
