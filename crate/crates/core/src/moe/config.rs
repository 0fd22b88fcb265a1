use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Shape of a toy MoE model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoEConfig {
    /// Decoder blocks.
    pub num_layers: usize,
    pub hidden: usize,
    /// Inner width of every gated FFN (experts, shared expert, dense MLP).
    pub ffn_inner: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub vocab: usize,
    /// 0 (Mixtral-style) or 1 (DeepSeek-style).
    pub num_shared_experts: usize,
    pub seed: u64,
}

impl Default for MoEConfig {
    fn default() -> Self {
        MoEConfig {
            num_layers: 4,
            hidden: 64,
            ffn_inner: 128,
            num_experts: 8,
            top_k: 2,
            vocab: 256,
            num_shared_experts: 1,
            seed: 0,
        }
    }
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("ffn_inner", self.ffn_inner),
            ("num_experts", self.num_experts),
            ("vocab", self.vocab),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "top_k={} must lie in 1..={}",
                self.top_k, self.num_experts
            )));
        }
        if self.num_shared_experts > 1 {
            return Err(Error::Config("num_shared_experts must be 0 or 1".into()));
        }
        if self.vocab > u16::MAX as usize + 1 {
            return Err(Error::Config("vocab must fit in 16 bits".into()));
        }
        Ok(())
    }

    /// Parameters in one gated FFN.
    pub fn ffn_params(&self) -> usize {
        3 * self.hidden * self.ffn_inner
    }
}
