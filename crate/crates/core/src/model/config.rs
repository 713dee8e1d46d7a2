use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the toy MoE language model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    /// Hidden width of each expert FFN.
    pub d_expert: usize,
    pub n_layers: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub max_seq_len: usize,
    /// Low-rank adapter rank on expert up/down projections; 0 = full fine-tune.
    #[serde(default)]
    pub adapter_rank: usize,
}

impl ModelConfig {
    /// Desk-scale default used by the pipeline.
    pub fn desk() -> Self {
        Self {
            vocab_size: 96,
            d_model: 32,
            d_expert: 32,
            n_layers: 6,
            n_experts: 8,
            top_k: 2,
            max_seq_len: 32,
            adapter_rank: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("d_expert", self.d_expert),
            ("n_layers", self.n_layers),
            ("n_experts", self.n_experts),
            ("top_k", self.top_k),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "top_k {} exceeds n_experts {}",
                self.top_k, self.n_experts
            )));
        }
        Ok(())
    }

    /// End-of-sequence token id (`vocab_size - 1` by convention).
    pub fn eos(&self) -> u32 {
        (self.vocab_size - 1) as u32
    }
}
