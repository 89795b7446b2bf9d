use serde::{Deserialize, Serialize};

use crate::error::{EvoError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    Linear,
    Dtr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoePlacement {
    /// Even layer indices (0, 2, 4, ...).
    Alternating,
    All,
    None,
}

/// Architecture and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub router_kind: RouterKind,
    pub moe_placement: MoePlacement,
    pub skip_first_moe_layer: bool,
    pub shared_expert: bool,
    pub dtr_rank: usize,
    pub hypernet_hidden: usize,
    /// One `[lo, hi]` β range per evolved expert (experts 1..E).
    pub beta_ranges: Vec<[f64; 2]>,
    pub max_seq_len: usize,
    pub seed: u64,
}

pub const DEFAULT_BETA_RANGES: [[f64; 2]; 3] = [[0.9, 0.99], [0.8, 0.89], [0.7, 0.79]];

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 64,
            n_layers: 4,
            n_heads: 2,
            ffn_hidden: 128,
            n_experts: 4,
            top_k: 1,
            router_kind: RouterKind::Dtr,
            moe_placement: MoePlacement::Alternating,
            skip_first_moe_layer: false,
            shared_expert: false,
            dtr_rank: 4,
            hypernet_hidden: 16,
            beta_ranges: DEFAULT_BETA_RANGES.to_vec(),
            max_seq_len: 32,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_hidden", self.ffn_hidden),
            ("n_experts", self.n_experts),
            ("top_k", self.top_k),
            ("dtr_rank", self.dtr_rank),
            ("hypernet_hidden", self.hypernet_hidden),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(EvoError::config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(EvoError::config(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.top_k > self.n_experts {
            return Err(EvoError::config(format!(
                "top_k {} exceeds n_experts {}",
                self.top_k, self.n_experts
            )));
        }
        if self.dtr_rank % 2 != 0 {
            return Err(EvoError::config(format!(
                "dtr_rank {} must be even (SwiGLU gate/value split)",
                self.dtr_rank
            )));
        }
        if self.beta_ranges.len() != self.n_experts - 1 {
            return Err(EvoError::config(format!(
                "need {} beta ranges for {} experts, got {}",
                self.n_experts - 1,
                self.n_experts,
                self.beta_ranges.len()
            )));
        }
        for [lo, hi] in &self.beta_ranges {
            if !(0.0..=1.0).contains(lo) || !(0.0..=1.0).contains(hi) || lo > hi {
                return Err(EvoError::config(format!(
                    "beta range [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1"
                )));
            }
        }
        Ok(())
    }

    /// Layer indices that carry an expert bank once the model is sparse.
    pub fn moe_layers(&self) -> Vec<usize> {
        let mut layers: Vec<usize> = match self.moe_placement {
            MoePlacement::None => vec![],
            MoePlacement::All => (0..self.n_layers).collect(),
            MoePlacement::Alternating => (0..self.n_layers).step_by(2).collect(),
        };
        if self.skip_first_moe_layer {
            layers.retain(|&l| l != 0);
        }
        layers
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
