//! Minimal dense neural-network stack: matrices, a reverse-mode tape,
//! parameter storage, losses, Adam, and the unit scorer.

pub mod gradcheck;
pub mod loss;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod params;
pub mod tape;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use loss::{LossOutput, MarginSpace};
pub use matrix::Matrix;
pub use model::{build_input, Scorer, UnitSequenceInput, Vocabularies};
pub use optim::{Adam, AdamConfig};
pub use params::{Checkpoint, Grads, ParamStore};
pub use tape::{AttentionPattern, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub token_emb_dim: usize,
    pub spine_label_emb_dim: usize,
    pub spine_gru_hidden: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    /// One-sided window: position i attends to |i - j| <= window.
    pub attention_window: usize,
    pub max_position: usize,
    pub seed: u64,
    pub use_spines: bool,
    pub use_positions: bool,
    /// CLS positions attend to, and are attended by, every position.
    pub global_cls: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Small enough to train on a laptop CPU in seconds.
    pub fn desk() -> Self {
        ModelConfig {
            token_emb_dim: 16,
            spine_label_emb_dim: 8,
            spine_gru_hidden: 8,
            model_dim: 16,
            ffn_dim: 32,
            num_heads: 2,
            num_layers: 1,
            attention_window: 8,
            max_position: 65_536,
            seed: 13,
            use_spines: true,
            use_positions: true,
            global_cls: false,
        }
    }

    /// Published dimensions. Not trainable in reasonable time on this
    /// implementation; provided for shape checks.
    pub fn paper() -> Self {
        ModelConfig {
            token_emb_dim: 768,
            spine_label_emb_dim: 64,
            spine_gru_hidden: 512,
            model_dim: 768,
            ffn_dim: 3072,
            num_heads: 12,
            num_layers: 12,
            attention_window: 256,
            max_position: 65_536,
            global_cls: true,
            ..ModelConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.token_emb_dim", self.token_emb_dim),
            ("model.model_dim", self.model_dim),
            ("model.ffn_dim", self.ffn_dim),
            ("model.num_heads", self.num_heads),
            ("model.max_position", self.max_position),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.use_spines && (self.spine_label_emb_dim == 0 || self.spine_gru_hidden == 0) {
            return Err(Error::config("model.spine_gru_hidden", "spine encoder dimensions must be positive"));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "model.num_heads",
                format!("model_dim {} is not divisible by {} heads", self.model_dim, self.num_heads),
            ));
        }
        Ok(())
    }
}
