//! Sequence classifier over latent-vector sequences.
//!
//! Each sequence is prefixed with a learned class token. Every token receives
//! additive position embeddings for its slot (`P_p`), the sequence ordinal in
//! the video (`P_M`) and the segment ordinal (`P_S`); [`PositionMode`]
//! selects which of the last two are used.

mod attention;
mod model;
mod train;

pub use attention::{attention, attention_weights, multi_head, MhaVars};
pub use model::{SequenceInput, Transformer, TransformerTrace};
pub use train::{class_weight, predict, train_transformer, LossKind, TrainReport, TransformerTrainConfig};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionMode {
    None,
    #[serde(rename = "seq")]
    Sequence,
    #[serde(rename = "seg")]
    Segment,
    Both,
}

impl PositionMode {
    pub const ALL: [PositionMode; 4] = [Self::None, Self::Sequence, Self::Segment, Self::Both];

    pub fn uses_sequence(self) -> bool {
        matches!(self, Self::Sequence | Self::Both)
    }

    pub fn uses_segment(self) -> bool {
        matches!(self, Self::Segment | Self::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Sequence => "seq",
            Self::Segment => "seg",
            Self::Both => "both",
        }
    }
}

impl fmt::Display for PositionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PositionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| Error::Config(format!("unknown position mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_mult: usize,
    /// Widths of the classification head; the last entry is the class count.
    pub mlp_head_dims: Vec<usize>,
    pub dropout: f64,
    /// Slot table rows: sequence size plus one for the class token.
    pub max_positions: usize,
    pub max_sequences: usize,
    pub max_segments: usize,
    pub positions: PositionMode,
    pub ln_eps: f64,
}

impl TransformerConfig {
    pub fn new(seq_len: usize) -> Self {
        Self {
            num_layers: 4,
            hidden_dim: 128,
            num_heads: 2,
            ff_mult: 4,
            mlp_head_dims: vec![64, 32, 2],
            dropout: 0.2,
            max_positions: seq_len + 1,
            max_sequences: 512,
            max_segments: 128,
            positions: PositionMode::Both,
            ln_eps: 1e-5,
        }
    }

    pub fn with_positions(mut self, positions: PositionMode) -> Self {
        self.positions = positions;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!("hidden dim {} not divisible by {} heads", self.hidden_dim, self.num_heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.mlp_head_dims.last() != Some(&2) || self.mlp_head_dims.contains(&0) {
            return Err(Error::Config(format!("head widths {:?} must end in 2 classes", self.mlp_head_dims)));
        }
        if self.max_positions < 2 || self.max_sequences == 0 || self.max_segments == 0 || self.ff_mult == 0 {
            return Err(Error::Config("embedding capacities and feed-forward width must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(TransformerConfig::new(15).validate().is_ok());
        assert_eq!(TransformerConfig::new(15).max_positions, 16);
        let mut c = TransformerConfig::new(15);
        c.num_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TransformerConfig::new(15);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn position_mode_parsing() {
        for m in PositionMode::ALL {
            assert_eq!(m.as_str().parse::<PositionMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("all".parse::<PositionMode>().is_err());
    }
}
