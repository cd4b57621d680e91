use serde::{Deserialize, Serialize};

use super::ScorerError;

/// Backbone projections that can carry a low-rank update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterTarget {
    Query,
    Key,
    Value,
    Output,
    MlpUp,
    MlpDown,
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    /// Multiplier applied to the low-rank product `A·B`.
    pub scale: f64,
    pub targets: Vec<AdapterTarget>,
}

impl Default for AdapterConfig {
    /// Rank 8, scale 4 on every attention and MLP projection.
    fn default() -> Self {
        Self {
            rank: 8,
            scale: 4.0,
            targets: vec![
                AdapterTarget::Query,
                AdapterTarget::Key,
                AdapterTarget::Value,
                AdapterTarget::Output,
                AdapterTarget::MlpUp,
                AdapterTarget::MlpDown,
            ],
        }
    }
}

impl AdapterConfig {
    pub fn targets(&self, t: AdapterTarget) -> bool {
        self.targets.contains(&t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub audio_vocab: usize,
    pub video_vocab: usize,
    pub text_vocab: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_width: usize,
    /// Longest assembled sequence (audio + video + tag + prompt + response).
    pub max_len: usize,
    pub seed: u64,
    /// Zero the output head so every next-token distribution starts uniform.
    #[serde(default)]
    pub zero_head: bool,
    pub adapter: AdapterConfig,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            audio_vocab: 32,
            video_vocab: 32,
            text_vocab: 64,
            width: 16,
            layers: 1,
            heads: 2,
            mlp_width: 32,
            max_len: 48,
            seed: 17,
            zero_head: false,
            adapter: AdapterConfig::default(),
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<(), ScorerError> {
        let bad = |m: String| Err(ScorerError::InvalidConfig(m));
        if self.audio_vocab == 0 || self.video_vocab == 0 || self.text_vocab == 0 {
            return bad("vocabulary sizes must be positive".into());
        }
        if self.width == 0 || self.heads == 0 || self.layers == 0 || self.mlp_width == 0 {
            return bad("width, heads, layers and mlp_width must be positive".into());
        }
        if !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} is not divisible by head count {}", self.width, self.heads));
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2".into());
        }
        if self.adapter.rank == 0 {
            return bad("adapter rank must be >= 1".into());
        }
        if !(self.adapter.scale.is_finite() && self.adapter.scale > 0.0) {
            return bad(format!("adapter scale must be positive, got {}", self.adapter.scale));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}
