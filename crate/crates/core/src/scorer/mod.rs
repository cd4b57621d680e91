//! Toy multimodal sequence scorer supplying policy, reference and text-prior
//! log-likelihoods, plus attention introspection.
//!
//! Audio and video arrive as pre-discretized token streams. Their codebook
//! vectors are frozen; a trainable linear projector maps them into the
//! decoder width. The policy trains only the projectors and low-rank
//! adapters. The reference is a frozen deep copy of the policy at
//! initialization, and the text prior reads only `[tag][prompt][response]`
//! through the reference's backbone.

mod checkpoint;
mod config;
mod model;
mod params;

use std::ops::Range;
use std::sync::Arc;

use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{encode_all, restore_into, Checkpoint, CheckpointError, TensorBlob};
pub use config::{AdapterConfig, AdapterTarget, ScorerConfig};
pub use model::{SEG_AUDIO, SEG_TEXT, SEG_VIDEO};
pub use params::{Backbone, LayerAdapters, Layer, Lora, Mat, Trainable};

use crate::types::ModalityTag;
use model::InputMode;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScorerError {
    #[error("invalid scorer configuration: {0}")]
    InvalidConfig(String),
    #[error("{stream} token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { stream: &'static str, id: u32, vocab: usize },
    #[error("sequence of length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("response must contain at least one token")]
    EmptyResponse,
    #[error("model `{0}` is frozen")]
    Frozen(ModelRole),
    #[error("frozen parameter drift: {0}")]
    FrozenDrift(String),
}

/// One scoring input: discrete audio/video streams, prompt and response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStreams {
    pub audio_tokens: Vec<u32>,
    pub video_tokens: Vec<u32>,
    pub prompt_tokens: Vec<u32>,
    pub response_tokens: Vec<u32>,
    pub modality_tag: ModalityTag,
}

impl TokenStreams {
    pub fn with_response(&self, response: Vec<u32>) -> Self {
        Self { response_tokens: response, ..self.clone() }
    }

    pub fn with_av(&self, audio: Vec<u32>, video: Vec<u32>) -> Self {
        Self { audio_tokens: audio, video_tokens: video, ..self.clone() }
    }
}

/// Anything that assigns a sequence log-likelihood to a response.
pub trait SequenceScorer {
    fn log_prob(&self, ts: &TokenStreams) -> Result<f64, ScorerError>;
}

/// Per-segment share of attention mass, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionShare {
    pub audio_pct: f64,
    pub video_pct: f64,
    pub text_pct: f64,
}

impl AttentionShare {
    pub fn multimodal_pct(&self) -> f64 {
        self.audio_pct + self.video_pct
    }

    /// Audio and video shares renormalized to the multimodal total.
    pub fn within_multimodal(&self) -> (f64, f64) {
        let mm = self.multimodal_pct();
        if mm == 0.0 {
            (0.0, 0.0)
        } else {
            (100.0 * self.audio_pct / mm, 100.0 * self.video_pct / mm)
        }
    }
}

/// Means per-segment attention mass over every map and every query row in `rows`.
pub fn aggregate_attention_share<'a>(
    maps: impl IntoIterator<Item = &'a Mat>,
    segments: &[usize],
    rows: Range<usize>,
) -> AttentionShare {
    let mut mass = [0.0f64; 3];
    let mut count = 0usize;
    for map in maps {
        for i in rows.clone() {
            let row = map.row(i);
            for (j, &seg) in segments.iter().enumerate() {
                mass[seg] += row[j];
            }
            count += 1;
        }
    }
    let total: f64 = mass.iter().sum();
    if count == 0 || total == 0.0 {
        return AttentionShare { audio_pct: 0.0, video_pct: 0.0, text_pct: 0.0 };
    }
    AttentionShare {
        audio_pct: 100.0 * mass[SEG_AUDIO] / total,
        video_pct: 100.0 * mass[SEG_VIDEO] / total,
        text_pct: 100.0 * mass[SEG_TEXT] / total,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Policy,
    Reference,
    TextPrior,
}

impl std::fmt::Display for ModelRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelRole::Policy => "policy",
            ModelRole::Reference => "reference",
            ModelRole::TextPrior => "text_prior",
        })
    }
}

/// Attention maps (layer-major, then head), token segment ids and the rows that predict response tokens.
pub type AttentionMaps = (Vec<Mat>, Vec<usize>, Range<usize>);

#[derive(Debug, Clone)]
pub struct Model {
    config: Arc<ScorerConfig>,
    backbone: Arc<Backbone>,
    trainable: Option<Trainable>,
    role: ModelRole,
}

/// The three models a training run needs.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub policy: Model,
    pub reference: Model,
    pub text_prior: Model,
}

/// Builds policy, reference and text prior from one seeded initialization.
pub fn init_models(cfg: &ScorerConfig) -> Result<ModelSet, ScorerError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let backbone = Backbone::init(cfg, &mut rng);
    let trainable = Trainable::init(cfg, &mut rng);
    Ok(ModelSet::from_parts(cfg.clone(), backbone, trainable.clone(), trainable))
}

impl ModelSet {
    /// Assembles a set from explicit weights; the policy gets its own copy of the backbone.
    pub fn from_parts(cfg: ScorerConfig, backbone: Backbone, policy: Trainable, reference: Trainable) -> Self {
        let config = Arc::new(cfg);
        let shared = Arc::new(backbone);
        let policy_backbone = Arc::new((*shared).clone());
        ModelSet {
            policy: Model { config: config.clone(), backbone: policy_backbone, trainable: Some(policy), role: ModelRole::Policy },
            reference: Model {
                config: config.clone(),
                backbone: shared.clone(),
                trainable: Some(reference),
                role: ModelRole::Reference,
            },
            text_prior: Model { config, backbone: shared, trainable: None, role: ModelRole::TextPrior },
        }
    }
}

impl Model {
    pub fn config(&self) -> &ScorerConfig {
        &self.config
    }

    pub fn role(&self) -> ModelRole {
        self.role
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn trainable(&self) -> Option<&Trainable> {
        self.trainable.as_ref()
    }

    /// Mutable access to the trainable tensors; only the policy allows it.
    pub fn trainable_mut(&mut self) -> Result<&mut Trainable, ScorerError> {
        match (self.role, self.trainable.as_mut()) {
            (ModelRole::Policy, Some(t)) => Ok(t),
            _ => Err(ScorerError::Frozen(self.role)),
        }
    }

    /// Whether two models hold the same backbone allocation.
    pub fn shares_backbone_with(&self, other: &Model) -> bool {
        Arc::ptr_eq(&self.backbone, &other.backbone)
    }

    fn mode(&self) -> InputMode {
        match self.role {
            ModelRole::TextPrior => InputMode::TextOnly,
            _ => InputMode::Full,
        }
    }

    fn run(&self, ts: &TokenStreams) -> Result<model::ForwardCache, ScorerError> {
        let layout = model::assemble(&self.config, ts, self.mode())?;
        Ok(model::forward(&self.config, &self.backbone, self.trainable.as_ref(), layout))
    }

    /// Sum of response-token log-probabilities given everything before them.
    pub fn sequence_log_prob(&self, ts: &TokenStreams) -> Result<f64, ScorerError> {
        Ok(self.run(ts)?.log_prob)
    }

    /// Log-likelihood plus `upstream · ∂/∂θ` accumulated into `grads`.
    pub fn log_prob_with_grad(&self, ts: &TokenStreams, upstream: f64, grads: &mut Trainable) -> Result<f64, ScorerError> {
        let trainable = self.trainable.as_ref().ok_or(ScorerError::Frozen(self.role))?;
        let cache = self.run(ts)?;
        model::backward(&self.config, &self.backbone, trainable, &cache, upstream, grads);
        Ok(cache.log_prob)
    }

    /// Next-token distributions at each response position (one row per response token).
    pub fn next_token_distributions(&self, ts: &TokenStreams) -> Result<Mat, ScorerError> {
        Ok(self.run(ts)?.next_probs)
    }

    /// Mean attention mass per segment over layers, heads and response-predicting rows.
    pub fn attention_share(&self, ts: &TokenStreams) -> Result<AttentionShare, ScorerError> {
        let cache = self.run(ts)?;
        Ok(aggregate_attention_share(cache.attention(), &cache.layout.segments, cache.layout.predicting_rows()))
    }

    /// Raw attention maps (layer-major, then head) and segment ids, for external aggregation.
    pub fn attention_maps(&self, ts: &TokenStreams) -> Result<AttentionMaps, ScorerError> {
        let cache = self.run(ts)?;
        let maps = cache.attention().cloned().collect();
        Ok((maps, cache.layout.segments.clone(), cache.layout.predicting_rows()))
    }

    /// Greedy continuation of `ts.response_tokens` by `max_new` tokens.
    pub fn greedy_decode(&self, ts: &TokenStreams, max_new: usize) -> Result<Vec<u32>, ScorerError> {
        let mut cur = ts.clone();
        let mut out = Vec::with_capacity(max_new);
        for _ in 0..max_new {
            // A placeholder makes the row predicting the next position exist;
            // causality keeps the placeholder itself out of that row.
            cur.response_tokens.push(0);
            let probs = self.next_token_distributions(&cur)?;
            let last = probs.index_axis(Axis(0), probs.nrows() - 1);
            let (best, _) = last
                .iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
            *cur.response_tokens.last_mut().expect("placeholder pushed") = best as u32;
            out.push(best as u32);
        }
        Ok(out)
    }
}

impl SequenceScorer for Model {
    fn log_prob(&self, ts: &TokenStreams) -> Result<f64, ScorerError> {
        self.sequence_log_prob(ts)
    }
}

/// Result of comparing frozen parameters against their snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuardReport {
    pub reference_drift: f64,
    pub text_prior_drift: f64,
    pub policy_backbone_drift: f64,
    /// Largest absolute change in any trainable policy tensor.
    pub policy_trainable_change: f64,
}

/// Snapshot of every parameter that must never move during training.
#[derive(Debug, Clone)]
pub struct FrozenGuard {
    backbone: Backbone,
    reference_trainable: Trainable,
    policy_trainable: Trainable,
}

fn max_abs_diff<'a>(a: impl IntoIterator<Item = (String, &'a Mat)>, b: impl IntoIterator<Item = (String, &'a Mat)>) -> f64 {
    a.into_iter()
        .zip(b)
        .flat_map(|((_, x), (_, y))| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

impl FrozenGuard {
    pub fn capture(models: &ModelSet) -> Self {
        Self {
            backbone: models.reference.backbone().clone(),
            reference_trainable: models.reference.trainable().expect("reference has adapters").clone(),
            policy_trainable: models.policy.trainable().expect("policy has adapters").clone(),
        }
    }

    /// Measures drift; any non-zero frozen drift is an error.
    pub fn check(&self, models: &ModelSet) -> Result<GuardReport, ScorerError> {
        let snap = self.backbone.tensors();
        let reference_drift = max_abs_diff(models.reference.backbone().tensors(), snap.clone()).max(max_abs_diff(
            models.reference.trainable().expect("reference has adapters").tensors(),
            self.reference_trainable.tensors(),
        ));
        let text_prior_drift = max_abs_diff(models.text_prior.backbone().tensors(), snap.clone());
        let policy_backbone_drift = max_abs_diff(models.policy.backbone().tensors(), snap);
        let policy_trainable_change = max_abs_diff(
            models.policy.trainable().expect("policy has adapters").tensors(),
            self.policy_trainable.tensors(),
        );
        let report = GuardReport { reference_drift, text_prior_drift, policy_backbone_drift, policy_trainable_change };
        if reference_drift != 0.0 || text_prior_drift != 0.0 || policy_backbone_drift != 0.0 {
            return Err(ScorerError::FrozenDrift(format!(
                "reference {reference_drift:e}, text prior {text_prior_drift:e}, policy backbone {policy_backbone_drift:e}"
            )));
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests;
