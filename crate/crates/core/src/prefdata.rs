//! Preference records: typed rejected responses and rejected audiovisual inputs.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array1;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::annotator::{self, templates, AnnotatorClient, AnnotatorError, AnnotatorRequest};
use crate::io::{self, IoError};
use crate::scorer::{Backbone, Mat};
use crate::types::{EmotionLabel, ModalityTag, PmpMask};
use crate::world::{item_rng, AvInput, AvStore, CODEBOOK};

#[derive(Debug, thiserror::Error)]
pub enum PrefError {
    #[error("no eligible pool item for {strategy} (record {id})")]
    EmptyPool { id: String, strategy: String },
    #[error("unknown audiovisual reference `{0}`")]
    UnknownAv(String),
    #[error("record {id}: {message}")]
    Invariant { id: String, message: String },
    #[error(transparent)]
    Io(#[from] IoError),
}

/// How the rejected audiovisual input is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum NegativeSamplingStrategy {
    /// Fresh uniform tokens with the chosen input's shape.
    RandomTensor,
    /// A uniformly drawn pool clip other than the chosen one.
    RandomVideo,
    /// Forward-noised chosen input, re-quantized to the nearest codebook entries.
    Diffuse { noise_step: usize },
    /// A uniformly drawn pool clip labelled with another emotion.
    #[default]
    DifferentEmotion,
}

impl NegativeSamplingStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            Self::RandomTensor => "random_tensor",
            Self::RandomVideo => "random_video",
            Self::Diffuse { .. } => "diffuse",
            Self::DifferentEmotion => "different_emotion",
        }
    }

    /// Parses `random_tensor`, `random_video`, `diffuse`, `diffuse:<step>` or `different_emotion`.
    pub fn parse(s: &str) -> Option<Self> {
        match s.split_once(':') {
            Some(("diffuse", step)) => step.parse().ok().map(|noise_step| Self::Diffuse { noise_step }),
            Some(_) => None,
            None => match s {
                "random_tensor" => Some(Self::RandomTensor),
                "random_video" => Some(Self::RandomVideo),
                "diffuse" => Some(Self::Diffuse { noise_step: DiffusionSchedule::DEFAULT_STEP }),
                "different_emotion" => Some(Self::DifferentEmotion),
                _ => None,
            },
        }
    }
}

/// Linear variance schedule for forward diffusion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl DiffusionSchedule {
    pub const DEFAULT_STEP: usize = 500;

    pub fn beta(&self, t: usize) -> f64 {
        if self.steps <= 1 {
            return self.beta_start;
        }
        self.beta_start + (self.beta_end - self.beta_start) * (t - 1) as f64 / (self.steps - 1) as f64
    }

    /// Cumulative signal fraction after `t` steps (1 at `t = 0`).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        (1..=t.min(self.steps)).map(|s| 1.0 - self.beta(s)).product()
    }
}

/// Codebook vectors used to embed and re-quantize discrete streams.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebooks {
    pub audio: Mat,
    pub video: Mat,
}

impl Codebooks {
    pub fn from_backbone(b: &Backbone) -> Self {
        Self { audio: b.audio_feat.clone(), video: b.video_feat.clone() }
    }
}

fn nearest_row(table: &Mat, x: &Array1<f64>) -> u32 {
    let mut best = (0usize, f64::INFINITY);
    for (i, row) in table.rows().into_iter().enumerate() {
        let d: f64 = row.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0 as u32
}

/// `x_t = sqrt(ab)·x_0 + sqrt(1-ab)·eps` per token, then nearest codebook entry.
pub fn diffuse_tokens(tokens: &[u32], table: &Mat, step: usize, schedule: &DiffusionSchedule, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let ab = schedule.alpha_bar(step);
    let (sig, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    tokens
        .iter()
        .map(|&t| {
            let x: Array1<f64> = table.row(t as usize).iter().map(|&v| {
                let e: f64 = StandardNormal.sample(rng);
                sig * v + noise * e
            }).collect();
            nearest_row(table, &x)
        })
        .collect()
}

/// A clip available as a rejected input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolItem {
    pub av_ref: String,
    pub emotion: EmotionLabel,
}

/// The rejected input plus the pool clip it came from, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedAv {
    pub av: AvInput,
    pub source_ref: Option<String>,
}

/// Draws a rejected audiovisual input for one record.
#[allow(clippy::too_many_arguments)]
pub fn select_rejected_av(
    id: &str,
    chosen_ref: &str,
    emotion: EmotionLabel,
    chosen: &AvInput,
    pool: &[PoolItem],
    store: &AvStore,
    strategy: NegativeSamplingStrategy,
    seed: u64,
    codebooks: &Codebooks,
) -> Result<RejectedAv, PrefError> {
    let mut rng = item_rng(seed, id);
    let draw = |eligible: Vec<&PoolItem>, rng: &mut ChaCha8Rng| -> Result<RejectedAv, PrefError> {
        let pick = eligible
            .choose(rng)
            .ok_or_else(|| PrefError::EmptyPool { id: id.to_string(), strategy: strategy.name().to_string() })?;
        let av = store.get(&pick.av_ref).ok_or_else(|| PrefError::UnknownAv(pick.av_ref.clone()))?;
        Ok(RejectedAv { av: av.clone(), source_ref: Some(pick.av_ref.clone()) })
    };
    match strategy {
        NegativeSamplingStrategy::RandomTensor => {
            let mut fresh = |n: usize| (0..n).map(|_| rng.random_range(0..CODEBOOK as u32)).collect::<Vec<_>>();
            let audio_tokens = fresh(chosen.audio_tokens.len());
            let video_tokens = fresh(chosen.video_tokens.len());
            Ok(RejectedAv { av: AvInput { audio_tokens, video_tokens }, source_ref: None })
        }
        NegativeSamplingStrategy::RandomVideo => draw(pool.iter().filter(|p| p.av_ref != chosen_ref).collect(), &mut rng),
        NegativeSamplingStrategy::DifferentEmotion => draw(pool.iter().filter(|p| p.emotion != emotion).collect(), &mut rng),
        NegativeSamplingStrategy::Diffuse { noise_step } => {
            let schedule = DiffusionSchedule::default();
            let audio_tokens = diffuse_tokens(&chosen.audio_tokens, &codebooks.audio, noise_step, &schedule, &mut rng);
            let video_tokens = diffuse_tokens(&chosen.video_tokens, &codebooks.video, noise_step, &schedule, &mut rng);
            Ok(RejectedAv { av: AvInput { audio_tokens, video_tokens }, source_ref: None })
        }
    }
}

/// Keeps the chosen stream the prompt does not ask about.
pub fn apply_prompt_modality_mask(chosen: &AvInput, candidate: &AvInput, m: ModalityTag) -> (AvInput, PmpMask) {
    let mask = PmpMask::for_tag(m);
    let out = match mask {
        PmpMask::None => candidate.clone(),
        PmpMask::KeepAudio => AvInput { audio_tokens: chosen.audio_tokens.clone(), video_tokens: candidate.video_tokens.clone() },
        PmpMask::KeepVideo => AvInput { audio_tokens: candidate.audio_tokens.clone(), video_tokens: chosen.video_tokens.clone() },
    };
    (out, mask)
}

/// One training unit. Field names are part of the file format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceRecord {
    pub id: String,
    pub prompt: String,
    pub modality_tag: ModalityTag,
    pub y_w: String,
    pub y_l_vr: String,
    pub y_l_er: String,
    pub emotion: EmotionLabel,
    pub chosen_av_ref: String,
    pub rejected_av_ref: String,
    pub strategy: NegativeSamplingStrategy,
    pub pmp_mask: PmpMask,
}

impl PreferenceRecord {
    pub fn validate(&self) -> Result<(), PrefError> {
        let bad = |message: &str| Err(PrefError::Invariant { id: self.id.clone(), message: message.to_string() });
        if self.y_l_vr.trim().is_empty() || self.y_l_er.trim().is_empty() || self.y_w.trim().is_empty() {
            return bad("empty response");
        }
        if self.y_l_vr == self.y_w {
            return bad("y_l_vr equals y_w");
        }
        if self.y_l_er == self.y_w {
            return bad("y_l_er equals y_w");
        }
        if PmpMask::for_tag(self.modality_tag) != self.pmp_mask {
            return bad("pmp_mask does not match modality_tag");
        }
        Ok(())
    }
}

/// Checks that the stored rejected input preserves the chosen stream the prompt does not ask about.
pub fn verify_pmp_inputs(record: &PreferenceRecord, store: &AvStore) -> Result<(), PrefError> {
    record.validate()?;
    let chosen = store.get(&record.chosen_av_ref).ok_or_else(|| PrefError::UnknownAv(record.chosen_av_ref.clone()))?;
    let rejected = store.get(&record.rejected_av_ref).ok_or_else(|| PrefError::UnknownAv(record.rejected_av_ref.clone()))?;
    let ok = match record.pmp_mask {
        PmpMask::None => true,
        PmpMask::KeepAudio => rejected.audio_tokens == chosen.audio_tokens,
        PmpMask::KeepVideo => rejected.video_tokens == chosen.video_tokens,
    };
    if ok {
        Ok(())
    } else {
        Err(PrefError::Invariant { id: record.id.clone(), message: "rejected input alters the unprompted modality".into() })
    }
}

pub fn save_records(path: &Path, records: &[PreferenceRecord]) -> Result<(), IoError> {
    io::write_jsonl(path, records)
}

pub fn load_records(path: &Path) -> Result<Vec<PreferenceRecord>, IoError> {
    io::read_jsonl(path)
}

/// Which prompt family a source answer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTask {
    AudioReasoning,
    VisualReasoning,
    ModalityAgreement,
}

impl SourceTask {
    pub fn tag(self) -> ModalityTag {
        match self {
            SourceTask::AudioReasoning => ModalityTag::Audio,
            SourceTask::VisualReasoning => ModalityTag::Visual,
            SourceTask::ModalityAgreement => ModalityTag::AudioVisual,
        }
    }

    pub fn template(self) -> templates::Template {
        match self {
            SourceTask::AudioReasoning => templates::PREF_AUDIO_REASONING,
            SourceTask::VisualReasoning => templates::PREF_VISUAL_REASONING,
            SourceTask::ModalityAgreement => templates::PREF_MODALITY_AGREEMENT,
        }
    }
}

/// A question with its correct answer, from which a record is derived.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceSource {
    pub id: String,
    pub video_ref: String,
    pub task: SourceTask,
    pub emotion: EmotionLabel,
    pub question: String,
    pub answer: String,
    pub present_cues: Vec<String>,
}

/// A source that could not be turned into a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantineEntry {
    pub id: String,
    pub stage: String,
    pub attempts: usize,
    pub reason: String,
}

/// Typed rejections for one source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedResponses {
    pub y_l_vr: String,
    pub y_l_er: String,
    pub template_id: String,
}

fn request_rejections(source: &PreferenceSource, annotator: &dyn AnnotatorClient) -> Result<RejectedResponses, AnnotatorError> {
    let template = source.task.template();
    let values: BTreeMap<String, String> = [
        ("video_ref", source.video_ref.clone()),
        ("question", source.question.clone()),
        ("answer", source.answer.clone()),
        ("present_cues", source.present_cues.join("; ")),
        ("emotion", source.emotion.as_str().to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let req = AnnotatorRequest::render(&template, values)?;
    let reply = annotator.complete(&req)?;
    let v = annotator::parse_json_reply(&req.template_id, &reply)?;
    Ok(RejectedResponses {
        y_l_vr: annotator::json_str(&req.template_id, &v, "vr")?,
        y_l_er: annotator::json_str(&req.template_id, &v, "er")?,
        template_id: req.template_id,
    })
}

/// Asks the annotator for both rejections, retrying failures and invariant violations.
pub fn build_preference_record(
    source: &PreferenceSource,
    annotator: &dyn AnnotatorClient,
    max_attempts: usize,
) -> Result<RejectedResponses, QuarantineEntry> {
    let mut reason = String::from("no attempts made");
    for attempt in 1..=max_attempts.max(1) {
        match request_rejections(source, annotator) {
            Ok(r) if r.y_l_vr.trim() == source.answer.trim() => reason = "y_l_vr equals y_w".into(),
            Ok(r) if r.y_l_er.trim() == source.answer.trim() => reason = "y_l_er equals y_w".into(),
            Ok(r) if r.y_l_vr.trim().is_empty() || r.y_l_er.trim().is_empty() => reason = "empty rejection".into(),
            Ok(r) => return Ok(r),
            Err(e) => reason = e.to_string(),
        }
        log::warn!("{}: attempt {attempt} failed: {reason}", source.id);
    }
    Err(QuarantineEntry { id: source.id.clone(), stage: "rejected_responses".into(), attempts: max_attempts.max(1), reason })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildConfig {
    pub strategy: NegativeSamplingStrategy,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self { strategy: NegativeSamplingStrategy::default(), max_attempts: 3, seed: 0 }
    }
}

/// Records, the rejected inputs they reference, and quarantined sources.
#[derive(Debug, Clone, Default)]
pub struct PreferenceSet {
    pub records: Vec<PreferenceRecord>,
    pub rejected: AvStore,
    pub quarantine: Vec<QuarantineEntry>,
}

pub fn rejected_ref(id: &str) -> String {
    format!("{id}#rejected")
}

/// Builds one record per source; per-item randomness derives from `(cfg.seed, id)`.
pub fn build_preference_set(
    sources: &[PreferenceSource],
    store: &AvStore,
    pool: &[PoolItem],
    annotator: &dyn AnnotatorClient,
    codebooks: &Codebooks,
    cfg: &BuildConfig,
) -> PreferenceSet {
    let mut out = PreferenceSet::default();
    for src in sources {
        let quarantine = |reason: String, stage: &str| QuarantineEntry {
            id: src.id.clone(),
            stage: stage.to_string(),
            attempts: 1,
            reason,
        };
        let chosen = match store.get(&src.video_ref) {
            Some(c) => c,
            None => {
                out.quarantine.push(quarantine(format!("unknown clip {}", src.video_ref), "chosen_input"));
                continue;
            }
        };
        let responses = match build_preference_record(src, annotator, cfg.max_attempts) {
            Ok(r) => r,
            Err(q) => {
                out.quarantine.push(q);
                continue;
            }
        };
        let candidate = match select_rejected_av(
            &src.id,
            &src.video_ref,
            src.emotion,
            chosen,
            pool,
            store,
            cfg.strategy,
            cfg.seed,
            codebooks,
        ) {
            Ok(c) => c,
            Err(e) => {
                out.quarantine.push(quarantine(e.to_string(), "rejected_input"));
                continue;
            }
        };
        let tag = src.task.tag();
        let (masked, pmp_mask) = apply_prompt_modality_mask(chosen, &candidate.av, tag);
        let rej_ref = rejected_ref(&src.id);
        out.rejected.insert(rej_ref.clone(), masked);
        out.records.push(PreferenceRecord {
            id: src.id.clone(),
            prompt: src.question.clone(),
            modality_tag: tag,
            y_w: src.answer.clone(),
            y_l_vr: responses.y_l_vr,
            y_l_er: responses.y_l_er,
            emotion: src.emotion,
            chosen_av_ref: src.video_ref.clone(),
            rejected_av_ref: rej_ref,
            strategy: cfg.strategy,
            pmp_mask,
        });
    }
    out
}
