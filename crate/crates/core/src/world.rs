//! Synthetic audiovisual sources.
//!
//! Audio and video are discrete token streams. Each emotion owns a band of
//! four codebook entries; the last entries of each codebook carry no
//! emotional content. A clip "expresses" an emotion in a modality when the
//! majority of its tokens fall in that emotion's band.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::io::{self, IoError};
use crate::types::{EmotionLabel, Modality};

/// Video frames sampled per clip.
pub const FRAMES: usize = 8;
/// Audio segments per clip.
pub const AUDIO_SEGMENTS: usize = 4;
pub const BAND: usize = 4;
pub const CODEBOOK: usize = 32;
/// First codebook entry that belongs to no emotion band.
pub const NEUTRAL_BASE: u32 = (EmotionLabel::ALL.len() * BAND) as u32;

/// Derives an independent 64-bit seed from a pipeline seed and a string key.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn item_rng(seed: u64, key: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, key))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn band_token(e: EmotionLabel, k: usize) -> u32 {
    (e.index() * BAND + k % BAND) as u32
}

pub fn token_emotion(t: u32) -> Option<EmotionLabel> {
    if t < NEUTRAL_BASE {
        EmotionLabel::from_index(t as usize / BAND)
    } else {
        None
    }
}

/// Emotion whose band holds a strict majority of `tokens`.
pub fn dominant_emotion(tokens: &[u32]) -> Option<EmotionLabel> {
    let mut counts = [0usize; 7];
    for &t in tokens {
        if let Some(e) = token_emotion(t) {
            counts[e.index()] += 1;
        }
    }
    let (best, &n) = counts.iter().enumerate().max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i)))?;
    (2 * n > tokens.len()).then(|| EmotionLabel::from_index(best)).flatten()
}

pub fn banded_stream(rng: &mut impl Rng, e: EmotionLabel, len: usize) -> Vec<u32> {
    (0..len).map(|_| band_token(e, rng.random_range(0..BAND))).collect()
}

pub fn neutral_stream(rng: &mut impl Rng, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(NEUTRAL_BASE..CODEBOOK as u32)).collect()
}

/// Discrete audio and video streams of one clip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvInput {
    pub audio_tokens: Vec<u32>,
    pub video_tokens: Vec<u32>,
}

impl AvInput {
    pub fn stream(&self, m: Modality) -> &[u32] {
        match m {
            Modality::Audio => &self.audio_tokens,
            Modality::Video => &self.video_tokens,
        }
    }

    pub fn has_audio(&self) -> bool {
        !self.audio_tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct AvEntry {
    av_ref: String,
    audio_tokens: Vec<u32>,
    video_tokens: Vec<u32>,
}

/// Clips addressed by reference string.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AvStore {
    entries: BTreeMap<String, AvInput>,
}

impl AvStore {
    pub fn insert(&mut self, av_ref: impl Into<String>, av: AvInput) {
        self.entries.insert(av_ref.into(), av);
    }

    pub fn get(&self, av_ref: &str) -> Option<&AvInput> {
        self.entries.get(av_ref)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &AvInput)> {
        self.entries.iter()
    }

    pub fn extend(&mut self, other: AvStore) {
        self.entries.extend(other.entries);
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        let rows: Vec<AvEntry> = self
            .entries
            .iter()
            .map(|(k, v)| AvEntry {
                av_ref: k.clone(),
                audio_tokens: v.audio_tokens.clone(),
                video_tokens: v.video_tokens.clone(),
            })
            .collect();
        io::write_jsonl(path, &rows)
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let rows: Vec<AvEntry> = io::read_jsonl(path)?;
        let mut s = AvStore::default();
        for r in rows {
            s.insert(r.av_ref, AvInput { audio_tokens: r.audio_tokens, video_tokens: r.video_tokens });
        }
        Ok(s)
    }
}

/// One line of a benchmark input manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub video_ref: String,
    pub gt_emotion: EmotionLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtitle: Option<String>,
}

/// Emotion cue phrases an annotator may report for a modality.
pub fn emotion_cues(m: Modality, e: EmotionLabel) -> &'static [&'static str] {
    use EmotionLabel::*;
    match (m, e) {
        (Modality::Audio, Happy) => &["light laughter", "an upbeat bouncing tone", "a bright lively voice"],
        (Modality::Audio, Sad) => &["quiet sobbing", "a slow faltering voice", "a heavy sigh"],
        (Modality::Audio, Neutral) => &["an even steady voice", "a flat measured tone", "calm unhurried speech"],
        (Modality::Audio, Angry) => &["a raised harsh voice", "shouting", "clipped forceful words"],
        (Modality::Audio, Surprise) => &["a sudden gasp", "a sharp rising pitch", "an astonished exclamation"],
        (Modality::Audio, Disgust) => &["a scoffing grunt", "a repulsed groan", "a sneering tone"],
        (Modality::Audio, Fear) => &["a trembling voice", "rapid shallow breathing", "a hushed panicked whisper"],
        (Modality::Video, Happy) => &["a broad smile", "raised cheeks", "bright crinkled eyes"],
        (Modality::Video, Sad) => &["tears on the cheeks", "drooping eyelids", "downturned lips"],
        (Modality::Video, Neutral) => &["a relaxed face", "a steady gaze", "still posture"],
        (Modality::Video, Angry) => &["furrowed brows", "clenched jaw", "glaring eyes"],
        (Modality::Video, Surprise) => &["widened eyes", "an open mouth", "raised eyebrows"],
        (Modality::Video, Disgust) => &["a wrinkled nose", "a curled upper lip", "a turned away face"],
        (Modality::Video, Fear) => &["darting eyes", "a tense hunched posture", "stretched lips"],
    }
}

/// Cues present in a clip that carry no emotional meaning.
pub fn context_cues(m: Modality) -> &'static [&'static str] {
    match m {
        Modality::Audio => &["distant traffic noise", "soft background music", "a ticking clock", "wind against a microphone"],
        Modality::Video => &["a blue shirt", "a bookshelf behind the person", "dim indoor lighting", "a window with curtains"],
    }
}

/// Emotion named by a cue phrase, if it belongs to any lexicon.
pub fn cue_emotion(cue: &str) -> Option<(Modality, EmotionLabel)> {
    for m in [Modality::Audio, Modality::Video] {
        for e in EmotionLabel::ALL {
            if emotion_cues(m, e).contains(&cue) {
                return Some((m, e));
            }
        }
    }
    None
}

/// Manifest plus clip store for a synthetic source corpus.
#[derive(Debug, Clone, Default)]
pub struct SyntheticCorpus {
    pub manifest: Vec<ManifestEntry>,
    pub store: AvStore,
}

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusSpec {
    pub videos: usize,
    /// Probability that each modality expresses the ground-truth emotion.
    pub p_express: f64,
    /// Probability that a clip has no audio track.
    pub p_silent: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { videos: 200, p_express: 0.75, p_silent: 0.05 }
    }
}

fn modality_stream(rng: &mut ChaCha8Rng, gt: EmotionLabel, p: f64, len: usize) -> Vec<u32> {
    if rng.random_bool(p) {
        return banded_stream(rng, gt, len);
    }
    if rng.random_bool(0.5) {
        return neutral_stream(rng, len);
    }
    let others: Vec<EmotionLabel> = EmotionLabel::ALL.into_iter().filter(|&e| e != gt).collect();
    let e = *others.choose(rng).expect("six other emotions");
    banded_stream(rng, e, len)
}

pub fn synthesize_corpus(spec: &CorpusSpec, seed: u64) -> SyntheticCorpus {
    let mut out = SyntheticCorpus::default();
    for i in 0..spec.videos {
        let video_ref = format!("vid{i:05}");
        let mut rng = item_rng(seed, &video_ref);
        let gt = EmotionLabel::ALL[rng.random_range(0..EmotionLabel::ALL.len())];
        let silent = rng.random_bool(spec.p_silent);
        let audio = modality_stream(&mut rng, gt, spec.p_express, AUDIO_SEGMENTS);
        let video = modality_stream(&mut rng, gt, spec.p_express, FRAMES);
        let subtitle = (!silent).then(|| format!("line {i}"));
        out.store.insert(
            video_ref.clone(),
            AvInput { audio_tokens: if silent { Vec::new() } else { audio }, video_tokens: video },
        );
        out.manifest.push(ManifestEntry { video_ref, gt_emotion: gt, subtitle });
    }
    out
}
