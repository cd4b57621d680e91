//! Request/response interface to captioning and annotation models.
//!
//! Live model clients are out of scope. [`SyntheticAnnotator`] answers from
//! the synthetic cue lexicons, [`Recorder`] captures any client's traffic
//! and [`FixtureReplay`] serves recorded responses keyed by a hash of the
//! template id and rendered prompt.

pub mod templates;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::io::{self, IoError};
use crate::types::{EmotionLabel, Modality};
use crate::world::{self, context_cues, cue_emotion, emotion_cues, item_rng, sha256_hex};
pub use templates::Template;

pub const FIXTURE_FILE: &str = "fixtures.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum AnnotatorError {
    #[error("annotator unavailable: {0}")]
    Unavailable(String),
    #[error("malformed annotator output for {template_id}: {message}")]
    Malformed { template_id: String, message: String },
    #[error("no recorded fixture for {template_id} (key {key})")]
    MissingFixture { template_id: String, key: String },
    #[error("template {template_id} has no value for slot `{slot}`")]
    Template { template_id: String, slot: String },
    #[error("unknown template {0}")]
    UnknownTemplate(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// A rendered prompt plus structured context the synthetic client reads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatorRequest {
    pub template_id: String,
    pub prompt: String,
    pub context: BTreeMap<String, String>,
}

impl AnnotatorRequest {
    /// Renders `template` with `values`; the same map becomes the context.
    pub fn render(template: &Template, values: BTreeMap<String, String>) -> Result<Self, AnnotatorError> {
        Ok(Self { template_id: template.id(), prompt: template.render(&values)?, context: values })
    }

    /// Fixture key: sha256 of the template id and prompt.
    pub fn key(&self) -> String {
        sha256_hex(format!("{}\n{}", self.template_id, self.prompt).as_bytes())
    }

    fn ctx(&self, k: &str) -> Result<&str, AnnotatorError> {
        self.context.get(k).map(String::as_str).ok_or_else(|| AnnotatorError::Malformed {
            template_id: self.template_id.clone(),
            message: format!("request context lacks `{k}`"),
        })
    }
}

pub trait AnnotatorClient: Send + Sync {
    fn complete(&self, req: &AnnotatorRequest) -> Result<String, AnnotatorError>;
    /// Short identifier recorded in provenance.
    fn fingerprint(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub key: String,
    pub template_id: String,
    pub response: String,
}

/// Serves recorded responses; a request without a recording is an error.
#[derive(Debug, Clone, Default)]
pub struct FixtureReplay {
    entries: BTreeMap<String, FixtureEntry>,
    fingerprint: String,
}

impl FixtureReplay {
    pub fn new(entries: impl IntoIterator<Item = FixtureEntry>) -> Self {
        let entries: BTreeMap<String, FixtureEntry> = entries.into_iter().map(|e| (e.key.clone(), e)).collect();
        let mut digest = String::new();
        for e in entries.values() {
            digest.push_str(&e.key);
            digest.push('\t');
            digest.push_str(&e.response);
            digest.push('\n');
        }
        let fingerprint = format!("replay:{}", &sha256_hex(digest.as_bytes())[..16]);
        Self { entries, fingerprint }
    }

    /// Loads `fixtures.jsonl` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, AnnotatorError> {
        let rows: Vec<FixtureEntry> = io::read_jsonl(&dir.join(FIXTURE_FILE))?;
        Ok(Self::new(rows))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl AnnotatorClient for FixtureReplay {
    fn complete(&self, req: &AnnotatorRequest) -> Result<String, AnnotatorError> {
        let key = req.key();
        self.entries
            .get(&key)
            .map(|e| e.response.clone())
            .ok_or(AnnotatorError::MissingFixture { template_id: req.template_id.clone(), key })
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}

/// Wraps a client and keeps every successful exchange.
pub struct Recorder<C> {
    inner: C,
    log: Mutex<BTreeMap<String, FixtureEntry>>,
}

impl<C: AnnotatorClient> Recorder<C> {
    pub fn new(inner: C) -> Self {
        Self { inner, log: Mutex::new(BTreeMap::new()) }
    }

    pub fn entries(&self) -> Vec<FixtureEntry> {
        self.log.lock().expect("recorder lock").values().cloned().collect()
    }

    /// Writes `fixtures.jsonl` into `dir`, sorted by key.
    pub fn save_dir(&self, dir: &Path) -> Result<(), AnnotatorError> {
        io::write_jsonl(&dir.join(FIXTURE_FILE), &self.entries())?;
        Ok(())
    }
}

impl<C: AnnotatorClient> AnnotatorClient for Recorder<C> {
    fn complete(&self, req: &AnnotatorRequest) -> Result<String, AnnotatorError> {
        let response = self.inner.complete(req)?;
        self.log.lock().expect("recorder lock").insert(
            req.key(),
            FixtureEntry { key: req.key(), template_id: req.template_id.clone(), response: response.clone() },
        );
        Ok(response)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
}

impl<T: AnnotatorClient + ?Sized> AnnotatorClient for &T {
    fn complete(&self, req: &AnnotatorRequest) -> Result<String, AnnotatorError> {
        (**self).complete(req)
    }

    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
}

impl<T: AnnotatorClient + ?Sized> AnnotatorClient for Box<T> {
    fn complete(&self, req: &AnnotatorRequest) -> Result<String, AnnotatorError> {
        (**self).complete(req)
    }

    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
}

/// Rule-based stand-in for captioning and annotation models.
///
/// Captions name one lexicon cue for the dominant emotion of a stream plus
/// one emotion-free context cue. Classification looks the cue back up.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticAnnotator;

pub fn parse_modality(s: &str) -> Option<Modality> {
    match s {
        "audio" => Some(Modality::Audio),
        "video" | "visual" => Some(Modality::Video),
        _ => None,
    }
}

pub fn parse_tokens(s: &str) -> Vec<u32> {
    s.split(',').filter_map(|t| t.trim().parse().ok()).collect()
}

pub fn join_tokens(tokens: &[u32]) -> String {
    tokens.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
}

/// Lexicon cues of any emotion that occur in `text`, in lexicon order.
pub fn cues_in(text: &str) -> Vec<&'static str> {
    let mut out = Vec::new();
    for m in [Modality::Audio, Modality::Video] {
        for e in EmotionLabel::ALL {
            out.extend(emotion_cues(m, e).iter().filter(|c| text.contains(*c)));
        }
    }
    out
}

pub fn context_cues_in(text: &str) -> Vec<&'static str> {
    [Modality::Audio, Modality::Video]
        .into_iter()
        .flat_map(|m| context_cues(m).iter().copied())
        .filter(|c| text.contains(c))
        .collect()
}

impl SyntheticAnnotator {
    fn caption(&self, req: &AnnotatorRequest, m: Modality) -> Result<String, AnnotatorError> {
        let tokens = parse_tokens(req.ctx("tokens")?);
        let mut rng = item_rng(0, &req.key());
        if tokens.is_empty() {
            return Ok("no audible sound".to_string());
        }
        let ctx = context_cues(m).choose(&mut rng).expect("context lexicon");
        Ok(match world::dominant_emotion(&tokens) {
            Some(e) => format!("{} with {}", emotion_cues(m, e).choose(&mut rng).expect("cue lexicon"), ctx),
            None => format!("{ctx} and no distinct expression"),
        })
    }

    fn classify(&self, req: &AnnotatorRequest) -> Result<String, AnnotatorError> {
        let caption = req.ctx("caption")?;
        let mut labels: Vec<EmotionLabel> = cues_in(caption).iter().filter_map(|c| cue_emotion(c)).map(|(_, e)| e).collect();
        labels.dedup();
        Ok(match labels.as_slice() {
            [e] => e.as_str().to_string(),
            _ => "none".to_string(),
        })
    }

    fn qa(&self, req: &AnnotatorRequest, m: Modality) -> Result<String, AnnotatorError> {
        let emotion: EmotionLabel = req.ctx("emotion")?.parse().map_err(|e| self.malformed(req, e))?;
        let caption = req.ctx("caption")?;
        let correct = emotion_cues(m, emotion)
            .iter()
            .find(|c| caption.contains(*c))
            .ok_or_else(|| self.malformed(req, "caption has no cue for the emotion"))?;
        let mut rng = item_rng(1, &req.key());
        let others: Vec<EmotionLabel> = EmotionLabel::ALL.into_iter().filter(|&e| e != emotion).collect();
        let distractors: Vec<&str> = others
            .choose_multiple(&mut rng, 3)
            .map(|&e| *emotion_cues(m, e).choose(&mut rng).expect("cue lexicon"))
            .collect();
        let question = match m {
            Modality::Audio => format!("Which sound in the clip shows that the speaker feels {emotion}?"),
            Modality::Video => format!("Which visible detail shows that the person feels {emotion}?"),
        };
        Ok(serde_json::json!({"question": question, "correct": correct, "distractors": distractors}).to_string())
    }

    fn stress(&self, req: &AnnotatorRequest) -> Result<String, AnnotatorError> {
        let m = parse_modality(req.ctx("modality")?).ok_or_else(|| self.malformed(req, "bad modality"))?;
        let emotion: EmotionLabel = req.ctx("emotion")?.parse().map_err(|e| self.malformed(req, e))?;
        let caption = req.ctx("caption")?;
        let mut rng = item_rng(2, &req.key());
        let cue = match req.ctx("subtask")? {
            "no_hallucination" => emotion_cues(m, emotion).iter().find(|c| caption.contains(*c)).copied(),
            "spurious_association" => context_cues(m).iter().find(|c| caption.contains(*c)).copied(),
            "emotion_relevant_hallucination" => {
                let absent: Vec<&str> = emotion_cues(m, emotion).iter().copied().filter(|c| !caption.contains(c)).collect();
                absent.choose(&mut rng).copied()
            }
            other => return Err(self.malformed(req, format!("unknown subtask {other}"))),
        };
        let cue = cue.ok_or_else(|| self.malformed(req, "no cue fits the subtask"))?;
        Ok(serde_json::json!({ "cue": cue }).to_string())
    }

    fn preference(&self, req: &AnnotatorRequest) -> Result<String, AnnotatorError> {
        let answer = req.ctx("answer")?;
        let emotion: EmotionLabel = req.ctx("emotion")?.parse().map_err(|e| self.malformed(req, e))?;
        let present = req.ctx("present_cues")?;
        let cue = *cues_in(answer).first().ok_or_else(|| self.malformed(req, "answer cites no cue"))?;
        let (m, _) = cue_emotion(cue).expect("cue from lexicon");
        let mut rng = item_rng(3, &req.key());
        let spurious = context_cues_in(present)
            .into_iter()
            .filter(|c| context_cues(m).contains(c))
            .collect::<Vec<_>>()
            .first()
            .copied()
            .unwrap_or(context_cues(m)[0]);
        let absent: Vec<&str> = emotion_cues(m, emotion).iter().copied().filter(|c| !present.contains(c)).collect();
        let hallucinated = absent.choose(&mut rng).ok_or_else(|| self.malformed(req, "no absent cue"))?;
        Ok(serde_json::json!({
            "vr": answer.replacen(cue, spurious, 1),
            "er": answer.replacen(cue, hallucinated, 1),
        })
        .to_string())
    }

    fn text_guess(&self, req: &AnnotatorRequest) -> Result<String, AnnotatorError> {
        let question = req.ctx("question")?.to_lowercase();
        let options: Vec<&str> = req.ctx("options")?.lines().collect();
        let named = EmotionLabel::ALL.into_iter().find(|e| question.contains(e.as_str()));
        let pick = named
            .and_then(|e| {
                options.iter().position(|o| cues_in(o).iter().any(|c| cue_emotion(c).map(|(_, ce)| ce) == Some(e)))
            })
            .unwrap_or(0);
        Ok(((b'A' + pick as u8) as char).to_string())
    }

    fn malformed(&self, req: &AnnotatorRequest, msg: impl std::fmt::Display) -> AnnotatorError {
        AnnotatorError::Malformed { template_id: req.template_id.clone(), message: msg.to_string() }
    }
}

impl AnnotatorClient for SyntheticAnnotator {
    fn complete(&self, req: &AnnotatorRequest) -> Result<String, AnnotatorError> {
        let t = templates::by_id(&req.template_id).ok_or_else(|| AnnotatorError::UnknownTemplate(req.template_id.clone()))?;
        match t.name {
            "caption_audio" => self.caption(req, Modality::Audio),
            "caption_video" => self.caption(req, Modality::Video),
            "classify_emotion" => self.classify(req),
            "qa_reasoning_audio" => self.qa(req, Modality::Audio),
            "qa_reasoning_visual" => self.qa(req, Modality::Video),
            "stress_cue" => self.stress(req),
            "pref_audio_reasoning" | "pref_visual_reasoning" | "pref_modality_agreement" => self.preference(req),
            "text_guess" => self.text_guess(req),
            other => Err(AnnotatorError::UnknownTemplate(other.to_string())),
        }
    }

    fn fingerprint(&self) -> String {
        "synthetic:v1".to_string()
    }
}

/// Parses a JSON object reply, naming the template on failure.
pub fn parse_json_reply(template_id: &str, reply: &str) -> Result<serde_json::Value, AnnotatorError> {
    let v: serde_json::Value = serde_json::from_str(reply.trim())
        .map_err(|e| AnnotatorError::Malformed { template_id: template_id.to_string(), message: e.to_string() })?;
    if v.is_object() {
        Ok(v)
    } else {
        Err(AnnotatorError::Malformed { template_id: template_id.to_string(), message: "expected a JSON object".into() })
    }
}

pub fn json_str(template_id: &str, v: &serde_json::Value, key: &str) -> Result<String, AnnotatorError> {
    v.get(key).and_then(|s| s.as_str()).map(str::to_string).ok_or_else(|| AnnotatorError::Malformed {
        template_id: template_id.to_string(),
        message: format!("missing string field `{key}`"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::band_token;

    fn values(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn caption_request(tokens: &[u32]) -> AnnotatorRequest {
        AnnotatorRequest::render(
            &templates::CAPTION_VIDEO,
            values(&[
                ("video_ref", format!("vid-{}", join_tokens(tokens))),
                ("frames", "8".into()),
                ("tokens", join_tokens(tokens)),
            ]),
        )
        .unwrap()
    }

    #[test]
    fn caption_then_classify_recovers_band_emotion() {
        let tokens: Vec<u32> = (0..8).map(|k| band_token(EmotionLabel::Fear, k)).collect();
        let caption = SyntheticAnnotator.complete(&caption_request(&tokens)).unwrap();
        let req = AnnotatorRequest::render(
            &templates::CLASSIFY_EMOTION,
            values(&[("modality", "video".into()), ("caption", caption), ("labels", "...".into())]),
        )
        .unwrap();
        assert_eq!(SyntheticAnnotator.complete(&req).unwrap(), "fear");
    }

    #[test]
    fn neutral_stream_classifies_as_none() {
        let caption = SyntheticAnnotator.complete(&caption_request(&[30, 31, 29, 28, 30, 31, 29, 28])).unwrap();
        assert!(cues_in(&caption).is_empty());
    }

    #[test]
    fn recorder_then_replay_reproduces_responses() {
        let rec = Recorder::new(SyntheticAnnotator);
        let reqs: Vec<_> = (0..4usize).map(|i| caption_request(&[band_token(EmotionLabel::Sad, i); 8])).collect();
        let live: Vec<String> = reqs.iter().map(|r| rec.complete(r).unwrap()).collect();
        let dir = tempfile::tempdir().unwrap();
        rec.save_dir(dir.path()).unwrap();
        let replay = FixtureReplay::load_dir(dir.path()).unwrap();
        for (r, l) in reqs.iter().zip(&live) {
            assert_eq!(&replay.complete(r).unwrap(), l);
        }
        let other = caption_request(&[band_token(EmotionLabel::Happy, 0); 8]);
        assert!(matches!(replay.complete(&other), Err(AnnotatorError::MissingFixture { .. })));
        assert!(replay.fingerprint().starts_with("replay:"));
    }

    #[test]
    fn key_depends_on_template_and_prompt() {
        let a = caption_request(&[1]);
        let mut b = a.clone();
        b.template_id = "caption_video@v2".into();
        assert_ne!(a.key(), b.key());
        let mut c = a.clone();
        c.context.insert("extra".into(), "x".into());
        assert_eq!(a.key(), c.key());
    }

    #[test]
    fn preference_reply_swaps_the_cited_cue() {
        let answer = "The light laughter shows that the speaker feels happy.".to_string();
        let req = AnnotatorRequest::render(
            &templates::PREF_AUDIO_REASONING,
            values(&[
                ("video_ref", "v".into()),
                ("question", "q".into()),
                ("answer", answer.clone()),
                ("present_cues", "light laughter; a ticking clock".into()),
                ("emotion", "happy".into()),
            ]),
        )
        .unwrap();
        let v = parse_json_reply(&req.template_id, &SyntheticAnnotator.complete(&req).unwrap()).unwrap();
        let vr = json_str(&req.template_id, &v, "vr").unwrap();
        let er = json_str(&req.template_id, &v, "er").unwrap();
        assert!(vr.contains("a ticking clock") && vr.ends_with("feels happy."));
        assert!(!er.contains("light laughter") && er.ends_with("feels happy."));
        assert_ne!(vr, answer);
        assert_ne!(er, answer);
    }
}
