//! Multiple-choice benchmark construction: captioning, caption-level
//! emotion verification, templated question generation, text-only
//! filtering, answer balancing and summary statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotator::{self, templates, AnnotatorClient, AnnotatorError, AnnotatorRequest};
use crate::prefdata::{PreferenceSource, SourceTask};
use crate::types::{EmotionLabel, Modality};
use crate::world::{item_rng, AvInput, AvStore, ManifestEntry, AUDIO_SEGMENTS, FRAMES};

pub const YES: &str = "Yes";
pub const NO: &str = "No";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ReasoningBasicAudio,
    ReasoningBasicVisual,
    ModalityAgreement,
    StressAudio,
    StressVisual,
}

impl Task {
    pub const ALL: [Task; 5] =
        [Task::ReasoningBasicAudio, Task::ReasoningBasicVisual, Task::ModalityAgreement, Task::StressAudio, Task::StressVisual];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::ReasoningBasicAudio => "reasoning_basic_audio",
            Task::ReasoningBasicVisual => "reasoning_basic_visual",
            Task::ModalityAgreement => "modality_agreement",
            Task::StressAudio => "stress_audio",
            Task::StressVisual => "stress_visual",
        }
    }

    pub fn num_choices(self) -> usize {
        match self {
            Task::ReasoningBasicAudio | Task::ReasoningBasicVisual => 4,
            _ => 2,
        }
    }

    pub fn is_yes_no(self) -> bool {
        self.num_choices() == 2
    }

    pub fn is_stress(self) -> bool {
        matches!(self, Task::StressAudio | Task::StressVisual)
    }

    /// The single modality the task asks about, if any.
    pub fn modality(self) -> Option<Modality> {
        match self {
            Task::ReasoningBasicAudio | Task::StressAudio => Some(Modality::Audio),
            Task::ReasoningBasicVisual | Task::StressVisual => Some(Modality::Video),
            Task::ModalityAgreement => None,
        }
    }

    /// Row label in the statistics table.
    pub fn label(self) -> &'static str {
        match self {
            Task::ReasoningBasicAudio => "Reasoning Basic / Audio",
            Task::ReasoningBasicVisual => "Reasoning Basic / Visual",
            Task::ModalityAgreement => "Modality Agreement",
            Task::StressAudio => "Reasoning Stress Test / Audio",
            Task::StressVisual => "Reasoning Stress Test / Visual",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL.into_iter().find(|t| t.as_str() == s).ok_or_else(|| format!("unknown task `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subtask {
    None,
    NoHallucination,
    SpuriousAssociation,
    EmotionRelevantHallucination,
}

impl Subtask {
    pub const STRESS: [Subtask; 3] =
        [Subtask::NoHallucination, Subtask::SpuriousAssociation, Subtask::EmotionRelevantHallucination];

    pub fn as_str(self) -> &'static str {
        match self {
            Subtask::None => "none",
            Subtask::NoHallucination => "no_hallucination",
            Subtask::SpuriousAssociation => "spurious_association",
            Subtask::EmotionRelevantHallucination => "emotion_relevant_hallucination",
        }
    }

    /// The answer a stress item of this subtask must have.
    pub fn forced_answer(self) -> Option<&'static str> {
        match self {
            Subtask::None => None,
            Subtask::NoHallucination => Some(YES),
            Subtask::SpuriousAssociation | Subtask::EmotionRelevantHallucination => Some(NO),
        }
    }

    fn instruction(self) -> &'static str {
        match self {
            Subtask::NoHallucination => "Name one cue from the caption that shows this emotion.",
            Subtask::SpuriousAssociation => "Name one cue from the caption that has nothing to do with this emotion.",
            Subtask::EmotionRelevantHallucination => {
                "Name one cue that often goes with this emotion but does not appear in the caption."
            }
            Subtask::None => "",
        }
    }
}

/// One audit-trail step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<String>,
    /// Fixture key of the annotator exchange.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ProvenanceEntry {
    pub fn note(stage: &str, note: impl Into<String>) -> Self {
        Self { stage: stage.to_string(), template_id: None, fixture_key: None, annotator: None, note: Some(note.into()) }
    }

    fn exchange(stage: &str, req: &AnnotatorRequest, annotator: &dyn AnnotatorClient) -> Self {
        Self {
            stage: stage.to_string(),
            template_id: Some(req.template_id.clone()),
            fixture_key: Some(req.key()),
            annotator: Some(annotator.fingerprint()),
            note: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkItem {
    pub id: String,
    pub video_ref: String,
    pub task: Task,
    pub subtask: Subtask,
    pub question: String,
    pub choices: Vec<String>,
    pub answer_index: usize,
    pub emotion: EmotionLabel,
    pub provenance: Vec<ProvenanceEntry>,
}

impl BenchmarkItem {
    pub fn answer(&self) -> &str {
        &self.choices[self.answer_index]
    }

    pub fn answer_is_yes(&self) -> bool {
        self.task.is_yes_no() && self.answer() == YES
    }

    /// Structural invariants: choice count, Yes/No rendering and subtask-forced answers.
    pub fn validate(&self) -> Result<(), String> {
        if self.choices.len() != self.task.num_choices() {
            return Err(format!("{}: {} choices for {}", self.id, self.choices.len(), self.task.as_str()));
        }
        if self.answer_index >= self.choices.len() {
            return Err(format!("{}: answer index {} out of range", self.id, self.answer_index));
        }
        if self.task.is_yes_no() && self.choices != [YES, NO] {
            return Err(format!("{}: Yes/No task with choices {:?}", self.id, self.choices));
        }
        match (self.task.is_stress(), self.subtask) {
            (true, Subtask::None) => return Err(format!("{}: stress item without subtask", self.id)),
            (false, s) if s != Subtask::None => return Err(format!("{}: subtask on a non-stress task", self.id)),
            _ => {}
        }
        if let Some(forced) = self.subtask.forced_answer() {
            if self.answer() != forced {
                return Err(format!("{}: {} must be answered {forced}", self.id, self.subtask.as_str()));
            }
        }
        let distinct: BTreeSet<&String> = self.choices.iter().collect();
        if distinct.len() != self.choices.len() {
            return Err(format!("{}: duplicate choices", self.id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub audio_caption: String,
    pub video_caption: String,
    pub audio_emotion: Option<EmotionLabel>,
    pub video_emotion: Option<EmotionLabel>,
    pub gt_emotion: EmotionLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verification {
    pub keep: bool,
    pub audio_eligible: bool,
    pub video_eligible: bool,
}

impl Verification {
    /// Both captions predict the ground truth.
    pub fn modalities_agree(&self) -> bool {
        self.audio_eligible && self.video_eligible
    }

    pub fn eligible(&self, m: Modality) -> bool {
        match m {
            Modality::Audio => self.audio_eligible,
            Modality::Video => self.video_eligible,
        }
    }
}

/// Keeps a clip when at least one caption's predicted emotion matches the label.
pub fn verify_captions(pair: &CaptionPair) -> Verification {
    let audio_eligible = pair.audio_emotion == Some(pair.gt_emotion);
    let video_eligible = pair.video_emotion == Some(pair.gt_emotion);
    Verification { keep: audio_eligible || video_eligible, audio_eligible, video_eligible }
}

/// A manifest clip after captioning and verification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionedVideo {
    pub video_ref: String,
    pub has_audio: bool,
    pub pair: CaptionPair,
    pub verification: Verification,
    pub provenance: Vec<ProvenanceEntry>,
}

fn kv(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn classify(
    caption: &str,
    m: Modality,
    annotator: &dyn AnnotatorClient,
    prov: &mut Vec<ProvenanceEntry>,
) -> Result<Option<EmotionLabel>, AnnotatorError> {
    let labels = EmotionLabel::ALL.iter().map(|e| e.as_str()).collect::<Vec<_>>().join(", ");
    let req = AnnotatorRequest::render(
        &templates::CLASSIFY_EMOTION,
        kv(&[("modality", m.as_str().into()), ("caption", caption.into()), ("labels", labels)]),
    )?;
    let reply = annotator.complete(&req)?;
    prov.push(ProvenanceEntry::exchange("classify", &req, annotator));
    let word = reply.trim().trim_matches('.').to_lowercase();
    if word == "none" {
        return Ok(None);
    }
    word.parse()
        .map(Some)
        .map_err(|e: crate::types::ParseEnumError| AnnotatorError::Malformed { template_id: req.template_id, message: e.to_string() })
}

/// Captions both streams independently and classifies each caption.
pub fn caption_video(entry: &ManifestEntry, av: &AvInput, annotator: &dyn AnnotatorClient) -> Result<CaptionedVideo, AnnotatorError> {
    let mut prov = Vec::new();
    let has_audio = av.has_audio();
    let video_req = AnnotatorRequest::render(
        &templates::CAPTION_VIDEO,
        kv(&[
            ("video_ref", entry.video_ref.clone()),
            ("frames", FRAMES.to_string()),
            ("tokens", annotator::join_tokens(&av.video_tokens)),
        ]),
    )?;
    let video_caption = annotator.complete(&video_req)?.trim().to_string();
    prov.push(ProvenanceEntry::exchange("caption", &video_req, annotator));
    let video_emotion = classify(&video_caption, Modality::Video, annotator, &mut prov)?;

    let (audio_caption, audio_emotion) = if has_audio {
        let req = AnnotatorRequest::render(
            &templates::CAPTION_AUDIO,
            kv(&[
                ("video_ref", entry.video_ref.clone()),
                ("segments", AUDIO_SEGMENTS.to_string()),
                ("tokens", annotator::join_tokens(&av.audio_tokens)),
            ]),
        )?;
        let c = annotator.complete(&req)?.trim().to_string();
        prov.push(ProvenanceEntry::exchange("caption", &req, annotator));
        let e = classify(&c, Modality::Audio, annotator, &mut prov)?;
        (c, e)
    } else {
        prov.push(ProvenanceEntry::note("caption", "no audio track; audio tasks ineligible"));
        (String::new(), None)
    };
    let pair = CaptionPair { audio_caption, video_caption, audio_emotion, video_emotion, gt_emotion: entry.gt_emotion };
    let verification = verify_captions(&pair);
    Ok(CaptionedVideo { video_ref: entry.video_ref.clone(), has_audio, pair, verification, provenance: prov })
}

fn yes_no() -> Vec<String> {
    vec![YES.to_string(), NO.to_string()]
}

pub const AGREEMENT_QUESTION: &str = "Do the audio and the visual cues express the same emotion for the character?";

/// Whether `task` can be generated from this clip at all.
pub fn task_eligible(c: &CaptionedVideo, task: Task) -> bool {
    if !c.verification.keep {
        return false;
    }
    match task {
        Task::ReasoningBasicAudio => c.verification.audio_eligible,
        Task::ReasoningBasicVisual => c.verification.video_eligible,
        Task::ModalityAgreement | Task::StressAudio => c.has_audio,
        Task::StressVisual => true,
    }
}

/// Stress subtasks generated for a clip: the no-hallucination probe when the
/// modality is eligible, plus one seeded pick of the two "No" subtasks.
pub fn stress_subtasks(c: &CaptionedVideo, m: Modality, seed: u64) -> Vec<Subtask> {
    let mut out = Vec::new();
    if c.verification.eligible(m) {
        out.push(Subtask::NoHallucination);
    }
    let mut rng = item_rng(seed, &format!("{}:{}:subtask", c.video_ref, m.as_str()));
    out.push(if rng.random_bool(0.5) { Subtask::SpuriousAssociation } else { Subtask::EmotionRelevantHallucination });
    out
}

fn caption_of(c: &CaptionedVideo, m: Modality) -> &str {
    match m {
        Modality::Audio => &c.pair.audio_caption,
        Modality::Video => &c.pair.video_caption,
    }
}

/// Builds the items of one task for one clip.
pub fn generate_items(c: &CaptionedVideo, task: Task, annotator: &dyn AnnotatorClient, seed: u64) -> Result<Vec<BenchmarkItem>, AnnotatorError> {
    if !task_eligible(c, task) {
        return Ok(Vec::new());
    }
    let gt = c.pair.gt_emotion;
    let base = |id: String, subtask, question, choices, answer_index, prov| BenchmarkItem {
        id,
        video_ref: c.video_ref.clone(),
        task,
        subtask,
        question,
        choices,
        answer_index,
        emotion: gt,
        provenance: prov,
    };
    let mut prov = c.provenance.clone();
    match task {
        Task::ModalityAgreement => {
            let answer = if c.verification.modalities_agree() { 0 } else { 1 };
            prov.push(ProvenanceEntry::note("generate", "answer computed from caption verification"));
            Ok(vec![base(format!("{}:{}", c.video_ref, task.as_str()), Subtask::None, AGREEMENT_QUESTION.to_string(), yes_no(), answer, prov)])
        }
        Task::ReasoningBasicAudio | Task::ReasoningBasicVisual => {
            let m = task.modality().expect("single-modality task");
            let template = if m == Modality::Audio { templates::QA_REASONING_AUDIO } else { templates::QA_REASONING_VISUAL };
            let req = AnnotatorRequest::render(
                &template,
                kv(&[("video_ref", c.video_ref.clone()), ("caption", caption_of(c, m).to_string()), ("emotion", gt.as_str().into())]),
            )?;
            let reply = annotator.complete(&req)?;
            let v = annotator::parse_json_reply(&req.template_id, &reply)?;
            let question = annotator::json_str(&req.template_id, &v, "question")?;
            let correct = annotator::json_str(&req.template_id, &v, "correct")?;
            let distractors: Vec<String> = v
                .get("distractors")
                .and_then(|d| d.as_array())
                .map(|a| a.iter().filter_map(|s| s.as_str().map(str::to_string)).collect())
                .unwrap_or_default();
            let mut choices = vec![correct];
            choices.extend(distractors);
            let distinct: BTreeSet<&String> = choices.iter().collect();
            if choices.len() != 4 || distinct.len() != 4 {
                return Err(AnnotatorError::Malformed {
                    template_id: req.template_id,
                    message: "expected one correct option and three distinct distractors".into(),
                });
            }
            prov.push(ProvenanceEntry::exchange("generate", &req, annotator));
            Ok(vec![base(format!("{}:{}", c.video_ref, task.as_str()), Subtask::None, question, choices, 0, prov)])
        }
        Task::StressAudio | Task::StressVisual => {
            let m = task.modality().expect("single-modality task");
            let mut out = Vec::new();
            for sub in stress_subtasks(c, m, seed) {
                let req = AnnotatorRequest::render(
                    &templates::STRESS_CUE,
                    kv(&[
                        ("modality", m.as_str().into()),
                        ("video_ref", c.video_ref.clone()),
                        ("caption", caption_of(c, m).to_string()),
                        ("emotion", gt.as_str().into()),
                        ("instruction", sub.instruction().into()),
                        ("subtask", sub.as_str().into()),
                    ]),
                )?;
                let reply = annotator.complete(&req)?;
                let v = annotator::parse_json_reply(&req.template_id, &reply)?;
                let cue = annotator::json_str(&req.template_id, &v, "cue")?;
                let question = format!("Does the {cue} in the {} indicate that the character feels {gt}?", m.as_str());
                let answer = if sub.forced_answer() == Some(YES) { 0 } else { 1 };
                let mut p = prov.clone();
                p.push(ProvenanceEntry::exchange("generate", &req, annotator));
                out.push(base(format!("{}:{}:{}", c.video_ref, task.as_str(), sub.as_str()), sub, question, yes_no(), answer, p));
            }
            Ok(out)
        }
    }
}

/// Answers a question from its text alone.
pub trait TextGuesser {
    fn name(&self) -> String;
    fn guess(&self, item: &BenchmarkItem) -> Result<usize, String>;
}

/// Uniform guess, seeded per item.
#[derive(Debug, Clone)]
pub struct RandomGuesser {
    pub name: String,
    pub seed: u64,
}

impl TextGuesser for RandomGuesser {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn guess(&self, item: &BenchmarkItem) -> Result<usize, String> {
        if item.choices.is_empty() {
            return Err("no choices".into());
        }
        Ok(item_rng(self.seed, &item.id).random_range(0..item.choices.len()))
    }
}

/// Text-only guess through an annotator client.
pub struct AnnotatorGuesser<'a> {
    pub client: &'a dyn AnnotatorClient,
}

impl TextGuesser for AnnotatorGuesser<'_> {
    fn name(&self) -> String {
        format!("annotator:{}", self.client.fingerprint())
    }

    fn guess(&self, item: &BenchmarkItem) -> Result<usize, String> {
        let options = item
            .choices
            .iter()
            .enumerate()
            .map(|(i, c)| format!("({}) {c}", (b'A' + i as u8) as char))
            .collect::<Vec<_>>()
            .join("\n");
        let req = AnnotatorRequest::render(&templates::TEXT_GUESS, kv(&[("question", item.question.clone()), ("options", options)]))
            .map_err(|e| e.to_string())?;
        let reply = self.client.complete(&req).map_err(|e| e.to_string())?;
        crate::eval::extract_choice(&reply, &item.choices).ok_or_else(|| format!("unparseable guess `{reply}`"))
    }
}

#[derive(Debug, Clone, Default)]
pub struct FilterOutcome {
    pub retained: Vec<BenchmarkItem>,
    pub removed: Vec<BenchmarkItem>,
}

/// Removes items every guesser answers correctly without audiovisual input.
/// A guesser error counts as a wrong answer for that item.
pub fn text_only_filter(items: &[BenchmarkItem], guessers: &[&dyn TextGuesser]) -> FilterOutcome {
    assert!(!guessers.is_empty(), "text_only_filter needs at least one guesser");
    let mut out = FilterOutcome::default();
    for item in items {
        let mut correct = 0;
        for g in guessers {
            match g.guess(item) {
                Ok(i) if i == item.answer_index => correct += 1,
                Ok(_) => {}
                Err(e) => log::warn!("guesser {} failed on {}: {e}", g.name(), item.id),
            }
        }
        let mut it = item.clone();
        let all = correct == guessers.len();
        it.provenance.push(ProvenanceEntry::note(
            "text_only_filter",
            format!("{correct}/{} text-only guessers correct; {}", guessers.len(), if all { "removed" } else { "retained" }),
        ));
        if all {
            out.removed.push(it);
        } else {
            out.retained.push(it);
        }
    }
    out
}

/// Balances answer positions of 4-choice items and subsamples Yes/No tasks to 50/50.
pub fn balance_answers(items: &[BenchmarkItem], seed: u64) -> Vec<BenchmarkItem> {
    let mut out: Vec<Option<BenchmarkItem>> = items.iter().cloned().map(Some).collect();
    for task in Task::ALL {
        let idx: Vec<usize> = items.iter().enumerate().filter(|(_, it)| it.task == task).map(|(i, _)| i).collect();
        let mut rng = item_rng(seed, &format!("balance:{}", task.as_str()));
        if task.is_yes_no() {
            let (mut yes, mut no): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| items[i].answer_is_yes());
            let keep = yes.len().min(no.len());
            let majority = if yes.len() > no.len() { &mut yes } else { &mut no };
            majority.shuffle(&mut rng);
            for &i in &majority[keep..] {
                out[i] = None;
            }
            for &i in majority[..keep].iter() {
                if let Some(it) = out[i].as_mut() {
                    it.provenance.push(ProvenanceEntry::note("balance", "kept by Yes/No subsampling"));
                }
            }
        } else {
            let mut order = idx.clone();
            order.shuffle(&mut rng);
            for (rank, &i) in order.iter().enumerate() {
                let it = out[i].as_mut().expect("4-choice items are never dropped");
                let target = rank % it.choices.len();
                let correct = it.choices[it.answer_index].clone();
                let mut others: Vec<String> =
                    it.choices.iter().enumerate().filter(|&(j, _)| j != it.answer_index).map(|(_, c)| c.clone()).collect();
                others.shuffle(&mut item_rng(seed, &it.id));
                others.insert(target, correct);
                it.choices = others;
                it.answer_index = target;
                it.provenance.push(ProvenanceEntry::note("balance", format!("answer placed at position {target}")));
            }
        }
    }
    out.into_iter().flatten().collect()
}

/// External accept/reject decision for one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub item_id: String,
    pub keep: bool,
    #[serde(default)]
    pub note: Option<String>,
}

/// Drops items rejected by an external review; items without a verdict are kept.
pub fn merge_verdicts(items: &[BenchmarkItem], verdicts: &[Verdict]) -> Vec<BenchmarkItem> {
    let by_id: BTreeMap<&str, &Verdict> = verdicts.iter().map(|v| (v.item_id.as_str(), v)).collect();
    items
        .iter()
        .filter_map(|it| match by_id.get(it.id.as_str()) {
            Some(v) if !v.keep => None,
            Some(v) => {
                let mut it = it.clone();
                it.provenance.push(ProvenanceEntry::note("human_verification", v.note.clone().unwrap_or_else(|| "accepted".into())));
                Some(it)
            }
            None => Some(it.clone()),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task: Task,
    pub label: String,
    pub qa: usize,
    pub videos: usize,
    pub random_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub rows: Vec<TaskRow>,
    pub total_qa: usize,
    pub total_videos: usize,
    pub emotion_distribution: BTreeMap<EmotionLabel, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_distribution: Option<BTreeMap<EmotionLabel, f64>>,
    /// Total-variation distance between the item and source emotion distributions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tv_distance: Option<f64>,
}

fn distribution(labels: impl Iterator<Item = EmotionLabel>) -> BTreeMap<EmotionLabel, f64> {
    let mut counts: BTreeMap<EmotionLabel, f64> = EmotionLabel::ALL.iter().map(|&e| (e, 0.0)).collect();
    let mut n = 0.0;
    for e in labels {
        *counts.get_mut(&e).expect("closed label set") += 1.0;
        n += 1.0;
    }
    if n > 0.0 {
        counts.values_mut().for_each(|v| *v /= n);
    }
    counts
}

pub fn total_variation(p: &BTreeMap<EmotionLabel, f64>, q: &BTreeMap<EmotionLabel, f64>) -> f64 {
    0.5 * EmotionLabel::ALL.iter().map(|e| (p.get(e).unwrap_or(&0.0) - q.get(e).unwrap_or(&0.0)).abs()).sum::<f64>()
}

/// Per-task counts, unique clips, chance accuracy and emotion balance.
pub fn compute_statistics(items: &[BenchmarkItem], source: Option<&[ManifestEntry]>) -> StatsReport {
    let rows: Vec<TaskRow> = Task::ALL
        .iter()
        .map(|&task| {
            let of_task: Vec<&BenchmarkItem> = items.iter().filter(|it| it.task == task).collect();
            let videos: BTreeSet<&str> = of_task.iter().map(|it| it.video_ref.as_str()).collect();
            let n_choices = of_task.first().map(|it| it.choices.len()).unwrap_or(task.num_choices());
            TaskRow { task, label: task.label().into(), qa: of_task.len(), videos: videos.len(), random_accuracy: 1.0 / n_choices as f64 }
        })
        .collect();
    let all_videos: BTreeSet<&str> = items.iter().map(|it| it.video_ref.as_str()).collect();
    // Label distribution is counted per unique clip, like the source manifest.
    let mut clip_labels: BTreeMap<&str, EmotionLabel> = BTreeMap::new();
    for it in items {
        clip_labels.entry(it.video_ref.as_str()).or_insert(it.emotion);
    }
    let emotion_distribution = distribution(clip_labels.values().copied());
    let source_distribution = source.map(|s| distribution(s.iter().map(|e| e.gt_emotion)));
    let tv_distance = match (&source_distribution, items.is_empty()) {
        (Some(s), false) => Some(total_variation(&emotion_distribution, s)),
        _ => None,
    };
    StatsReport { rows, total_qa: items.len(), total_videos: all_videos.len(), emotion_distribution, source_distribution, tv_distance }
}

/// Published per-task counts of the full benchmark, in [`Task::ALL`] order.
pub const PUBLISHED_QA: [usize; 5] = [972, 1024, 456, 820, 728];
pub const PUBLISHED_TOTAL_QA: usize = 4000;
pub const PUBLISHED_TOTAL_VIDEOS: usize = 2649;

/// Compares a report against the published totals.
pub fn check_published_totals(report: &StatsReport) -> Result<(), String> {
    let per_task: Vec<usize> = report.rows.iter().map(|r| r.qa).collect();
    if per_task != PUBLISHED_QA {
        return Err(format!("per-task counts {per_task:?} differ from {PUBLISHED_QA:?}"));
    }
    if report.total_qa != PUBLISHED_TOTAL_QA || report.total_videos != PUBLISHED_TOTAL_VIDEOS {
        return Err(format!("totals {} QA / {} videos", report.total_qa, report.total_videos));
    }
    Ok(())
}

/// Plain-text table with one row per task and a total row.
pub fn render_table(report: &StatsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<32} {:>6} {:>7} {:>11}", "Task", "# QA", "# vid.", "Rand. Acc.");
    for r in &report.rows {
        let _ = writeln!(s, "{:<32} {:>6} {:>7} {:>10.0}%", r.label, r.qa, r.videos, 100.0 * r.random_accuracy);
    }
    let _ = writeln!(s, "{:<32} {:>6} {:>7}", "Total", report.total_qa, report.total_videos);
    if let Some(tv) = report.tv_distance {
        let _ = writeln!(s, "Emotion TV distance to source: {tv:.4}");
    }
    s
}

/// Items and per-clip diagnostics of a full build.
#[derive(Debug, Clone, Default)]
pub struct BenchOutput {
    pub items: Vec<BenchmarkItem>,
    pub removed_by_filter: Vec<BenchmarkItem>,
    pub captioned: Vec<CaptionedVideo>,
    pub rejects: Vec<crate::prefdata::QuarantineEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub seed: u64,
    /// Independent uniform guessers used by the text-only filter.
    pub random_guessers: usize,
    /// Adds the annotator as a further text-only guesser.
    pub annotator_guesser: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { seed: 0, random_guessers: 3, annotator_guesser: false }
    }
}

/// Captions every clip in the manifest, without generating questions.
pub fn caption_manifest(
    manifest: &[ManifestEntry],
    store: &AvStore,
    annotator: &dyn AnnotatorClient,
) -> (Vec<CaptionedVideo>, Vec<crate::prefdata::QuarantineEntry>) {
    let mut captioned = Vec::new();
    let mut rejects = Vec::new();
    for entry in manifest {
        let reject = |stage: &str, reason: String| crate::prefdata::QuarantineEntry {
            id: entry.video_ref.clone(),
            stage: stage.to_string(),
            attempts: 1,
            reason,
        };
        let Some(av) = store.get(&entry.video_ref) else {
            rejects.push(reject("load", "clip missing from store".into()));
            continue;
        };
        match caption_video(entry, av, annotator) {
            Ok(c) => {
                if !c.has_audio {
                    log::info!("{}: no audio track, audio tasks skipped", c.video_ref);
                }
                if !c.verification.keep {
                    log::info!("{}: neither caption matches the label, discarded", c.video_ref);
                }
                captioned.push(c);
            }
            Err(e) => rejects.push(reject("caption", e.to_string())),
        }
    }
    (captioned, rejects)
}

/// Runs every stage in order and returns the balanced item set.
pub fn build_benchmark(manifest: &[ManifestEntry], store: &AvStore, annotator: &dyn AnnotatorClient, cfg: &BenchConfig) -> BenchOutput {
    let (captioned, mut rejects) = caption_manifest(manifest, store, annotator);
    let mut items = Vec::new();
    for c in captioned.iter().filter(|c| c.verification.keep) {
        for task in Task::ALL {
            match generate_items(c, task, annotator, cfg.seed) {
                Ok(v) => items.extend(v),
                Err(e) => rejects.push(crate::prefdata::QuarantineEntry {
                    id: format!("{}:{}", c.video_ref, task.as_str()),
                    stage: "generate".into(),
                    attempts: 1,
                    reason: e.to_string(),
                }),
            }
        }
    }
    let randoms: Vec<RandomGuesser> = (0..cfg.random_guessers)
        .map(|k| RandomGuesser { name: format!("random{k}"), seed: crate::world::derive_seed(cfg.seed, &format!("guesser{k}")) })
        .collect();
    let ann = AnnotatorGuesser { client: annotator };
    let mut guessers: Vec<&dyn TextGuesser> = randoms.iter().map(|g| g as &dyn TextGuesser).collect();
    if cfg.annotator_guesser {
        guessers.push(&ann);
    }
    let filtered = if guessers.is_empty() {
        FilterOutcome { retained: items, removed: Vec::new() }
    } else {
        text_only_filter(&items, &guessers)
    };
    let items = balance_answers(&filtered.retained, cfg.seed);
    BenchOutput { items, removed_by_filter: filtered.removed, captioned, rejects }
}

/// Preference sources from verified clips: one per eligible reasoning modality, plus an agreement source when both agree.
pub fn preference_sources(captioned: &[CaptionedVideo]) -> Vec<PreferenceSource> {
    let mut out = Vec::new();
    for c in captioned.iter().filter(|c| c.verification.keep) {
        let e = c.pair.gt_emotion;
        let first_cue = |m: Modality| {
            crate::world::emotion_cues(m, e).iter().find(|cue| caption_of(c, m).contains(*cue)).map(|s| s.to_string())
        };
        let present: Vec<String> = [&c.pair.audio_caption, &c.pair.video_caption]
            .iter()
            .flat_map(|cap| annotator::cues_in(cap).into_iter().chain(annotator::context_cues_in(cap)))
            .map(str::to_string)
            .collect();
        if c.verification.audio_eligible {
            if let Some(cue) = first_cue(Modality::Audio) {
                out.push(PreferenceSource {
                    id: format!("{}:audio", c.video_ref),
                    video_ref: c.video_ref.clone(),
                    task: SourceTask::AudioReasoning,
                    emotion: e,
                    question: "What in the audio shows how the speaker feels?".into(),
                    answer: format!("Hearing {cue} shows that the speaker feels {e}."),
                    present_cues: present.clone(),
                });
            }
        }
        if c.verification.video_eligible {
            if let Some(cue) = first_cue(Modality::Video) {
                out.push(PreferenceSource {
                    id: format!("{}:visual", c.video_ref),
                    video_ref: c.video_ref.clone(),
                    task: SourceTask::VisualReasoning,
                    emotion: e,
                    question: "What in the video shows how the person feels?".into(),
                    answer: format!("Seeing {cue} shows that the person feels {e}."),
                    present_cues: present.clone(),
                });
            }
        }
        if c.verification.modalities_agree() {
            if let (Some(a), Some(v)) = (first_cue(Modality::Audio), first_cue(Modality::Video)) {
                out.push(PreferenceSource {
                    id: format!("{}:agreement", c.video_ref),
                    video_ref: c.video_ref.clone(),
                    task: SourceTask::ModalityAgreement,
                    emotion: e,
                    question: "How do the sound and the picture show what the character feels?".into(),
                    answer: format!("Hearing {a} and seeing {v} show that the character feels {e}."),
                    present_cues: present,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
