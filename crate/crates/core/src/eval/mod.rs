//! Metrics and analyses: choice extraction, Yes/No and multiple-choice
//! scoring, emotion recognition recalls, stress-test breakdowns, the
//! irrelevant-modality likelihood shift, attention comparisons and
//! contrastive decoding.

mod kde;
pub mod svg;

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::bench::{BenchmarkItem, Subtask, Task, NO, YES};
use crate::prefdata::{diffuse_tokens, Codebooks, DiffusionSchedule};
use crate::scorer::{AttentionShare, Model, ScorerError, SequenceScorer, TokenStreams};
use crate::text::Vocabulary;
use crate::types::{EmotionLabel, Modality, ModalityTag};
use crate::world::{item_rng, AvInput};

pub use kde::{gaussian_kde, scott_bandwidth, symmetrized_kl, Kde, KDE_EPSILON, KDE_GRID};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("empty input")]
    Empty,
    #[error("{0} predictions for {1} items")]
    LengthMismatch(usize, usize),
    #[error("item {0} is not a Yes/No item")]
    NotYesNo(String),
    #[error("item {0} has no prompt-irrelevant modality")]
    NoIrrelevantModality(String),
    #[error("adversary pool is empty")]
    EmptyPool,
    #[error(transparent)]
    Scorer(#[from] ScorerError),
}

fn letter_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^\s*(?:option\s+|answer\s*:?\s*)?(?:\(([A-Za-z])\)|\[([A-Za-z])\]|([A-Za-z])(?:[).:,]|\s*$))")
            .expect("valid regex")
    })
}

fn normalize(s: &str) -> String {
    let cleaned: String = s.chars().map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' }).collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Maps free-form model output to a choice index. `None` means abstain.
pub fn extract_choice(output: &str, choices: &[String]) -> Option<usize> {
    if choices.is_empty() {
        return None;
    }
    if let Some(c) = letter_re().captures(output) {
        let letter = c.get(1).or(c.get(2)).or(c.get(3)).expect("one group matches").as_str();
        let idx = (letter.to_ascii_uppercase().as_bytes()[0] - b'A') as usize;
        // A bare "A" could also be an article opening a sentence; only accept in-range letters.
        if idx < choices.len() {
            return Some(idx);
        }
    }
    let trimmed = output.trim();
    if let Some(i) = choices.iter().position(|c| c.trim().eq_ignore_ascii_case(trimmed)) {
        return Some(i);
    }
    let hay = format!(" {} ", normalize(output));
    let hits: Vec<usize> = choices
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            let n = normalize(c);
            !n.is_empty() && hay.contains(&format!(" {n} "))
        })
        .map(|(i, _)| i)
        .collect();
    match hits.as_slice() {
        [one] => Some(*one),
        _ => None,
    }
}

/// Line of a predictions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub item_id: String,
    pub raw_output: String,
    pub extracted_index: Option<usize>,
}

impl Prediction {
    pub fn from_output(item: &BenchmarkItem, raw_output: impl Into<String>) -> Self {
        let raw_output = raw_output.into();
        let extracted_index = extract_choice(&raw_output, &item.choices);
        Self { item_id: item.id.clone(), raw_output, extracted_index }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubtaskScore {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl SubtaskScore {
    fn from_counts(count: usize, correct: usize) -> Option<Self> {
        (count > 0).then(|| Self { count, correct, accuracy: correct as f64 / count as f64 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Accuracy on items whose answer is Yes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    /// Accuracy on items whose answer is No.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_subtask: BTreeMap<Subtask, SubtaskScore>,
}

fn is_correct(pred: Option<usize>, item: &BenchmarkItem) -> bool {
    pred == Some(item.answer_index)
}

fn check_lengths(preds: &[Option<usize>], items: &[BenchmarkItem]) -> Result<(), EvalError> {
    if preds.len() != items.len() {
        return Err(EvalError::LengthMismatch(preds.len(), items.len()));
    }
    if items.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

fn subtask_scores(preds: &[Option<usize>], items: &[BenchmarkItem]) -> BTreeMap<Subtask, SubtaskScore> {
    let mut tally: BTreeMap<Subtask, (usize, usize)> = BTreeMap::new();
    for (p, it) in preds.iter().zip(items) {
        if it.subtask != Subtask::None {
            let t = tally.entry(it.subtask).or_default();
            t.0 += 1;
            t.1 += usize::from(is_correct(*p, it));
        }
    }
    tally.into_iter().filter_map(|(k, (n, c))| SubtaskScore::from_counts(n, c).map(|s| (k, s))).collect()
}

/// Plain accuracy; abstentions (`None`) count as wrong.
pub fn accuracy_metrics(preds: &[Option<usize>], items: &[BenchmarkItem]) -> Result<TaskMetrics, EvalError> {
    check_lengths(preds, items)?;
    let correct = preds.iter().zip(items).filter(|(p, it)| is_correct(**p, it)).count();
    Ok(TaskMetrics {
        count: items.len(),
        correct,
        accuracy: correct as f64 / items.len() as f64,
        precision: None,
        recall: None,
        f1: None,
        per_subtask: subtask_scores(preds, items),
    })
}

/// Yes/No scoring with precision and recall defined as the accuracy on
/// Yes-answer and No-answer items respectively. This is not the classical
/// confusion-matrix precision/recall.
pub fn yes_no_metrics(preds: &[Option<usize>], items: &[BenchmarkItem]) -> Result<TaskMetrics, EvalError> {
    check_lengths(preds, items)?;
    if let Some(bad) = items.iter().find(|it| it.choices != [YES, NO]) {
        return Err(EvalError::NotYesNo(bad.id.clone()));
    }
    let (mut yes_n, mut yes_c, mut no_n, mut no_c) = (0usize, 0usize, 0usize, 0usize);
    for (p, it) in preds.iter().zip(items) {
        let ok = usize::from(is_correct(*p, it));
        if it.answer_is_yes() {
            yes_n += 1;
            yes_c += ok;
        } else {
            no_n += 1;
            no_c += ok;
        }
    }
    let precision = (yes_n > 0).then(|| yes_c as f64 / yes_n as f64);
    let recall = (no_n > 0).then(|| no_c as f64 / no_n as f64);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    let correct = yes_c + no_c;
    Ok(TaskMetrics {
        count: items.len(),
        correct,
        accuracy: correct as f64 / items.len() as f64,
        precision,
        recall,
        f1,
        per_subtask: subtask_scores(preds, items),
    })
}

fn check_labels(preds: &[EmotionLabel], gold: &[EmotionLabel]) -> Result<(), EvalError> {
    if preds.len() != gold.len() {
        return Err(EvalError::LengthMismatch(preds.len(), gold.len()));
    }
    if gold.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// `(uar, war)`: mean per-class recall over classes present in `gold`, and overall accuracy.
pub fn uar_war(preds: &[EmotionLabel], gold: &[EmotionLabel]) -> Result<(f64, f64), EvalError> {
    check_labels(preds, gold)?;
    let mut support = [0usize; 7];
    let mut hit = [0usize; 7];
    for (p, g) in preds.iter().zip(gold) {
        support[g.index()] += 1;
        hit[g.index()] += usize::from(p == g);
    }
    let present: Vec<usize> = (0..7).filter(|&k| support[k] > 0).collect();
    let uar = present.iter().map(|&k| hit[k] as f64 / support[k] as f64).sum::<f64>() / present.len() as f64;
    let war = hit.iter().sum::<usize>() as f64 / gold.len() as f64;
    Ok((uar, war))
}

/// Support-weighted mean of per-class one-vs-rest F1.
pub fn weighted_f1(preds: &[EmotionLabel], gold: &[EmotionLabel]) -> Result<f64, EvalError> {
    check_labels(preds, gold)?;
    let (mut tp, mut fp, mut fn_) = ([0usize; 7], [0usize; 7], [0usize; 7]);
    for (p, g) in preds.iter().zip(gold) {
        if p == g {
            tp[g.index()] += 1;
        } else {
            fp[p.index()] += 1;
            fn_[g.index()] += 1;
        }
    }
    let n = gold.len() as f64;
    Ok((0..7)
        .map(|k| {
            let support = (tp[k] + fn_[k]) as f64;
            let denom = (2 * tp[k] + fp[k] + fn_[k]) as f64;
            let f1 = if denom == 0.0 { 0.0 } else { 2.0 * tp[k] as f64 / denom };
            support / n * f1
        })
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityStress {
    pub spurious: Option<SubtaskScore>,
    pub hallucination: Option<SubtaskScore>,
    pub no_hallucination: Option<SubtaskScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressBreakdown {
    pub audio: ModalityStress,
    pub visual: ModalityStress,
    /// Unweighted mean over the modalities that have spurious items.
    pub spurious_avg: Option<f64>,
    pub hallucination_avg: Option<f64>,
}

fn mean_of(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-subtask accuracy on stress items, per modality and averaged across modalities.
pub fn stress_breakdown(preds: &[Option<usize>], items: &[BenchmarkItem]) -> Result<StressBreakdown, EvalError> {
    if preds.len() != items.len() {
        return Err(EvalError::LengthMismatch(preds.len(), items.len()));
    }
    let per = |task: Task| {
        let (p, it): (Vec<Option<usize>>, Vec<BenchmarkItem>) =
            preds.iter().zip(items).filter(|(_, it)| it.task == task).map(|(p, it)| (*p, it.clone())).unzip();
        let s = subtask_scores(&p, &it);
        ModalityStress {
            spurious: s.get(&Subtask::SpuriousAssociation).copied(),
            hallucination: s.get(&Subtask::EmotionRelevantHallucination).copied(),
            no_hallucination: s.get(&Subtask::NoHallucination).copied(),
        }
    };
    let audio = per(Task::StressAudio);
    let visual = per(Task::StressVisual);
    let spurious_avg = mean_of([audio.spurious, visual.spurious].into_iter().map(|s| s.map(|s| s.accuracy)));
    let hallucination_avg = mean_of([audio.hallucination, visual.hallucination].into_iter().map(|s| s.map(|s| s.accuracy)));
    Ok(StressBreakdown { audio, visual, spurious_avg, hallucination_avg })
}

/// Metrics for every task present, plus the unweighted mean accuracy across tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: BTreeMap<Task, TaskMetrics>,
    pub stress: StressBreakdown,
    pub average_accuracy: f64,
    pub abstentions: usize,
}

/// Scores predictions against items by id. Items without a prediction count as abstentions.
pub fn evaluate_benchmark(items: &[BenchmarkItem], predictions: &[Prediction]) -> Result<EvalReport, EvalError> {
    if items.is_empty() {
        return Err(EvalError::Empty);
    }
    let by_id: BTreeMap<&str, Option<usize>> = predictions.iter().map(|p| (p.item_id.as_str(), p.extracted_index)).collect();
    let preds: Vec<Option<usize>> = items.iter().map(|it| by_id.get(it.id.as_str()).copied().flatten()).collect();
    let mut tasks = BTreeMap::new();
    for task in Task::ALL {
        let (p, it): (Vec<Option<usize>>, Vec<BenchmarkItem>) =
            preds.iter().zip(items).filter(|(_, it)| it.task == task).map(|(p, it)| (*p, it.clone())).unzip();
        if it.is_empty() {
            continue;
        }
        let m = if task.is_yes_no() { yes_no_metrics(&p, &it)? } else { accuracy_metrics(&p, &it)? };
        tasks.insert(task, m);
    }
    let average_accuracy = tasks.values().map(|m| m.accuracy).sum::<f64>() / tasks.len() as f64;
    Ok(EvalReport {
        stress: stress_breakdown(&preds, items)?,
        average_accuracy,
        abstentions: preds.iter().filter(|p| p.is_none()).count(),
        tasks,
    })
}

/// Modality tag a benchmark task prompts with.
pub fn task_tag(task: Task) -> ModalityTag {
    match task.modality() {
        Some(Modality::Audio) => ModalityTag::Audio,
        Some(Modality::Video) => ModalityTag::Visual,
        None => ModalityTag::AudioVisual,
    }
}

/// Scoring inputs for every choice of an item, sharing one prompt.
pub fn choice_streams(item: &BenchmarkItem, av: &AvInput, vocab: &Vocabulary) -> Vec<TokenStreams> {
    let prompt_tokens = vocab.encode(&item.question);
    item.choices
        .iter()
        .map(|c| TokenStreams {
            audio_tokens: av.audio_tokens.clone(),
            video_tokens: av.video_tokens.clone(),
            prompt_tokens: prompt_tokens.clone(),
            response_tokens: vocab.encode(c),
            modality_tag: task_tag(item.task),
        })
        .collect()
}

/// Index of the largest score; the first wins ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Picks the choice with the highest sequence log-likelihood.
pub fn predict_by_likelihood(scorer: &dyn SequenceScorer, choices: &[TokenStreams]) -> Result<usize, EvalError> {
    if choices.is_empty() {
        return Err(EvalError::Empty);
    }
    let lp = choices.iter().map(|ts| scorer.log_prob(ts)).collect::<Result<Vec<_>, _>>()?;
    Ok(argmax(&lp))
}

/// Which stream `adversarial_shift` replaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapTarget {
    /// The modality the item's prompt does not ask about.
    Irrelevant,
    Audio,
    Video,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub original: Vec<f64>,
    pub adversarial: Vec<f64>,
    pub original_mean: f64,
    pub adversarial_mean: f64,
    pub grid: Vec<f64>,
    pub original_density: Vec<f64>,
    pub adversarial_density: Vec<f64>,
    pub divergence: f64,
}

/// Log-likelihood of each item's response under its own input and with one
/// stream replaced by a pool sample, compared through Gaussian KDEs.
pub fn adversarial_shift(
    scorer: &dyn SequenceScorer,
    items: &[(String, TokenStreams)],
    swap: SwapTarget,
    pool: &[AvInput],
    seed: u64,
) -> Result<ShiftReport, EvalError> {
    if items.is_empty() {
        return Err(EvalError::Empty);
    }
    if pool.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    let mut original = Vec::with_capacity(items.len());
    let mut adversarial = Vec::with_capacity(items.len());
    for (id, ts) in items {
        let m = match swap {
            SwapTarget::Irrelevant => ts.modality_tag.irrelevant_modality().ok_or_else(|| EvalError::NoIrrelevantModality(id.clone()))?,
            SwapTarget::Audio => Modality::Audio,
            SwapTarget::Video => Modality::Video,
        };
        let adversary = &pool[item_rng(seed, id).random_range(0..pool.len())];
        let swapped = match m {
            Modality::Audio => ts.with_av(adversary.audio_tokens.clone(), ts.video_tokens.clone()),
            Modality::Video => ts.with_av(ts.audio_tokens.clone(), adversary.video_tokens.clone()),
        };
        original.push(scorer.log_prob(ts)?);
        adversarial.push(scorer.log_prob(&swapped)?);
    }
    let (po, pa) = kde::shared_pair(&original, &adversarial);
    let divergence = symmetrized_kl(&po.density, &pa.density);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(ShiftReport {
        original_mean: mean(&original),
        adversarial_mean: mean(&adversarial),
        grid: po.grid.clone(),
        original_density: po.density,
        adversarial_density: pa.density,
        divergence,
        original,
        adversarial,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionItem {
    pub id: String,
    pub task: String,
    pub tag: ModalityTag,
    pub before: AttentionShare,
    pub after: AttentionShare,
}

/// Per-modality median shares for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub task: String,
    pub count: usize,
    pub before_median: AttentionShare,
    pub after_median: AttentionShare,
    pub delta: AttentionShare,
    /// Median share of the prompt-relevant modality within the multimodal mass, when the task has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevant_before: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevant_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub rows: Vec<AttentionRow>,
    pub items: Vec<AttentionItem>,
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn relevant_share(share: &AttentionShare, tag: ModalityTag) -> Option<f64> {
    let (a, v) = share.within_multimodal();
    tag.relevant_modality().map(|m| if m == Modality::Audio { a } else { v })
}

/// Attention shares of the same inputs under two models, grouped by task.
pub fn attention_comparison(before: &Model, after: &Model, items: &[(String, String, TokenStreams)]) -> Result<AttentionReport, EvalError> {
    let mut out = Vec::with_capacity(items.len());
    for (id, task, ts) in items {
        out.push(AttentionItem {
            id: id.clone(),
            task: task.clone(),
            tag: ts.modality_tag,
            before: before.attention_share(ts)?,
            after: after.attention_share(ts)?,
        });
    }
    let mut groups: BTreeMap<&str, Vec<&AttentionItem>> = BTreeMap::new();
    for it in &out {
        groups.entry(it.task.as_str()).or_default().push(it);
    }
    let med = |v: &[&AttentionItem], f: &dyn Fn(&AttentionItem) -> f64| median(&v.iter().map(|it| f(it)).collect::<Vec<_>>());
    let rows = groups
        .into_iter()
        .map(|(task, v)| {
            let shares = |pick: &dyn Fn(&AttentionItem) -> AttentionShare| AttentionShare {
                audio_pct: med(&v, &|it| pick(it).audio_pct),
                video_pct: med(&v, &|it| pick(it).video_pct),
                text_pct: med(&v, &|it| pick(it).text_pct),
            };
            let b = shares(&|it| it.before);
            let a = shares(&|it| it.after);
            let relevant = |pick: &dyn Fn(&AttentionItem) -> AttentionShare| {
                let r: Vec<f64> = v.iter().filter_map(|it| relevant_share(&pick(it), it.tag)).collect();
                (!r.is_empty()).then(|| median(&r))
            };
            AttentionRow {
                task: task.to_string(),
                count: v.len(),
                delta: AttentionShare {
                    audio_pct: a.audio_pct - b.audio_pct,
                    video_pct: a.video_pct - b.video_pct,
                    text_pct: a.text_pct - b.text_pct,
                },
                relevant_before: relevant(&|it| it.before),
                relevant_after: relevant(&|it| it.after),
                before_median: b,
                after_median: a,
            }
        })
        .collect();
    Ok(AttentionReport { rows, items: out })
}

/// Choice scores `lp_orig - gamma_cd * lp_diffused` and their argmax.
pub fn contrastive_scores(original: &[f64], diffused: &[f64], gamma_cd: f64) -> (usize, Vec<f64>) {
    let scores: Vec<f64> = original.iter().zip(diffused).map(|(o, d)| o - gamma_cd * d).collect();
    (argmax(&scores), scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveResult {
    pub index: usize,
    pub scores: Vec<f64>,
    pub original: Vec<f64>,
    pub diffused: Vec<f64>,
}

/// Contrastive decoding against a diffused copy of the audiovisual input.
/// `choices` share one audiovisual input and prompt.
pub fn contrastive_decode(
    scorer: &dyn SequenceScorer,
    choices: &[TokenStreams],
    gamma_cd: f64,
    noise_step: usize,
    codebooks: &Codebooks,
    seed: u64,
) -> Result<ContrastiveResult, EvalError> {
    let first = choices.first().ok_or(EvalError::Empty)?;
    let schedule = DiffusionSchedule::default();
    let mut rng = item_rng(seed, "contrastive");
    let audio = diffuse_tokens(&first.audio_tokens, &codebooks.audio, noise_step, &schedule, &mut rng);
    let video = diffuse_tokens(&first.video_tokens, &codebooks.video, noise_step, &schedule, &mut rng);
    let original = choices.iter().map(|ts| scorer.log_prob(ts)).collect::<Result<Vec<_>, _>>()?;
    let diffused = choices
        .iter()
        .map(|ts| scorer.log_prob(&ts.with_av(audio.clone(), video.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let (index, scores) = contrastive_scores(&original, &diffused, gamma_cd);
    Ok(ContrastiveResult { index, scores, original, diffused })
}
