use proptest::prelude::*;

use super::*;
use crate::annotator::SyntheticAnnotator;
use crate::world::{synthesize_corpus, CorpusSpec};
use EmotionLabel::*;

fn pair(audio: Option<EmotionLabel>, video: Option<EmotionLabel>, gt: EmotionLabel) -> CaptionPair {
    CaptionPair { audio_caption: "a".into(), video_caption: "v".into(), audio_emotion: audio, video_emotion: video, gt_emotion: gt }
}

#[test]
fn verification_rules() {
    let v = verify_captions(&pair(Some(Happy), Some(Happy), Happy));
    assert!(v.keep && v.audio_eligible && v.video_eligible && v.modalities_agree());
    assert!(!verify_captions(&pair(Some(Sad), Some(Neutral), Happy)).keep);
    assert!(!verify_captions(&pair(None, None, Happy)).keep);
    let v = verify_captions(&pair(Some(Happy), Some(Sad), Happy));
    assert!(v.keep && v.audio_eligible && !v.video_eligible && !v.modalities_agree());
}

fn captioned(audio: Option<EmotionLabel>, video: Option<EmotionLabel>, gt: EmotionLabel) -> CaptionedVideo {
    let e = |m: Modality, x: Option<EmotionLabel>| match x {
        Some(x) => format!("{} with {}", crate::world::emotion_cues(m, x)[0], crate::world::context_cues(m)[0]),
        None => format!("{} and no distinct expression", crate::world::context_cues(m)[1]),
    };
    let mut p = pair(audio, video, gt);
    p.audio_caption = e(Modality::Audio, audio);
    p.video_caption = e(Modality::Video, video);
    CaptionedVideo { video_ref: "clip".into(), has_audio: true, verification: verify_captions(&p), pair: p, provenance: vec![] }
}

#[test]
fn agreement_answer_comes_from_verification() {
    let both = generate_items(&captioned(Some(Sad), Some(Sad), Sad), Task::ModalityAgreement, &SyntheticAnnotator, 0).unwrap();
    assert_eq!(both[0].answer(), YES);
    let one = generate_items(&captioned(Some(Sad), Some(Angry), Sad), Task::ModalityAgreement, &SyntheticAnnotator, 0).unwrap();
    assert_eq!(one[0].answer(), NO);
    let ineligible = generate_items(&captioned(Some(Sad), Some(Angry), Sad), Task::ReasoningBasicVisual, &SyntheticAnnotator, 0).unwrap();
    assert!(ineligible.is_empty());
}

#[test]
fn stress_items_follow_subtask() {
    let c = captioned(Some(Fear), None, Fear);
    let audio = generate_items(&c, Task::StressAudio, &SyntheticAnnotator, 3).unwrap();
    assert_eq!(audio.len(), 2);
    assert_eq!(audio[0].subtask, Subtask::NoHallucination);
    assert_eq!(audio[0].answer(), YES);
    assert!(audio[0].question.contains(crate::world::emotion_cues(Modality::Audio, Fear)[0]));
    assert_eq!(audio[1].answer(), NO);
    let visual = generate_items(&c, Task::StressVisual, &SyntheticAnnotator, 3).unwrap();
    assert_eq!(visual.len(), 1, "video not eligible, so only a No probe");
    for it in audio.iter().chain(&visual) {
        it.validate().unwrap();
    }
    let spurious: Vec<_> = (0..40)
        .flat_map(|s| generate_items(&c, Task::StressAudio, &SyntheticAnnotator, s).unwrap())
        .filter(|it| it.subtask == Subtask::SpuriousAssociation)
        .collect();
    assert!(!spurious.is_empty());
    assert!(spurious.iter().all(|it| it.answer() == NO && it.question.contains("distant traffic noise")));
}

#[test]
fn silent_clip_skips_audio_tasks() {
    let entry = ManifestEntry { video_ref: "quiet".into(), gt_emotion: Happy, subtitle: None };
    let av = AvInput { audio_tokens: vec![], video_tokens: (0..8).map(|k| crate::world::band_token(Happy, k)).collect() };
    let c = caption_video(&entry, &av, &SyntheticAnnotator).unwrap();
    assert!(!c.has_audio && c.verification.keep && !c.verification.audio_eligible);
    assert!(c.provenance.iter().any(|p| p.note.as_deref().is_some_and(|n| n.contains("no audio"))));
    for task in [Task::ReasoningBasicAudio, Task::StressAudio, Task::ModalityAgreement] {
        assert!(generate_items(&c, task, &SyntheticAnnotator, 0).unwrap().is_empty(), "{task:?}");
    }
    assert_eq!(generate_items(&c, Task::ReasoningBasicVisual, &SyntheticAnnotator, 0).unwrap().len(), 1);
}

struct Fixed(Option<usize>);

impl TextGuesser for Fixed {
    fn name(&self) -> String {
        "fixed".into()
    }
    fn guess(&self, _: &BenchmarkItem) -> Result<usize, String> {
        self.0.ok_or_else(|| "down".to_string())
    }
}

fn mc(id: usize, answer: usize) -> BenchmarkItem {
    BenchmarkItem {
        id: format!("q{id}"),
        video_ref: format!("v{}", id / 2),
        task: Task::ReasoningBasicAudio,
        subtask: Subtask::None,
        question: format!("question {id}"),
        choices: (0..4).map(|k| format!("option {k}")).collect(),
        answer_index: answer,
        emotion: EmotionLabel::ALL[id % 7],
        provenance: vec![],
    }
}

#[test]
fn filter_removes_only_unanimous_correct() {
    let items = vec![mc(0, 1)];
    let right = Fixed(Some(1));
    let wrong = Fixed(Some(2));
    let broken = Fixed(None);
    assert_eq!(text_only_filter(&items, &[&right, &right, &right]).removed.len(), 1);
    let kept = text_only_filter(&items, &[&right, &right, &wrong]);
    assert_eq!(kept.retained.len(), 1);
    assert!(kept.retained[0].provenance.last().unwrap().note.as_deref().unwrap().starts_with("2/3"));
    assert_eq!(text_only_filter(&items, &[&right, &right, &broken]).retained.len(), 1);
}

#[test]
fn random_guessers_remove_one_in_sixty_four() {
    let items: Vec<_> = (0..20_000).map(|i| mc(i, i % 4)).collect();
    let gs: Vec<RandomGuesser> = (0..3).map(|k| RandomGuesser { name: format!("r{k}"), seed: 100 + k }).collect();
    let refs: Vec<&dyn TextGuesser> = gs.iter().map(|g| g as &dyn TextGuesser).collect();
    let out = text_only_filter(&items, &refs);
    let rate = out.removed.len() as f64 / items.len() as f64;
    assert!((rate - 1.0 / 64.0).abs() < 0.005, "removal rate {rate}");
}

proptest! {
    #[test]
    fn adding_a_guesser_never_shrinks_retained(seed in any::<u64>(), k in 1usize..4) {
        let items: Vec<_> = (0..200).map(|i| mc(i, (i * 7 + seed as usize) % 4)).collect();
        let gs: Vec<RandomGuesser> = (0..=k as u64).map(|j| RandomGuesser { name: format!("r{j}"), seed: seed ^ (j * 977) }).collect();
        let refs: Vec<&dyn TextGuesser> = gs.iter().map(|g| g as &dyn TextGuesser).collect();
        let fewer = text_only_filter(&items, &refs[..k]);
        let more = text_only_filter(&items, &refs);
        let before: BTreeSet<_> = fewer.retained.iter().map(|i| i.id.clone()).collect();
        let after: BTreeSet<_> = more.retained.iter().map(|i| i.id.clone()).collect();
        prop_assert!(before.is_subset(&after));
    }
}

#[test]
fn four_choice_balance_is_uniform() {
    let items: Vec<_> = (0..1000).map(|i| mc(i, 0)).collect();
    let out = balance_answers(&items, 42);
    let mut counts = [0usize; 4];
    for (before, after) in items.iter().zip(&out) {
        counts[after.answer_index] += 1;
        assert_eq!(after.answer(), before.answer());
        let mut a = before.choices.clone();
        let mut b = after.choices.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - 250.0).powi(2) / 250.0).sum();
    assert!(counts.iter().all(|&c| c.abs_diff(250) <= 20), "{counts:?}");
    assert!(chi2 < 7.815, "chi-square {chi2}");
    assert_eq!(out, balance_answers(&items, 42));
}

fn agreement(id: usize, yes: bool) -> BenchmarkItem {
    BenchmarkItem {
        id: format!("a{id}"),
        video_ref: format!("v{id}"),
        task: Task::ModalityAgreement,
        subtask: Subtask::None,
        question: AGREEMENT_QUESTION.into(),
        choices: yes_no(),
        answer_index: if yes { 0 } else { 1 },
        emotion: Happy,
        provenance: vec![],
    }
}

#[test]
fn yes_no_subsampled_to_even_split() {
    let items: Vec<_> = (0..100).map(|i| agreement(i, i < 60)).collect();
    let out = balance_answers(&items, 7);
    assert_eq!(out.iter().filter(|i| i.answer_is_yes()).count(), 40);
    assert_eq!(out.iter().filter(|i| !i.answer_is_yes()).count(), 40);
    assert!(out.iter().all(|i| i.choices == [YES, NO]));
    let again = balance_answers(&items, 7);
    assert_eq!(out, again);
    let pos: Vec<usize> = out.iter().map(|i| i.id[1..].parse().unwrap()).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]), "input order preserved");
}

#[test]
fn statistics_of_empty_input() {
    let r = compute_statistics(&[], None);
    assert_eq!((r.total_qa, r.total_videos), (0, 0));
    assert!(r.rows.iter().all(|row| row.qa == 0 && row.videos == 0));
    assert_eq!(r.rows.len(), 5);
    assert!(r.emotion_distribution.values().all(|&v| v == 0.0));
    assert!(r.tv_distance.is_none());
}

/// Ten items tallied by hand: 3 basic audio over 2 clips, 2 basic visual
/// over 2 clips, 2 agreement over 2 clips, 3 stress audio over 1 clip.
pub(crate) fn ten_items() -> Vec<BenchmarkItem> {
    let mut v = Vec::new();
    let mk = |id: &str, vid: &str, task: Task, sub: Subtask, e: EmotionLabel| {
        let choices: Vec<String> = if task.is_yes_no() { yes_no() } else { (0..4).map(|k| format!("c{k}")).collect() };
        let answer_index = match sub.forced_answer() {
            Some(NO) => 1,
            _ => 0,
        };
        BenchmarkItem { id: id.into(), video_ref: vid.into(), task, subtask: sub, question: "q".into(), choices, answer_index, emotion: e, provenance: vec![] }
    };
    v.push(mk("1", "a", Task::ReasoningBasicAudio, Subtask::None, Happy));
    v.push(mk("2", "a", Task::ReasoningBasicAudio, Subtask::None, Happy));
    v.push(mk("3", "b", Task::ReasoningBasicAudio, Subtask::None, Sad));
    v.push(mk("4", "a", Task::ReasoningBasicVisual, Subtask::None, Happy));
    v.push(mk("5", "c", Task::ReasoningBasicVisual, Subtask::None, Angry));
    v.push(mk("6", "b", Task::ModalityAgreement, Subtask::None, Sad));
    v.push(mk("7", "d", Task::ModalityAgreement, Subtask::None, Sad));
    v.push(mk("8", "e", Task::StressAudio, Subtask::NoHallucination, Fear));
    v.push(mk("9", "e", Task::StressAudio, Subtask::SpuriousAssociation, Fear));
    v.push(mk("10", "e", Task::StressAudio, Subtask::EmotionRelevantHallucination, Fear));
    v
}

#[test]
fn statistics_match_hand_tally() {
    let items = ten_items();
    items.iter().for_each(|i| i.validate().unwrap());
    let source: Vec<ManifestEntry> = [Happy, Sad, Sad, Angry, Fear]
        .iter()
        .enumerate()
        .map(|(i, &e)| ManifestEntry { video_ref: format!("s{i}"), gt_emotion: e, subtitle: None })
        .collect();
    let r = compute_statistics(&items, Some(&source));
    let got: Vec<(usize, usize)> = r.rows.iter().map(|row| (row.qa, row.videos)).collect();
    assert_eq!(got, vec![(3, 2), (2, 2), (2, 2), (3, 1), (0, 0)]);
    assert_eq!((r.total_qa, r.total_videos), (10, 5));
    let acc: Vec<f64> = r.rows.iter().map(|row| row.random_accuracy).collect();
    assert_eq!(acc, vec![0.25, 0.25, 0.5, 0.5, 0.5]);
    // clips a..e carry happy, sad, angry, sad, fear: the same multiset as the source
    assert_eq!(r.emotion_distribution[&Sad], 0.4);
    assert_eq!(r.tv_distance, Some(0.0));
    let table = render_table(&r);
    assert!(table.starts_with("Task"));
    for col in ["# QA", "# vid.", "Rand. Acc."] {
        assert!(table.lines().next().unwrap().contains(col));
    }
    assert!(table.contains("Total"));
    assert!(check_published_totals(&r).is_err());
}

#[test]
fn item_validation_catches_broken_taxonomy() {
    let mut it = ten_items()[8].clone();
    it.answer_index = 0;
    assert!(it.validate().unwrap_err().contains("must be answered No"));
    let mut it = ten_items()[0].clone();
    it.choices.pop();
    assert!(it.validate().is_err());
}

#[test]
fn verdicts_drop_rejected_items() {
    let items = ten_items();
    let verdicts = vec![
        Verdict { item_id: "1".into(), keep: false, note: None },
        Verdict { item_id: "2".into(), keep: true, note: Some("checked".into()) },
    ];
    let out = merge_verdicts(&items, &verdicts);
    assert_eq!(out.len(), 9);
    assert_eq!(out[0].provenance.last().unwrap().stage, "human_verification");
}

#[test]
fn pipeline_on_synthetic_manifest() {
    let corpus = synthesize_corpus(&CorpusSpec::default(), 5);
    let out = build_benchmark(&corpus.manifest, &corpus.store, &SyntheticAnnotator, &BenchConfig { seed: 5, ..Default::default() });
    assert!(out.rejects.is_empty(), "{:?}", out.rejects);
    assert!(out.items.len() > 200, "{} items", out.items.len());
    for it in &out.items {
        it.validate().unwrap();
        assert!(it.provenance.iter().any(|p| p.stage == "text_only_filter"));
    }
    for task in Task::ALL {
        let of: Vec<_> = out.items.iter().filter(|i| i.task == task).collect();
        assert!(!of.is_empty(), "{task:?}");
        if task.is_yes_no() {
            let yes = of.iter().filter(|i| i.answer_is_yes()).count();
            assert_eq!(yes * 2, of.len(), "{task:?}");
        }
    }
    let again = build_benchmark(&corpus.manifest, &corpus.store, &SyntheticAnnotator, &BenchConfig { seed: 5, ..Default::default() });
    assert_eq!(out.items, again.items);

    let sources = preference_sources(&out.captioned);
    assert!(!sources.is_empty());
    let tasks: BTreeSet<_> = sources.iter().map(|s| format!("{:?}", s.task)).collect();
    assert_eq!(tasks.len(), 3);
}

#[test]
fn annotator_guesser_parses_letters() {
    let mut it = mc(3, 0);
    it.question = "Which sound in the clip shows that the speaker feels sad?".into();
    it.choices = vec!["light laughter".into(), "quiet sobbing".into(), "shouting".into(), "a sudden gasp".into()];
    it.answer_index = 1;
    let g = AnnotatorGuesser { client: &SyntheticAnnotator };
    assert_eq!(g.guess(&it), Ok(1));
}
