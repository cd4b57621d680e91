//! Synthetic preference sets with a known ground-truth rule.
//!
//! Each clip shows one emotion in the prompted modality and a different
//! emotion in the other one. Every emotion has two cue words per modality
//! and a clip displays exactly one of them, encoded by which half of the
//! emotion's token band its stream uses. The preferred answer names the
//! emotion and the displayed cue. The video-relevant rejection cites the
//! cue displayed by the unprompted modality; the emotion-relevant rejection
//! cites the emotion's other cue, which the clip does not show.

use rand::seq::IndexedRandom;
use rand::Rng;

use super::{record_vocabulary, supervised_warm_start, tokenize_records, TrainConfig, TrainData, TrainError, TrainState};
use crate::prefdata::{NegativeSamplingStrategy, PreferenceRecord};
use crate::scorer::init_models;
use crate::text::Vocabulary;
use crate::types::{EmotionLabel, Modality, ModalityTag, PmpMask};
use crate::world::{band_token, item_rng, AvInput, AvStore, AUDIO_SEGMENTS, BAND, FRAMES};

/// Cue word for an emotion in one modality; `variant` picks one of two.
pub fn cue_word(m: Modality, e: EmotionLabel, variant: usize) -> &'static str {
    const AUDIO: [[&str; 2]; 7] = [
        ["chuckle", "laugh"],
        ["sob", "sigh"],
        ["murmur", "hum"],
        ["shout", "growl"],
        ["gasp", "shriek"],
        ["groan", "scoff"],
        ["tremble", "whimper"],
    ];
    const VIDEO: [[&str; 2]; 7] = [
        ["smile", "grin"],
        ["tears", "slump"],
        ["stillness", "nod"],
        ["frown", "glare"],
        ["stare", "jolt"],
        ["sneer", "wince"],
        ["flinch", "cower"],
    ];
    let table = match m {
        Modality::Audio => &AUDIO,
        Modality::Video => &VIDEO,
    };
    table[e.index()][variant % 2]
}

/// Stream showing `e` through the cue `variant`: tokens from one half of the band.
pub fn cue_stream(rng: &mut impl Rng, e: EmotionLabel, variant: usize, len: usize) -> Vec<u32> {
    let half = BAND / 2;
    (0..len).map(|_| band_token(e, (variant % 2) * half + rng.random_range(0..half))).collect()
}

/// Cue variant displayed by a stream, if it shows a single band half.
pub fn displayed_variant(tokens: &[u32]) -> Option<usize> {
    let half = (BAND / 2) as u32;
    let v = |t: &u32| ((t % BAND as u32) / half) as usize;
    let first = v(tokens.first()?);
    tokens.iter().all(|t| v(t) == first).then_some(first)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlantedKind {
    /// Prompts carry no hint about the answer.
    Standard,
    /// The video-relevant rejection is a bare emotion word, far more likely
    /// under a text-only model than the two-word answers.
    TextBiased,
    /// Both streams show the same emotion, as in ordinary emotion data where
    /// the modalities agree.
    Congruent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedSpec {
    pub records: usize,
    pub kind: PlantedKind,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self { records: 200, kind: PlantedKind::Standard, seed: 0 }
    }
}

/// Records, the clip store they reference, and their vocabulary.
#[derive(Debug, Clone)]
pub struct PlantedSet {
    pub records: Vec<PreferenceRecord>,
    pub store: AvStore,
    pub vocabulary: Vocabulary,
}

fn other_than(rng: &mut impl Rng, e: EmotionLabel) -> EmotionLabel {
    let others: Vec<EmotionLabel> = EmotionLabel::ALL.into_iter().filter(|&x| x != e).collect();
    *others.choose(rng).expect("six other emotions")
}

pub fn planted_dataset(spec: &PlantedSpec) -> PlantedSet {
    let mut store = AvStore::default();
    let mut records = Vec::with_capacity(spec.records);
    for i in 0..spec.records {
        let id = format!("p{i:04}");
        let mut rng = item_rng(spec.seed, &id);
        let (tag, m) = if i % 2 == 0 { (ModalityTag::Audio, Modality::Audio) } else { (ModalityTag::Visual, Modality::Video) };
        let e = EmotionLabel::ALL[rng.random_range(0..7)];
        let e_irr = if spec.kind == PlantedKind::Congruent { e } else { other_than(&mut rng, e) };
        let e_neg = other_than(&mut rng, e);
        let (v, v_irr, v_neg) = (rng.random_range(0..2), rng.random_range(0..2), rng.random_range(0..2));
        let len = |m: Modality| if m == Modality::Audio { AUDIO_SEGMENTS } else { FRAMES };
        let relevant = cue_stream(&mut rng, e, v, len(m));
        let other = cue_stream(&mut rng, e_irr, v_irr, len(m.other()));
        let chosen = match m {
            Modality::Audio => AvInput { audio_tokens: relevant, video_tokens: other },
            Modality::Video => AvInput { audio_tokens: other, video_tokens: relevant },
        };
        // Different-emotion rejection: only the prompted stream changes.
        let mut rejected = chosen.clone();
        let negative = cue_stream(&mut rng, e_neg, v_neg, len(m));
        match m {
            Modality::Audio => rejected.audio_tokens = negative,
            Modality::Video => rejected.video_tokens = negative,
        }
        let what = if m == Modality::Audio { "sound" } else { "sight" };
        let y_l_vr = match spec.kind {
            PlantedKind::TextBiased => e.to_string(),
            PlantedKind::Standard | PlantedKind::Congruent => format!("{e} {}", cue_word(m.other(), e_irr, v_irr)),
        };
        let chosen_ref = format!("{id}#chosen");
        let rejected_ref = format!("{id}#rejected");
        store.insert(chosen_ref.clone(), chosen);
        store.insert(rejected_ref.clone(), rejected);
        records.push(PreferenceRecord {
            id,
            prompt: format!("which feeling is in the {what}"),
            modality_tag: tag,
            y_w: format!("{e} {}", cue_word(m, e, v)),
            y_l_vr,
            y_l_er: format!("{e} {}", cue_word(m, e, 1 - v)),
            emotion: e,
            chosen_av_ref: chosen_ref,
            rejected_av_ref: rejected_ref,
            strategy: NegativeSamplingStrategy::DifferentEmotion,
            pmp_mask: PmpMask::for_tag(tag),
        });
    }
    let vocabulary = record_vocabulary(&records);
    PlantedSet { records, store, vocabulary }
}

/// Training state and data for a planted set. With `warm_steps > 0` the
/// scorer is first fitted by maximum likelihood on a congruent set, so the
/// run starts from a model that already reads both streams.
pub fn prepare_planted(spec: &PlantedSpec, cfg: &TrainConfig, warm_steps: u64) -> Result<(TrainState, TrainData, PlantedSet), TrainError> {
    let mut set = planted_dataset(spec);
    let mut models = init_models(&cfg.scorer)?;
    if warm_steps > 0 {
        let congruent = planted_dataset(&PlantedSpec { kind: PlantedKind::Congruent, seed: spec.seed.wrapping_add(1), ..*spec });
        let all: Vec<PreferenceRecord> = set.records.iter().chain(&congruent.records).cloned().collect();
        set.vocabulary = record_vocabulary(&all);
        let warm = tokenize_records(&congruent.records, &congruent.store, &set.vocabulary)?;
        models = supervised_warm_start(&models, &warm, cfg, warm_steps)?;
    }
    let toks = tokenize_records(&set.records, &set.store, &set.vocabulary)?;
    let data = TrainData::prepare(&models, toks)?;
    Ok((TrainState::new(models), data, set))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prefdata::verify_pmp_inputs;
    use crate::world::dominant_emotion;

    #[test]
    fn planted_rule_holds() {
        for kind in [PlantedKind::Standard, PlantedKind::TextBiased] {
            let set = planted_dataset(&PlantedSpec { records: 60, kind, seed: 3 });
            assert!(set.vocabulary.len() <= 64);
            for r in &set.records {
                verify_pmp_inputs(r, &set.store).unwrap();
                let chosen = set.store.get(&r.chosen_av_ref).unwrap();
                let m = r.modality_tag.relevant_modality().unwrap();
                assert_eq!(dominant_emotion(chosen.stream(m)), Some(r.emotion));
                assert_ne!(dominant_emotion(chosen.stream(m.other())), Some(r.emotion));
                let rejected = set.store.get(&r.rejected_av_ref).unwrap();
                assert_ne!(dominant_emotion(rejected.stream(m)), Some(r.emotion));
                let v = displayed_variant(chosen.stream(m)).unwrap();
                assert_eq!(r.y_w, format!("{} {}", r.emotion, cue_word(m, r.emotion, v)));
                assert_eq!(r.y_l_er, format!("{} {}", r.emotion, cue_word(m, r.emotion, 1 - v)));
                if kind == PlantedKind::Standard {
                    let e_irr = dominant_emotion(chosen.stream(m.other())).unwrap();
                    let v_irr = displayed_variant(chosen.stream(m.other())).unwrap();
                    assert_eq!(r.y_l_vr, format!("{} {}", r.emotion, cue_word(m.other(), e_irr, v_irr)));
                }
            }
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = planted_dataset(&PlantedSpec::default());
        let b = planted_dataset(&PlantedSpec::default());
        assert_eq!(a.records, b.records);
        let c = planted_dataset(&PlantedSpec { seed: 1, ..Default::default() });
        assert_ne!(a.records, c.records);
    }
}
