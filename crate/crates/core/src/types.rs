//! Domain enumerations shared by every pipeline stage.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Which modality a prompt is about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModalityTag {
    #[serde(rename = "AV")]
    AudioVisual,
    #[serde(rename = "A")]
    Audio,
    #[serde(rename = "V")]
    Visual,
}

impl ModalityTag {
    pub const ALL: [ModalityTag; 3] = [ModalityTag::AudioVisual, ModalityTag::Audio, ModalityTag::Visual];

    pub fn index(self) -> usize {
        match self {
            ModalityTag::AudioVisual => 0,
            ModalityTag::Audio => 1,
            ModalityTag::Visual => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModalityTag::AudioVisual => "AV",
            ModalityTag::Audio => "A",
            ModalityTag::Visual => "V",
        }
    }

    /// The single modality a prompt asks about, if it asks about only one.
    pub fn relevant_modality(self) -> Option<Modality> {
        self.irrelevant_modality().map(Modality::other)
    }

    /// The modality a prompt does not ask about, if any.
    pub fn irrelevant_modality(self) -> Option<Modality> {
        match self {
            ModalityTag::AudioVisual => None,
            ModalityTag::Audio => Some(Modality::Video),
            ModalityTag::Visual => Some(Modality::Audio),
        }
    }
}

impl fmt::Display for ModalityTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModalityTag {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "AV" | "av" => Ok(ModalityTag::AudioVisual),
            "A" | "a" => Ok(ModalityTag::Audio),
            "V" | "v" => Ok(ModalityTag::Visual),
            other => Err(ParseEnumError::new("modality tag", other)),
        }
    }
}

/// A single non-text input stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    Video,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Audio => Modality::Video,
            Modality::Video => Modality::Audio,
        }
    }
}

/// Seven-way emotion label set: neutral plus six basic emotions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmotionLabel {
    Happy,
    Sad,
    Neutral,
    Angry,
    Surprise,
    Disgust,
    Fear,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; 7] = [
        EmotionLabel::Happy,
        EmotionLabel::Sad,
        EmotionLabel::Neutral,
        EmotionLabel::Angry,
        EmotionLabel::Surprise,
        EmotionLabel::Disgust,
        EmotionLabel::Fear,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EmotionLabel::Happy => "happy",
            EmotionLabel::Sad => "sad",
            EmotionLabel::Neutral => "neutral",
            EmotionLabel::Angry => "angry",
            EmotionLabel::Surprise => "surprise",
            EmotionLabel::Disgust => "disgust",
            EmotionLabel::Fear => "fear",
        }
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmotionLabel {
    type Err = ParseEnumError;

    /// Accepts the canonical names and a few common synonyms, case-insensitively.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .trim_matches(|c: char| !c.is_alphanumeric())
            .to_ascii_lowercase();
        let label = match norm.as_str() {
            "happy" | "happiness" | "joy" => EmotionLabel::Happy,
            "sad" | "sadness" => EmotionLabel::Sad,
            "neutral" => EmotionLabel::Neutral,
            "angry" | "anger" => EmotionLabel::Angry,
            "surprise" | "surprised" => EmotionLabel::Surprise,
            "disgust" | "disgusted" => EmotionLabel::Disgust,
            "fear" | "fearful" | "afraid" => EmotionLabel::Fear,
            _ => return Err(ParseEnumError::new("emotion label", s)),
        };
        Ok(label)
    }
}

/// Records which side of the chosen input a rejected input preserves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PmpMask {
    /// Both modalities come from the candidate.
    None,
    /// Audio copied from the chosen input (visual prompts).
    KeepAudio,
    /// Video copied from the chosen input (audio prompts).
    KeepVideo,
}

impl PmpMask {
    pub fn for_tag(tag: ModalityTag) -> Self {
        match tag {
            ModalityTag::AudioVisual => PmpMask::None,
            ModalityTag::Audio => PmpMask::KeepVideo,
            ModalityTag::Visual => PmpMask::KeepAudio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown {kind}: {value:?}")]
pub struct ParseEnumError {
    pub kind: &'static str,
    pub value: String,
}

impl ParseEnumError {
    fn new(kind: &'static str, value: &str) -> Self {
        Self { kind, value: value.to_string() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tag_serializes_to_short_names() {
        assert_eq!(serde_json::to_string(&ModalityTag::Audio).unwrap(), "\"A\"");
        assert_eq!(serde_json::to_string(&ModalityTag::AudioVisual).unwrap(), "\"AV\"");
        let back: ModalityTag = serde_json::from_str("\"V\"").unwrap();
        assert_eq!(back, ModalityTag::Visual);
    }

    #[test]
    fn emotion_parse_accepts_synonyms() {
        assert_eq!("Happiness".parse::<EmotionLabel>().unwrap(), EmotionLabel::Happy);
        assert_eq!(" fearful.".parse::<EmotionLabel>().unwrap(), EmotionLabel::Fear);
        assert!("contempt".parse::<EmotionLabel>().is_err());
        for e in EmotionLabel::ALL {
            assert_eq!(e.as_str().parse::<EmotionLabel>().unwrap(), e);
            assert_eq!(EmotionLabel::from_index(e.index()), Some(e));
        }
    }

    #[test]
    fn mask_follows_prompt_modality() {
        assert_eq!(PmpMask::for_tag(ModalityTag::Audio), PmpMask::KeepVideo);
        assert_eq!(PmpMask::for_tag(ModalityTag::Visual), PmpMask::KeepAudio);
        assert_eq!(PmpMask::for_tag(ModalityTag::AudioVisual), PmpMask::None);
    }
}
