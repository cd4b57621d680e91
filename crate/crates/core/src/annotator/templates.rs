//! Versioned prompt templates with `{placeholder}` slots.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;

use super::AnnotatorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template {
    pub name: &'static str,
    pub version: u32,
    pub text: &'static str,
}

macro_rules! template {
    ($name:literal, $v:literal) => {
        Template {
            name: $name,
            version: $v,
            text: include_str!(concat!("../../templates/", $name, ".v", stringify!($v), ".txt")),
        }
    };
}

pub const CAPTION_AUDIO: Template = template!("caption_audio", 1);
pub const CAPTION_VIDEO: Template = template!("caption_video", 1);
pub const CLASSIFY_EMOTION: Template = template!("classify_emotion", 1);
pub const QA_REASONING_AUDIO: Template = template!("qa_reasoning_audio", 1);
pub const QA_REASONING_VISUAL: Template = template!("qa_reasoning_visual", 1);
pub const STRESS_CUE: Template = template!("stress_cue", 1);
pub const PREF_AUDIO_REASONING: Template = template!("pref_audio_reasoning", 1);
pub const PREF_VISUAL_REASONING: Template = template!("pref_visual_reasoning", 1);
pub const PREF_MODALITY_AGREEMENT: Template = template!("pref_modality_agreement", 1);
pub const TEXT_GUESS: Template = template!("text_guess", 1);

pub const ALL: [Template; 10] = [
    CAPTION_AUDIO,
    CAPTION_VIDEO,
    CLASSIFY_EMOTION,
    QA_REASONING_AUDIO,
    QA_REASONING_VISUAL,
    STRESS_CUE,
    PREF_AUDIO_REASONING,
    PREF_VISUAL_REASONING,
    PREF_MODALITY_AGREEMENT,
    TEXT_GUESS,
];

fn slot_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").expect("valid regex"))
}

impl Template {
    /// `name@vN`, recorded in provenance and used in fixture keys.
    pub fn id(&self) -> String {
        format!("{}@v{}", self.name, self.version)
    }

    pub fn slots(&self) -> Vec<&'static str> {
        let mut out: Vec<&str> = slot_re().captures_iter(self.text).map(|c| c.get(1).expect("group").as_str()).collect();
        out.dedup();
        out
    }

    /// Fills every slot; a slot without a value is an error.
    pub fn render(&self, values: &BTreeMap<String, String>) -> Result<String, AnnotatorError> {
        let mut missing = None;
        let out = slot_re().replace_all(self.text, |c: &regex::Captures| {
            let key = &c[1];
            match values.get(key) {
                Some(v) => v.clone(),
                None => {
                    missing.get_or_insert_with(|| key.to_string());
                    String::new()
                }
            }
        });
        match missing {
            Some(slot) => Err(AnnotatorError::Template { template_id: self.id(), slot }),
            None => Ok(out.into_owned()),
        }
    }
}

pub fn by_id(id: &str) -> Option<Template> {
    ALL.into_iter().find(|t| t.id() == id)
}
