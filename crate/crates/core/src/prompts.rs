//! Fixed question templates sent alongside each video to language-model
//! based predictors.

use crate::model::Dimension;

pub const QUALITY: &str = include_str!("../assets/prompts/quality.txt");
pub const AUTHENTICITY: &str = include_str!("../assets/prompts/authenticity.txt");
pub const DISTORTION: &str = include_str!("../assets/prompts/distortion.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptKind {
    Quality,
    Authenticity,
    Distortion,
}

impl PromptKind {
    pub const ALL: [PromptKind; 3] = [PromptKind::Quality, PromptKind::Authenticity, PromptKind::Distortion];

    pub fn name(self) -> &'static str {
        match self {
            PromptKind::Quality => "quality",
            PromptKind::Authenticity => "authenticity",
            PromptKind::Distortion => "distortion",
        }
    }

    /// Template text without the trailing newline.
    pub fn text(self) -> &'static str {
        let raw = match self {
            PromptKind::Quality => QUALITY,
            PromptKind::Authenticity => AUTHENTICITY,
            PromptKind::Distortion => DISTORTION,
        };
        raw.trim_end()
    }

    pub fn parse(name: &str) -> Option<PromptKind> {
        PromptKind::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(name.trim()))
    }
}

impl From<Dimension> for PromptKind {
    fn from(d: Dimension) -> Self {
        match d {
            Dimension::Quality => PromptKind::Quality,
            Dimension::Authenticity => PromptKind::Authenticity,
        }
    }
}
