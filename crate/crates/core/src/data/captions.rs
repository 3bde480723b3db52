use serde::{Deserialize, Serialize};

use crate::data::AccidentClass;

/// The single caption used for every example at fine-tuning and inference.
pub const GENERIC_CAPTION: &str = "An accident as a result of a vehicle doing something.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaptionStyle {
    A,
    B,
}

pub fn caption(style: CaptionStyle, class: AccidentClass) -> &'static str {
    use AccidentClass::*;
    match (style, class) {
        (CaptionStyle::A, MovingAheadOrWaiting) => "The vehicle is moving ahead or waiting in the accident.",
        (CaptionStyle::A, Oncoming) => "The vehicle is hitting an oncoming vehicle in the accident.",
        (CaptionStyle::A, Turning) => "The vehicle is turning in the accident.",
        (CaptionStyle::A, Lateral) => "The vehicle is moving laterally in the accident.",
        (CaptionStyle::B, MovingAheadOrWaiting) => "An accident as a result of a vehicle moving into another vehicle.",
        (CaptionStyle::B, Oncoming) => "An accident as a result of a vehicle hitting an oncoming vehicle.",
        (CaptionStyle::B, Turning) => "An accident as a result of a vehicle turning.",
        (CaptionStyle::B, Lateral) => "An accident as a result of a vehicle moving laterally.",
    }
}

/// Class captions of one style plus the generic caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionCatalogue {
    pub style: CaptionStyle,
    pub captions: Vec<(AccidentClass, String)>,
    pub generic_caption: String,
}

impl CaptionCatalogue {
    pub fn new(style: CaptionStyle) -> Self {
        CaptionCatalogue {
            style,
            captions: AccidentClass::ALL
                .iter()
                .map(|&c| (c, caption(style, c).to_string()))
                .collect(),
            generic_caption: GENERIC_CAPTION.to_string(),
        }
    }

    pub fn caption(&self, class: AccidentClass) -> &str {
        &self.captions[class.index()].1
    }

    /// The class a caption describes, in either style. The generic caption
    /// and unknown text map to `None`.
    pub fn class_of(text: &str) -> Option<AccidentClass> {
        AccidentClass::ALL.iter().copied().find(|&c| {
            caption(CaptionStyle::A, c) == text || caption(CaptionStyle::B, c) == text
        })
    }

    /// Every caption text of both styles plus the generic one.
    pub fn all_texts() -> Vec<&'static str> {
        let mut out: Vec<&'static str> = [CaptionStyle::A, CaptionStyle::B]
            .iter()
            .flat_map(|&s| AccidentClass::ALL.iter().map(move |&c| caption(s, c)))
            .collect();
        out.push(GENERIC_CAPTION);
        out
    }
}
