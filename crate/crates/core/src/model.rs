//! Domain types shared by every engine: media references, modalities,
//! captions and persisted run records.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// A raw perceptual channel a clip carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Audio,
    Visual,
}

/// The modality a caption is conditioned on, or a cloze blank requires.
///
/// `AudioVisual` is its own value: a blank that needs both channels is not
/// an audio blank that also happens to be visual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "audio")]
    Audio,
    #[serde(rename = "visual")]
    Visual,
    #[serde(rename = "audio-visual")]
    AudioVisual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Audio, Modality::Visual, Modality::AudioVisual];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Visual => "visual",
            Modality::AudioVisual => "audio-visual",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown modality `{0}` (expected audio, visual or audio-visual)")]
pub struct ParseModalityError(pub String);

impl FromStr for Modality {
    type Err = ParseModalityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "audio" => Ok(Modality::Audio),
            "visual" | "video" => Ok(Modality::Visual),
            "audio-visual" | "audio_visual" | "audiovisual" | "av" => Ok(Modality::AudioVisual),
            _ => Err(ParseModalityError(s.to_string())),
        }
    }
}

/// An opaque reference to one clip. The engine never decodes media; the
/// uri is handed to backends as-is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediaRef {
    pub id: String,
    pub uri: String,
    #[serde(rename = "modalities")]
    pub modality_set: BTreeSet<Channel>,
    pub duration_s: f64,
    #[serde(rename = "domain", default, skip_serializing_if = "Option::is_none")]
    pub domain_tag: Option<String>,
}

impl MediaRef {
    pub fn new(id: impl Into<String>, uri: impl Into<String>, channels: &[Channel], duration_s: f64) -> Self {
        Self {
            id: id.into(),
            uri: uri.into(),
            modality_set: channels.iter().copied().collect(),
            duration_s,
            domain_tag: None,
        }
    }

    pub fn has(&self, channel: Channel) -> bool {
        self.modality_set.contains(&channel)
    }
}

/// Word count as whitespace-separated tokens.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CaptionError {
    #[error("caption word_count {declared} does not match text ({actual} words)")]
    WordCountMismatch { declared: usize, actual: usize },
}

#[derive(Deserialize)]
struct CaptionWire {
    media_id: String,
    source_model: String,
    modality_condition: Modality,
    text: String,
    #[serde(default)]
    word_count: Option<usize>,
}

/// One caption produced by some model for one clip under one modality
/// condition. `word_count` is always derived from `text`; a serialized
/// record that disagrees is rejected on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CaptionWire")]
pub struct CaptionRecord {
    pub media_id: String,
    pub source_model: String,
    pub modality_condition: Modality,
    pub text: String,
    pub word_count: usize,
}

impl TryFrom<CaptionWire> for CaptionRecord {
    type Error = CaptionError;

    fn try_from(w: CaptionWire) -> Result<Self, Self::Error> {
        let actual = word_count(&w.text);
        if let Some(declared) = w.word_count {
            if declared != actual {
                return Err(CaptionError::WordCountMismatch { declared, actual });
            }
        }
        Ok(Self {
            media_id: w.media_id,
            source_model: w.source_model,
            modality_condition: w.modality_condition,
            text: w.text,
            word_count: actual,
        })
    }
}

impl CaptionRecord {
    pub fn new(
        media_id: impl Into<String>,
        source_model: impl Into<String>,
        modality_condition: Modality,
        text: impl Into<String>,
    ) -> Self {
        let text = text.into();
        Self {
            media_id: media_id.into(),
            source_model: source_model.into(),
            modality_condition,
            word_count: word_count(&text),
            text,
        }
    }

    pub fn is_complete(&self) -> bool {
        !self.text.trim().is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Investigation,
    ClozeGen,
    ClozeEval,
    Cascade,
    ArenaMatch,
}

/// One persisted unit of work. The payload is the kind-specific document
/// serialized as JSON; `created_at` is informational only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub kind: RunKind,
    pub payload: Value,
    pub created_at: String,
}

impl RunRecord {
    pub fn new<T: Serialize>(run_id: impl Into<String>, kind: RunKind, payload: &T) -> serde_json::Result<Self> {
        Ok(Self {
            run_id: run_id.into(),
            kind,
            payload: serde_json::to_value(payload)?,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        })
    }

    pub fn payload_as<T: for<'de> Deserialize<'de>>(&self) -> serde_json::Result<T> {
        serde_json::from_value(self.payload.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("fraction {0} is outside [0, 1]")]
pub struct OutOfRange(pub f64);

const PCT_EPS: f64 = 1e-9;

/// Renders a fraction as a percentage with one decimal, rounding half up.
///
/// The tiny epsilon absorbs binary representation error so that e.g. 0.1235
/// lands on 12.4 rather than 12.3.
pub fn round_pct(x: f64) -> Result<f64, OutOfRange> {
    if !(0.0..=1.0).contains(&x) || x.is_nan() {
        return Err(OutOfRange(x));
    }
    let tenths = (x * 1000.0 + 0.5 + PCT_EPS).floor();
    Ok(tenths / 10.0)
}

/// Exact half-up percentage of `num / den` with one decimal, computed in
/// integer arithmetic. Returns 0.0 for an empty denominator.
pub fn pct_of(num: usize, den: usize) -> f64 {
    pct_of_dp(num, den, 1)
}

/// [`pct_of`] with `decimals` places.
pub fn pct_of_dp(num: usize, den: usize, decimals: u32) -> f64 {
    if den == 0 {
        return 0.0;
    }
    let scale = 10u128.pow(decimals);
    let (num, den) = (num as u128, den as u128);
    let units = (num * 200 * scale + den) / (2 * den);
    units as f64 / scale as f64
}
