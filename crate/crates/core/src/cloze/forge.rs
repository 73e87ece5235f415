use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{check_passage, ClozeBlank, ClozePassage, ClozeQuota, ClozeRejection, Violation};
use crate::gateway::{ChatMessage, ChatRequest, DecodeParams, Gateway, GatewayError};
use crate::json_extract;
use crate::model::{CaptionRecord, Modality};
use crate::prompt::{PromptSet, TemplateError, CLOZE_GENERATION};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ForgeError {
    #[error("captions refer to different media: {0:?}")]
    MismatchedMedia(Vec<String>),
    #[error("no complete {0} caption supplied")]
    MissingCaption(Modality),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn caption_for(captions: &[CaptionRecord], m: Modality) -> Result<&CaptionRecord, ForgeError> {
    captions
        .iter()
        .find(|c| c.modality_condition == m && c.is_complete())
        .ok_or(ForgeError::MissingCaption(m))
}

/// Fills the generation template from the audio, visual and audio-visual
/// captions of one clip.
pub fn build_generation_prompt(
    prompts: &PromptSet,
    captions: &[CaptionRecord],
    quota: &ClozeQuota,
) -> Result<String, ForgeError> {
    let audio = caption_for(captions, Modality::Audio)?;
    let visual = caption_for(captions, Modality::Visual)?;
    let av = caption_for(captions, Modality::AudioVisual)?;
    if audio.media_id != visual.media_id || audio.media_id != av.media_id {
        return Err(ForgeError::MismatchedMedia(vec![
            audio.media_id.clone(),
            visual.media_id.clone(),
            av.media_id.clone(),
        ]));
    }
    let (total, a, v, x) =
        (quota.total.to_string(), quota.min_audio.to_string(), quota.min_visual.to_string(), quota.min_av.to_string());
    Ok(prompts.require(CLOZE_GENERATION).fill(&[
        ("total_number", &total),
        ("audio_number", &a),
        ("visual_number", &v),
        ("av_number", &x),
        ("audio_description", &audio.text),
        ("video_description", &visual.text),
        ("audio_video_description", &av.text),
    ])?)
}

fn parse_failure(message: impl Into<String>) -> ClozeRejection {
    ClozeRejection { violations: vec![Violation::ParseFailure { message: message.into() }] }
}

fn as_number(v: &Value) -> Option<u32> {
    match v {
        Value::Number(n) => n.as_u64().and_then(|n| u32::try_from(n).ok()),
        Value::String(s) => s.trim().trim_start_matches("BLANK_").parse().ok(),
        _ => None,
    }
}

/// Parses a generation response and checks every passage invariant,
/// returning either a typed passage or the full list of violations.
pub fn validate_cloze(raw: &str, quota: &ClozeQuota, media_id: &str) -> Result<ClozePassage, ClozeRejection> {
    if raw.trim().is_empty() {
        return Err(parse_failure("empty response"));
    }
    let doc = json_extract::object_spans(raw)
        .into_iter()
        .filter_map(json_extract::parse_object)
        .find(|o| o.contains_key("passage") && o.contains_key("blanks"))
        .ok_or_else(|| parse_failure("no JSON object with `passage` and `blanks`"))?;
    let passage = doc["passage"].as_str().ok_or_else(|| parse_failure("`passage` is not a string"))?;
    let entries = doc["blanks"].as_array().ok_or_else(|| parse_failure("`blanks` is not an array"))?;

    let mut violations = Vec::new();
    let mut blanks = Vec::with_capacity(entries.len());
    for (i, entry) in entries.iter().enumerate() {
        let Some(number) = entry.get("number").and_then(as_number) else {
            violations.push(Violation::ParseFailure { message: format!("blanks[{i}] has no usable `number`") });
            continue;
        };
        let answer = entry.get("answer").map(|a| match a {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        });
        let Some(answer) = answer else {
            violations.push(Violation::ParseFailure { message: format!("blank {number} has no `answer`") });
            continue;
        };
        let distractors: Vec<String> = match entry.get("distractors").and_then(Value::as_array) {
            Some(ds) => ds.iter().map(|d| d.as_str().map(str::to_string).unwrap_or_else(|| d.to_string())).collect(),
            None => Vec::new(),
        };
        let modality_raw = entry.get("required_modality").and_then(Value::as_str).unwrap_or("");
        let required_modality = match modality_raw.parse::<Modality>() {
            Ok(m) => m,
            Err(_) => {
                violations.push(Violation::InvalidModality { number, value: modality_raw.to_string() });
                continue;
            }
        };
        blanks.push(ClozeBlank { number, answer, distractors, required_modality });
    }
    violations.extend(check_passage(passage, &blanks, quota));
    if !violations.is_empty() {
        return Err(ClozeRejection { violations });
    }
    ClozePassage::new(media_id, passage, blanks, *quota)
}

/// Result of generating one cloze item, including the failed first
/// attempt when a regeneration was needed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeOutcome {
    pub media_id: String,
    pub passage: Option<ClozePassage>,
    pub attempts: u32,
    /// Violations of each rejected attempt, in order.
    pub rejections: Vec<ClozeRejection>,
    pub max_regenerations: u32,
}

impl ForgeOutcome {
    pub fn failed(&self) -> bool {
        self.passage.is_none()
    }
}

fn regeneration_feedback(rejection: &ClozeRejection) -> String {
    let mut msg = String::from("Your cloze test was rejected for the following reasons:\n");
    for v in &rejection.violations {
        msg.push_str("- ");
        msg.push_str(&v.to_string());
        msg.push('\n');
    }
    msg.push_str("\nFix every problem and output the complete corrected cloze test strictly in the JSON format shown above.");
    msg
}

/// Generates and validates one cloze item; on rejection re-prompts once
/// with the violation list appended before marking the item failed.
pub fn forge_item(
    gateway: &Gateway,
    backend: &str,
    prompts: &PromptSet,
    captions: &[CaptionRecord],
    quota: &ClozeQuota,
    decode: &DecodeParams,
) -> Result<ForgeOutcome, ForgeError> {
    const MAX_REGENERATIONS: u32 = 1;
    let prompt = build_generation_prompt(prompts, captions, quota)?;
    let media = caption_for(captions, Modality::AudioVisual)?.media_id.clone();
    let mut messages = vec![ChatMessage::user(prompt)];
    let mut outcome = ForgeOutcome {
        media_id: media.clone(),
        passage: None,
        attempts: 0,
        rejections: Vec::new(),
        max_regenerations: MAX_REGENERATIONS,
    };
    while outcome.attempts <= MAX_REGENERATIONS {
        outcome.attempts += 1;
        let req = ChatRequest::new(backend, "", messages.clone())
            .with_decode(decode.clone())
            .with_meta("media_id", media.clone());
        let ex = gateway.complete(req)?;
        match validate_cloze(&ex.response_text, quota, &media) {
            Ok(p) => {
                outcome.passage = Some(p);
                break;
            }
            Err(rejection) => {
                messages.push(ChatMessage::assistant(ex.response_text));
                messages.push(ChatMessage::user(regeneration_feedback(&rejection)));
                outcome.rejections.push(rejection);
            }
        }
    }
    Ok(outcome)
}
