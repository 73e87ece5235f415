use std::collections::BTreeMap;

use serde_json::{Map, Value};

use super::{Letter, NOT_GIVEN};
use crate::gateway::{BackendError, ChatBackend, ChatRequest};

/// Offline judge that decides on option content alone: a blank gets the
/// option whose text occurs in the caption as whole words (the longest such
/// option wins), else E. Because it never looks at letters, its verdicts
/// do not depend on the rendering seed.
#[derive(Debug, Default, Clone, Copy)]
pub struct ContentJudge;

impl ContentJudge {
    pub fn new() -> Self {
        Self
    }

    /// Picks options for every blank found in a completion prompt.
    pub fn judge(prompt: &str) -> Option<BTreeMap<u32, (Letter, String)>> {
        let (cloze, caption) = split_prompt(prompt)?;
        let caption = caption.to_lowercase();
        let mut picks = BTreeMap::new();
        for (number, options) in option_groups(cloze) {
            let best = options
                .iter()
                .filter(|(l, text)| *l != Letter::E && !text.is_empty() && contains_words(&caption, &text.to_lowercase()))
                .max_by_key(|(_, text)| text.len())
                .cloned()
                .unwrap_or((Letter::E, NOT_GIVEN.to_string()));
            picks.insert(number, best);
        }
        Some(picks)
    }
}

fn split_prompt(prompt: &str) -> Option<(&str, &str)> {
    let cap_at = prompt.rfind("\nCaption:\n\n")?;
    let caption_start = cap_at + "\nCaption:\n\n".len();
    let caption_end = prompt[caption_start..].rfind("\n\nOutput:").map_or(prompt.len(), |i| caption_start + i);
    let opts_at = prompt[..cap_at].rfind("\n\nOptions:")?;
    Some((&prompt[opts_at..cap_at], &prompt[caption_start..caption_end]))
}

fn option_groups(block: &str) -> Vec<(u32, Vec<(Letter, String)>)> {
    let mut groups: Vec<(u32, Vec<(Letter, String)>)> = Vec::new();
    for line in block.lines() {
        let line = line.trim();
        if let Some(n) = line.strip_prefix("[BLANK_").and_then(|r| r.strip_suffix(']')) {
            if let Ok(n) = n.parse() {
                groups.push((n, Vec::new()));
            }
            continue;
        }
        let mut chars = line.chars();
        if let (Some(c), Some(':')) = (chars.next(), chars.next()) {
            if let (Some(letter), Some(group)) = (Letter::from_char(c), groups.last_mut()) {
                group.1.push((letter, chars.as_str().trim().to_string()));
            }
        }
    }
    groups
}

fn contains_words(haystack: &str, needle: &str) -> bool {
    let boundary = |c: Option<char>| c.map_or(true, |c| !c.is_alphanumeric());
    haystack.match_indices(needle).any(|(i, _)| {
        boundary(haystack[..i].chars().next_back()) && boundary(haystack[i + needle.len()..].chars().next())
    })
}

impl ChatBackend for ContentJudge {
    fn send(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let prompt = req.last_user().map(|m| m.content.as_str()).unwrap_or_default();
        let picks = Self::judge(prompt).ok_or_else(|| BackendError::Fatal("not a cloze completion prompt".into()))?;
        let obj: Map<String, Value> =
            picks.into_iter().map(|(n, (l, text))| (n.to_string(), Value::String(format!("{l}: {text}")))).collect();
        Ok(serde_json::to_string_pretty(&Value::Object(obj)).expect("string map serializes"))
    }
}
