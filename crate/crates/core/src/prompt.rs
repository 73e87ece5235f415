//! Prompt templates with `{placeholder}` substitution.
//!
//! Templates ship as text assets under `prompts/` and are compiled in; an
//! operator may override any of them by pointing [`PromptSet::with_dir`] at
//! a directory holding files of the same names.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template `{template}` needs a value for `{{{name}}}`")]
    MissingValue { template: String, name: String },
    #[error("template `{template}` has no placeholder `{{{name}}}`")]
    UnknownPlaceholder { template: String, name: String },
    #[error("reading template `{name}`: {message}")]
    Io { name: String, message: String },
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z][a-z0-9_]*)\}").expect("placeholder regex"))
}

/// Returns every `{placeholder}`-shaped token left in `text`.
pub fn residual_placeholders(text: &str) -> Vec<String> {
    placeholder_re().captures_iter(text).map(|c| c[1].to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    text: String,
}

impl Template {
    /// Builds a template from raw asset text; a single trailing newline is
    /// not part of the prompt.
    pub fn new(name: impl Into<String>, raw: &str) -> Self {
        let text = raw.strip_suffix('\n').unwrap_or(raw);
        Self { name: name.into(), text: text.to_string() }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn placeholders(&self) -> Vec<String> {
        let mut names = residual_placeholders(&self.text);
        names.sort();
        names.dedup();
        names
    }

    /// Substitutes every placeholder in one pass. Values are inserted
    /// literally, so braces inside a caption are never re-expanded.
    pub fn fill(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let map: BTreeMap<&str, &str> = values.iter().copied().collect();
        let wanted = self.placeholders();
        for key in map.keys() {
            if !wanted.iter().any(|w| w == key) {
                return Err(TemplateError::UnknownPlaceholder { template: self.name.clone(), name: key.to_string() });
            }
        }
        if let Some(missing) = wanted.iter().find(|w| !map.contains_key(w.as_str())) {
            return Err(TemplateError::MissingValue { template: self.name.clone(), name: missing.clone() });
        }
        let mut out = String::with_capacity(self.text.len() + 256);
        let mut last = 0;
        for cap in placeholder_re().captures_iter(&self.text) {
            let whole = cap.get(0).expect("match");
            out.push_str(&self.text[last..whole.start()]);
            out.push_str(map[&cap[1]]);
            last = whole.end();
        }
        out.push_str(&self.text[last..]);
        Ok(out)
    }
}

pub const DETECTIVE_SYSTEM: &str = "detective_system";
pub const DETECTIVE_TURN: &str = "detective_turn";
pub const OBSERVER_SYSTEM: &str = "observer_system";
pub const OBSERVER_TURN: &str = "observer_turn";
pub const CLOZE_GENERATION: &str = "cloze_generation";
pub const CLOZE_COMPLETION: &str = "cloze_completion";
pub const QA_DIRECT: &str = "qa_direct";
pub const QA_REASONED: &str = "qa_reasoned";

const BUILTIN: [(&str, &str); 8] = [
    (DETECTIVE_SYSTEM, include_str!("../prompts/detective_system.txt")),
    (DETECTIVE_TURN, include_str!("../prompts/detective_turn.txt")),
    (OBSERVER_SYSTEM, include_str!("../prompts/observer_system.txt")),
    (OBSERVER_TURN, include_str!("../prompts/observer_turn.txt")),
    (CLOZE_GENERATION, include_str!("../prompts/cloze_generation.txt")),
    (CLOZE_COMPLETION, include_str!("../prompts/cloze_completion.txt")),
    (QA_DIRECT, include_str!("../prompts/qa_direct.txt")),
    (QA_REASONED, include_str!("../prompts/qa_reasoned.txt")),
];

/// The full set of templates an engine run uses.
#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: BTreeMap<String, Template>,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptSet {
    pub fn builtin() -> Self {
        let templates = BUILTIN.iter().map(|(name, raw)| (name.to_string(), Template::new(*name, raw))).collect();
        Self { templates }
    }

    /// Overrides built-ins with any `<name>.txt` found in `dir`; extra files
    /// become additional templates (e.g. further QA phrasings).
    pub fn with_dir(mut self, dir: &Path) -> Result<Self, TemplateError> {
        let entries = std::fs::read_dir(dir)
            .map_err(|e| TemplateError::Io { name: dir.display().to_string(), message: e.to_string() })?;
        for entry in entries {
            let entry = entry.map_err(|e| TemplateError::Io { name: dir.display().to_string(), message: e.to_string() })?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
            let raw = std::fs::read_to_string(&path)
                .map_err(|e| TemplateError::Io { name: stem.to_string(), message: e.to_string() })?;
            self.templates.insert(stem.to_string(), Template::new(stem, &raw));
        }
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Option<&Template> {
        self.templates.get(name)
    }

    /// Lookup for templates the engine cannot run without.
    pub fn require(&self, name: &str) -> &Template {
        self.templates.get(name).unwrap_or_else(|| panic!("built-in template `{name}` is always present"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_replaces_all_and_only_placeholders() {
        let t = Template::new("t", "Observation: {observation}\n\n{ \"json\": 1 } left {calls_left}\n");
        assert_eq!(t.placeholders(), ["calls_left", "observation"]);
        let out = t.fill(&[("observation", "saw {calls_left}"), ("calls_left", "3")]).unwrap();
        assert_eq!(out, "Observation: saw {calls_left}\n\n{ \"json\": 1 } left 3");
    }

    #[test]
    fn fill_reports_missing_and_unknown() {
        let t = Template::new("t", "{a} {b}");
        assert!(matches!(t.fill(&[("a", "1")]), Err(TemplateError::MissingValue { .. })));
        assert!(matches!(t.fill(&[("a", "1"), ("b", "2"), ("c", "3")]), Err(TemplateError::UnknownPlaceholder { .. })));
    }

    #[test]
    fn builtins_have_expected_placeholders() {
        let p = PromptSet::builtin();
        assert_eq!(p.require(DETECTIVE_SYSTEM).placeholders(), ["max_calls", "tool_list"]);
        assert_eq!(p.require(DETECTIVE_TURN).placeholders(), ["calls_left", "observation"]);
        assert_eq!(p.require(OBSERVER_TURN).placeholders(), ["question"]);
        assert_eq!(
            p.require(CLOZE_GENERATION).placeholders(),
            ["audio_description", "audio_number", "audio_video_description", "av_number", "total_number", "video_description", "visual_number"]
        );
        assert_eq!(p.require(CLOZE_COMPLETION).placeholders(), ["cloze", "modality", "number", "prediction"]);
        assert_eq!(p.require(QA_DIRECT).placeholders(), ["caption", "options", "question"]);
        assert!(p.require(OBSERVER_SYSTEM).placeholders().is_empty());
    }

    #[test]
    fn directory_overrides_builtins() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("observer_turn.txt"), "Q: {question}\n").unwrap();
        std::fs::write(dir.path().join("qa_terse.txt"), "{caption}|{question}|{options}\n").unwrap();
        let p = PromptSet::builtin().with_dir(dir.path()).unwrap();
        assert_eq!(p.require(OBSERVER_TURN).text(), "Q: {question}");
        assert!(p.get("qa_terse").is_some());
    }
}
