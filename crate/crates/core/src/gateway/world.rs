use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BackendError, ChatBackend, ChatRequest};
use crate::model::Modality;

/// Returned by a synthetic observer when no fact matches the question.
pub const NO_RELEVANT_DETAIL: &str = "No relevant detail was observed.";

/// The maskable span of a fact, used to author cloze blanks from a world.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactDetail {
    pub answer: String,
    pub distractors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldFact {
    pub fact_id: String,
    pub modality: Modality,
    pub statement: String,
    /// Extra words that make a question match this fact, besides its id.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cues: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<FactDetail>,
}

/// Ground truth for one clip plus which tool can see which facts. Backs
/// deterministic observers that never state anything outside the world.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub media_id: String,
    pub facts: Vec<WorldFact>,
    /// tool name -> ids of the facts that tool can reveal
    pub reveal_policy: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorldError {
    #[error("tool `{0}` has no reveal policy in this world")]
    UnknownTool(String),
    #[error("fact id `{0}` is not unique")]
    DuplicateFact(String),
    #[error("fact `{0}` is not reachable through any tool")]
    UnreachableFact(String),
    #[error("reveal policy of `{tool}` names unknown fact `{fact}`")]
    UnknownFact { tool: String, fact: String },
    #[error("fact `{0}`: detail answer does not occur in the statement")]
    DetailNotInStatement(String),
    #[error("no synthetic world for media `{0}`")]
    NoWorld(String),
}

fn contains_word(haystack: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let boundary = |c: Option<char>| c.map_or(true, |c| !c.is_alphanumeric());
    let mut from = 0;
    while let Some(pos) = haystack[from..].find(needle) {
        let start = from + pos;
        let end = start + needle.len();
        if boundary(haystack[..start].chars().next_back()) && boundary(haystack[end..].chars().next()) {
            return true;
        }
        from = start + needle.chars().next().map_or(1, char::len_utf8);
    }
    false
}

impl WorldFact {
    pub fn matches(&self, question_lower: &str) -> bool {
        contains_word(question_lower, &self.fact_id.to_lowercase())
            || self.cues.iter().any(|c| contains_word(question_lower, &c.to_lowercase()))
    }
}

impl SyntheticWorld {
    pub fn validate(&self) -> Result<(), WorldError> {
        let mut ids = HashSet::new();
        for f in &self.facts {
            if !ids.insert(f.fact_id.as_str()) {
                return Err(WorldError::DuplicateFact(f.fact_id.clone()));
            }
            if let Some(d) = &f.detail {
                if !f.statement.contains(&d.answer) {
                    return Err(WorldError::DetailNotInStatement(f.fact_id.clone()));
                }
            }
        }
        let mut reachable = HashSet::new();
        for (tool, facts) in &self.reveal_policy {
            for id in facts {
                if !ids.contains(id.as_str()) {
                    return Err(WorldError::UnknownFact { tool: tool.clone(), fact: id.clone() });
                }
                reachable.insert(id.as_str());
            }
        }
        if let Some(f) = self.facts.iter().find(|f| !reachable.contains(f.fact_id.as_str())) {
            return Err(WorldError::UnreachableFact(f.fact_id.clone()));
        }
        Ok(())
    }

    pub fn fact(&self, id: &str) -> Option<&WorldFact> {
        self.facts.iter().find(|f| f.fact_id == id)
    }

    /// Facts `tool` reveals for `question`, in world order.
    pub fn revealed(&self, tool: &str, question: &str) -> Result<Vec<&WorldFact>, WorldError> {
        let allowed = self.reveal_policy.get(tool).ok_or_else(|| WorldError::UnknownTool(tool.to_string()))?;
        let q = question.to_lowercase();
        Ok(self.facts.iter().filter(|f| allowed.contains(&f.fact_id) && f.matches(&q)).collect())
    }

    /// All fact statements joined, the world's full description.
    pub fn full_text(&self) -> String {
        self.facts.iter().map(|f| f.statement.as_str()).collect::<Vec<_>>().join(" ")
    }
}

/// Deterministic observer: the statements of every fact the tool may
/// reveal that the question matches, space-joined, or the sentinel.
pub fn observer_answer(world: &SyntheticWorld, tool: &str, question: &str) -> Result<String, WorldError> {
    let facts = world.revealed(tool, question)?;
    if facts.is_empty() {
        return Ok(NO_RELEVANT_DETAIL.to_string());
    }
    Ok(facts.iter().map(|f| f.statement.as_str()).collect::<Vec<_>>().join(" "))
}

/// Gateway backend answering observer prompts from synthetic worlds keyed
/// by media id.
pub struct ObserverBackend {
    tool: String,
    worlds: HashMap<String, SyntheticWorld>,
}

impl ObserverBackend {
    pub fn new(tool: impl Into<String>, worlds: impl IntoIterator<Item = SyntheticWorld>) -> Self {
        Self { tool: tool.into(), worlds: worlds.into_iter().map(|w| (w.media_id.clone(), w)).collect() }
    }
}

impl ChatBackend for ObserverBackend {
    fn send(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let world = match req.media() {
            Some(m) => self.worlds.get(&m.id).ok_or_else(|| BackendError::Fatal(WorldError::NoWorld(m.id.clone()).to_string()))?,
            None if self.worlds.len() == 1 => self.worlds.values().next().expect("one world"),
            None => return Err(BackendError::Fatal("observer request carries no media reference".into())),
        };
        let content = req.last_user().map(|m| m.content.as_str()).unwrap_or_default();
        let question = content.strip_prefix("Question:").map(str::trim).unwrap_or(content);
        observer_answer(world, &self.tool, question).map_err(|e| BackendError::Fatal(e.to_string()))
    }
}
