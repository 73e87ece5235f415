use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use regex::Regex;

use super::{EXHAUSTED_OBSERVATION, INITIAL_OBSERVATION, MALFORMED_OBSERVATION};
use crate::gateway::{BackendError, ChatBackend, ChatRequest, Role, SyntheticWorld, NO_RELEVANT_DETAIL};
use crate::json_extract;

/// Caption written when the investigation revealed nothing.
pub const NO_EVIDENCE_CAPTION: &str = "The recording could not be examined in detail.";

/// Scripted detective for synthetic worlds. Each turn it asks the
/// (tool, topic) question that uncovers the most facts not yet seen; when
/// nothing new can be learned or no inquiries remain, it writes a caption
/// made only of sentences observed so far.
pub struct FactGreedyDetective {
    worlds: HashMap<String, SyntheticWorld>,
}

impl FactGreedyDetective {
    pub fn new(worlds: impl IntoIterator<Item = SyntheticWorld>) -> Self {
        Self { worlds: worlds.into_iter().map(|w| (w.media_id.clone(), w)).collect() }
    }

    pub fn question_for(topic: &str) -> String {
        format!("What can you tell me about the {topic}?")
    }
}

fn turn_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)^Observation: (.*)\n\nInquiries remaining: (\d+)").expect("valid regex"))
}

fn sentences(text: &str) -> impl Iterator<Item = &str> {
    text.split_inclusive(". ").map(str::trim).filter(|s| !s.is_empty())
}

impl ChatBackend for FactGreedyDetective {
    fn send(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let id = req.metadata.get("media_id").ok_or_else(|| BackendError::Fatal("request has no media_id".into()))?;
        let world = self.worlds.get(id).ok_or_else(|| BackendError::Fatal(format!("no synthetic world `{id}`")))?;

        let mut asked = BTreeSet::new();
        let mut observed: Vec<String> = Vec::new();
        let mut calls_left = 0u32;
        for m in &req.messages {
            match m.role {
                Role::Assistant => {
                    if let Some(obj) = json_extract::first_object(&m.content) {
                        if let (Some(t), Some(q)) = (obj.get("tool").and_then(|v| v.as_str()), obj.get("question").and_then(|v| v.as_str())) {
                            asked.insert((t.to_string(), q.to_string()));
                        }
                    }
                }
                Role::User => {
                    let Some(c) = turn_re().captures(&m.content) else { continue };
                    calls_left = c[2].parse().unwrap_or(0);
                    let obs = &c[1];
                    if [INITIAL_OBSERVATION, EXHAUSTED_OBSERVATION, MALFORMED_OBSERVATION, NO_RELEVANT_DETAIL].contains(&obs) {
                        continue;
                    }
                    for s in sentences(obs) {
                        if !observed.iter().any(|o| o == s) {
                            observed.push(s.to_string());
                        }
                    }
                }
                Role::System => {}
            }
        }

        if calls_left > 0 {
            let mut covered = BTreeSet::new();
            for (tool, q) in &asked {
                if let Ok(facts) = world.revealed(tool, q) {
                    covered.extend(facts.into_iter().map(|f| f.fact_id.clone()));
                }
            }
            let mut best: Option<(usize, &str, String)> = None;
            for tool in world.reveal_policy.keys() {
                let mut topics = BTreeSet::new();
                for f in &world.facts {
                    let topic = f.cues.first().unwrap_or(&f.fact_id).clone();
                    if !topics.insert(topic.clone()) {
                        continue;
                    }
                    let q = Self::question_for(&topic);
                    let gain = world
                        .revealed(tool, &q)
                        .map(|fs| fs.iter().filter(|f| !covered.contains(&f.fact_id)).count())
                        .unwrap_or(0);
                    if gain > 0 && best.as_ref().map_or(true, |b| gain > b.0) {
                        best = Some((gain, tool, q));
                    }
                }
            }
            if let Some((_, tool, question)) = best {
                return Ok(serde_json::json!({ "tool": tool, "question": question }).to_string());
            }
        }
        if observed.is_empty() {
            return Ok(NO_EVIDENCE_CAPTION.to_string());
        }
        Ok(observed.join(" "))
    }
}
