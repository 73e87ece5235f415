//! Human review of generated cloze items: accept, edit-and-revalidate, or
//! reject, with every transition audit-logged.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ClozeBlank, ClozePassage, Violation};
use crate::model::Modality;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemState {
    Pending,
    Frozen,
    Rejected,
}

/// Replacement fields for one blank, and optionally the passage text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlankPatch {
    pub number: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distractors: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub required_modality: Option<Modality>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub passage: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum ReviewDecision {
    Accept,
    Edit { patch: BlankPatch },
    Reject { reason: String },
}

impl ReviewDecision {
    fn action(&self) -> &'static str {
        match self {
            ReviewDecision::Accept => "accept",
            ReviewDecision::Edit { .. } => "edit",
            ReviewDecision::Reject { .. } => "reject",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub item_id: String,
    pub passage: ClozePassage,
    pub state: ItemState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reject_reason: Option<String>,
    /// Bumped on every transition; clients send it back for compare-and-set.
    pub revision: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub item_id: String,
    pub reviewer: String,
    pub action: String,
    pub from: Option<ItemState>,
    pub to: ItemState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub at: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReviewError {
    #[error("unknown review item `{0}`")]
    UnknownItem(String),
    #[error("item `{0}` already queued")]
    DuplicateItem(String),
    #[error("cannot {action} item in state {from:?}")]
    IllegalTransition { from: ItemState, action: String },
    #[error("patch breaks the item: {0:?}")]
    InvalidPatch(Vec<Violation>),
    #[error("item changed since revision {expected} (now {actual})")]
    StaleRevision { expected: u32, actual: u32 },
    #[error("audit log: {0}")]
    Audit(String),
}

fn apply_patch(passage: &ClozePassage, patch: &BlankPatch) -> Result<ClozePassage, ReviewError> {
    let (media_id, mut text, mut blanks, quota) = passage.clone().into_parts();
    let blank: &mut ClozeBlank = blanks
        .iter_mut()
        .find(|b| b.number == patch.number)
        .ok_or(ReviewError::InvalidPatch(vec![Violation::NumberOutOfRange { number: patch.number }]))?;
    if let Some(a) = &patch.answer {
        blank.answer = a.clone();
    }
    if let Some(d) = &patch.distractors {
        blank.distractors = d.clone();
    }
    if let Some(m) = patch.required_modality {
        blank.required_modality = m;
    }
    if let Some(p) = &patch.passage {
        text = p.clone();
    }
    ClozePassage::new(media_id, text, blanks, quota).map_err(|r| ReviewError::InvalidPatch(r.violations))
}

/// The review state machine: pending items move to frozen (accepted) or
/// rejected; edits keep them pending and must preserve every invariant.
#[derive(Default)]
pub struct ReviewQueue {
    items: BTreeMap<String, ReviewItem>,
    audit: Vec<AuditEntry>,
    sink: Option<File>,
}

impl ReviewQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Mirrors audit entries to an append-only JSONL file.
    pub fn with_audit_log(mut self, path: &Path) -> std::io::Result<Self> {
        self.sink = Some(OpenOptions::new().create(true).append(true).open(path)?);
        Ok(self)
    }

    pub fn submit(&mut self, passage: ClozePassage, submitter: &str) -> Result<String, ReviewError> {
        let item_id = passage.media_id().to_string();
        if self.items.contains_key(&item_id) {
            return Err(ReviewError::DuplicateItem(item_id));
        }
        self.items.insert(
            item_id.clone(),
            ReviewItem { item_id: item_id.clone(), passage, state: ItemState::Pending, reject_reason: None, revision: 0 },
        );
        self.log(&item_id, submitter, "submit", None, ItemState::Pending, None)?;
        Ok(item_id)
    }

    pub fn get(&self, item_id: &str) -> Option<&ReviewItem> {
        self.items.get(item_id)
    }

    pub fn pending(&self) -> impl Iterator<Item = &ReviewItem> {
        self.items.values().filter(|i| i.state == ItemState::Pending)
    }

    pub fn frozen(&self) -> impl Iterator<Item = &ReviewItem> {
        self.items.values().filter(|i| i.state == ItemState::Frozen)
    }

    pub fn audit_log(&self) -> &[AuditEntry] {
        &self.audit
    }

    /// Applies a decision to a pending item. `expected_revision`, when
    /// given, must match the item's current revision.
    pub fn decide(
        &mut self,
        item_id: &str,
        reviewer: &str,
        decision: ReviewDecision,
        expected_revision: Option<u32>,
    ) -> Result<ReviewItem, ReviewError> {
        let item = self.items.get(item_id).ok_or_else(|| ReviewError::UnknownItem(item_id.to_string()))?;
        if let Some(expected) = expected_revision {
            if expected != item.revision {
                return Err(ReviewError::StaleRevision { expected, actual: item.revision });
            }
        }
        if item.state != ItemState::Pending {
            return Err(ReviewError::IllegalTransition { from: item.state, action: decision.action().to_string() });
        }
        let (next_passage, next_state, reason, detail) = match &decision {
            ReviewDecision::Accept => (None, ItemState::Frozen, None, None),
            ReviewDecision::Edit { patch } => {
                let p = apply_patch(&item.passage, patch)?;
                let detail = serde_json::to_string(patch).ok();
                (Some(p), ItemState::Pending, None, detail)
            }
            ReviewDecision::Reject { reason } => (None, ItemState::Rejected, Some(reason.clone()), Some(reason.clone())),
        };
        let item = self.items.get_mut(item_id).expect("checked above");
        if let Some(p) = next_passage {
            item.passage = p;
        }
        item.state = next_state;
        item.reject_reason = reason;
        item.revision += 1;
        let snapshot = item.clone();
        self.log(item_id, reviewer, decision.action(), Some(ItemState::Pending), next_state, detail)?;
        Ok(snapshot)
    }

    fn log(
        &mut self,
        item_id: &str,
        reviewer: &str,
        action: &str,
        from: Option<ItemState>,
        to: ItemState,
        detail: Option<String>,
    ) -> Result<(), ReviewError> {
        let entry = AuditEntry {
            seq: self.audit.len() as u64 + 1,
            item_id: item_id.to_string(),
            reviewer: reviewer.to_string(),
            action: action.to_string(),
            from,
            to,
            detail,
            at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        };
        if let Some(f) = &mut self.sink {
            let line = serde_json::to_string(&entry).map_err(|e| ReviewError::Audit(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| ReviewError::Audit(e.to_string()))?;
        }
        self.audit.push(entry);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloze::fixtures::default_passage;

    #[test]
    fn accept_freezes() {
        let mut q = ReviewQueue::new();
        let id = q.submit(default_passage("clip1"), "forge").unwrap();
        let item = q.decide(&id, "alice", ReviewDecision::Accept, Some(0)).unwrap();
        assert_eq!(item.state, ItemState::Frozen);
        assert_eq!(q.frozen().count(), 1);
        assert!(matches!(
            q.decide(&id, "alice", ReviewDecision::Accept, None),
            Err(ReviewError::IllegalTransition { from: ItemState::Frozen, .. })
        ));
        assert_eq!(q.audit_log().len(), 2);
        assert_eq!(q.audit_log()[1].reviewer, "alice");
    }

    #[test]
    fn edit_repairs_then_accept() {
        let mut q = ReviewQueue::new();
        let id = q.submit(default_passage("clip1"), "forge").unwrap();
        let patch = BlankPatch { number: 3, distractors: Some(vec!["x".into(), "y".into(), "z".into()]), ..Default::default() };
        let item = q.decide(&id, "bob", ReviewDecision::Edit { patch }, Some(0)).unwrap();
        assert_eq!(item.state, ItemState::Pending);
        assert_eq!(item.passage.blank(3).unwrap().distractors, ["x", "y", "z"]);
        assert!(matches!(q.decide(&id, "bob", ReviewDecision::Accept, Some(0)), Err(ReviewError::StaleRevision { .. })));
        assert_eq!(q.decide(&id, "bob", ReviewDecision::Accept, Some(1)).unwrap().state, ItemState::Frozen);
    }

    #[test]
    fn edit_that_breaks_invariant_is_refused() {
        let mut q = ReviewQueue::new();
        let id = q.submit(default_passage("clip1"), "forge").unwrap();
        let patch = BlankPatch { number: 2, distractors: Some(vec!["ans2".into(), "p".into(), "q".into()]), ..Default::default() };
        match q.decide(&id, "bob", ReviewDecision::Edit { patch }, None) {
            Err(ReviewError::InvalidPatch(v)) => assert_eq!(v, vec![Violation::DuplicateDistractor { number: 2 }]),
            other => panic!("{other:?}"),
        }
        let item = q.get(&id).unwrap();
        assert_eq!(item.revision, 0);
        assert_eq!(item.passage, default_passage("clip1"));

        let patch = BlankPatch { number: 1, required_modality: Some(Modality::Visual), ..Default::default() };
        // 12 audio -> 11 is still >= 10, so this one is fine
        assert!(q.decide(&id, "bob", ReviewDecision::Edit { patch }, None).is_ok());
        let patch = BlankPatch { number: 99, answer: Some("x".into()), ..Default::default() };
        assert!(matches!(q.decide(&id, "bob", ReviewDecision::Edit { patch }, None), Err(ReviewError::InvalidPatch(_))));
    }

    #[test]
    fn reject_logs_reason_to_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.jsonl");
        let mut q = ReviewQueue::new().with_audit_log(&path).unwrap();
        let id = q.submit(default_passage("clip1"), "forge").unwrap();
        q.decide(&id, "carol", ReviewDecision::Reject { reason: "blank 4 needs world knowledge".into() }, None).unwrap();
        assert_eq!(q.get(&id).unwrap().reject_reason.as_deref(), Some("blank 4 needs world knowledge"));
        let lines = std::fs::read_to_string(&path).unwrap();
        assert_eq!(lines.lines().count(), 2);
        assert!(lines.contains("blank 4 needs world knowledge"));
        assert!(matches!(q.submit(default_passage("clip1"), "forge"), Err(ReviewError::DuplicateItem(_))));
        assert!(matches!(q.decide("nope", "x", ReviewDecision::Accept, None), Err(ReviewError::UnknownItem(_))));
    }
}
