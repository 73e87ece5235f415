use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;

use serde::Deserialize;

use super::{BackendError, ChatBackend, ChatRequest};

/// One canned step of a scripted backend.
#[derive(Debug, Clone, PartialEq)]
pub enum ScriptStep {
    Reply(String),
    Fail(BackendError),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FixtureStep {
    Reply(String),
    Fail { fail: String, #[serde(default)] message: String },
}

/// Replays a fixed queue of responses, one per call, in order.
///
/// Consumption is serialized, so under concurrent callers the queue order
/// follows call arrival order; deterministic tests drive it sequentially.
pub struct ScriptedBackend {
    queue: Mutex<VecDeque<ScriptStep>>,
}

impl ScriptedBackend {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::from_steps(responses.into_iter().map(|r| ScriptStep::Reply(r.into())).collect())
    }

    pub fn from_steps(steps: Vec<ScriptStep>) -> Self {
        Self { queue: Mutex::new(steps.into()) }
    }

    /// Loads a fixture: a JSON array whose entries are either response
    /// strings or `{"fail": "transient" | "auth" | "fatal", "message": ...}`
    /// fault injections.
    pub fn from_fixture(path: &Path) -> Result<Self, String> {
        let raw = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let steps: Vec<FixtureStep> = serde_json::from_str(&raw).map_err(|e| format!("{}: {e}", path.display()))?;
        let steps = steps
            .into_iter()
            .map(|s| match s {
                FixtureStep::Reply(r) => Ok(ScriptStep::Reply(r)),
                FixtureStep::Fail { fail, message } => match fail.as_str() {
                    "transient" => Ok(ScriptStep::Fail(BackendError::Transient(message))),
                    "auth" => Ok(ScriptStep::Fail(BackendError::Auth(message))),
                    "fatal" => Ok(ScriptStep::Fail(BackendError::Fatal(message))),
                    other => Err(format!("{}: unknown failure kind `{other}`", path.display())),
                },
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_steps(steps))
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().expect("script poisoned").len()
    }
}

impl ChatBackend for ScriptedBackend {
    fn send(&self, _req: &ChatRequest) -> Result<String, BackendError> {
        match self.queue.lock().expect("script poisoned").pop_front() {
            Some(ScriptStep::Reply(r)) => Ok(r),
            Some(ScriptStep::Fail(e)) => Err(e),
            None => Err(BackendError::Fatal("script exhausted".into())),
        }
    }
}

/// A backend computed from the request by a closure; the building block
/// for policy-driven mock detectives and judges.
pub struct FnBackend<F> {
    f: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self { f }
    }
}

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync,
{
    fn send(&self, req: &ChatRequest) -> Result<String, BackendError> {
        (self.f)(req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ChatMessage;

    #[test]
    fn fixture_with_fault_injection() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.json");
        std::fs::write(&p, r#"["a", {"fail": "transient", "message": "503"}, "b"]"#).unwrap();
        let b = ScriptedBackend::from_fixture(&p).unwrap();
        let r = ChatRequest::new("x", "", vec![ChatMessage::user("q")]);
        assert_eq!(b.send(&r).unwrap(), "a");
        assert_eq!(b.send(&r), Err(BackendError::Transient("503".into())));
        assert_eq!(b.send(&r).unwrap(), "b");
        assert!(matches!(b.send(&r), Err(BackendError::Fatal(_))));

        std::fs::write(&p, r#"[{"fail": "sometimes"}]"#).unwrap();
        assert!(ScriptedBackend::from_fixture(&p).is_err());
    }
}
