use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Gateway;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ToolBoxError {
    #[error("tool `{0}` declared more than once")]
    DuplicateTool(String),
    #[error("tool `{tool}` routes to unregistered backend `{backend}`")]
    UnresolvedTool { tool: String, backend: String },
    #[error("tool box is empty")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolEntry {
    pub name: String,
    pub backend: String,
}

/// The named observers a detective may interrogate, each routed to a
/// gateway backend. Order of `tool_list` is the order shown to the agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ToolEntry>", into = "Vec<ToolEntry>")]
pub struct ToolBox {
    tools: BTreeMap<String, String>,
    tool_list: Vec<String>,
}

impl TryFrom<Vec<ToolEntry>> for ToolBox {
    type Error = ToolBoxError;

    fn try_from(entries: Vec<ToolEntry>) -> Result<Self, Self::Error> {
        Self::new(entries.into_iter().map(|e| (e.name, e.backend)))
    }
}

impl From<ToolBox> for Vec<ToolEntry> {
    fn from(tb: ToolBox) -> Self {
        tb.tool_list.iter().map(|n| ToolEntry { name: n.clone(), backend: tb.tools[n].clone() }).collect()
    }
}

impl ToolBox {
    pub fn new<I, N, B>(entries: I) -> Result<Self, ToolBoxError>
    where
        I: IntoIterator<Item = (N, B)>,
        N: Into<String>,
        B: Into<String>,
    {
        let mut tools = BTreeMap::new();
        let mut tool_list = Vec::new();
        for (name, backend) in entries {
            let name = name.into();
            if tools.insert(name.clone(), backend.into()).is_some() {
                return Err(ToolBoxError::DuplicateTool(name));
            }
            tool_list.push(name);
        }
        if tool_list.is_empty() {
            return Err(ToolBoxError::Empty);
        }
        Ok(Self { tools, tool_list })
    }

    pub fn tool_list(&self) -> &[String] {
        &self.tool_list
    }

    pub fn backend_for(&self, tool: &str) -> Option<&str> {
        self.tools.get(tool).map(String::as_str)
    }

    pub fn contains(&self, tool: &str) -> bool {
        self.tools.contains_key(tool)
    }

    /// Rendering used for the `{tool_list}` prompt placeholder.
    pub fn display_list(&self) -> String {
        format!("[{}]", self.tool_list.join(", "))
    }

    pub fn validate(&self, gateway: &Gateway) -> Result<(), ToolBoxError> {
        for name in &self.tool_list {
            let backend = &self.tools[name];
            if !gateway.has_backend(backend) {
                return Err(ToolBoxError::UnresolvedTool { tool: name.clone(), backend: backend.clone() });
            }
        }
        Ok(())
    }
}
