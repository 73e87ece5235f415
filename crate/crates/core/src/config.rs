//! Run configuration: backends, tool routing, quotas, budgets, seeds and
//! paths, resolved once before any backend is contacted.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::arena::EloConfig;
use crate::cloze::{ClozeQuota, ContentJudge};
use crate::detective::{FactGreedyDetective, DEFAULT_MAX_CALLS};
use crate::gateway::{
    ChatBackend, DecodeParams, Gateway, HttpChatBackend, HttpConfig, ObserverBackend, ResponseCache, RetryPolicy,
    ScriptedBackend, SyntheticWorld, ToolBox, ToolBoxError, ToolEntry,
};
use crate::jsonl::read_jsonl;
use crate::prompt::PromptSet;
use crate::synth::ClozeAuthorBackend;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Invalid(String),
    #[error("config: backend `{backend}`: {message}")]
    Backend { backend: String, message: String },
    #[error("config: role `{role}` names unknown backend `{backend}`")]
    UnknownRoleBackend { role: String, backend: String },
    #[error(transparent)]
    ToolBox(#[from] ToolBoxError),
    #[error("config: {path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// How one backend id is served.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Http(HttpConfig),
    /// Canned responses from a JSON fixture.
    Scripted { fixture: PathBuf },
    /// Deterministic observer over the configured synthetic worlds.
    Observer { tool: String },
    /// Offline cloze judge that matches option text against the caption.
    ContentJudge,
    /// Writes the ground-truth cloze of a synthetic world.
    ClozeAuthor,
    /// Scripted fact-greedy detective over the synthetic worlds.
    GreedyDetective,
}

/// Which backend plays each role.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roles {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detective: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paths {
    #[serde(default = "default_run_root")]
    pub run_root: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts_dir: Option<PathBuf>,
    /// JSONL of synthetic worlds backing observer/author/greedy backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worlds: Option<PathBuf>,
}

fn default_run_root() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for Paths {
    fn default() -> Self {
        Self { run_root: default_run_root(), cache_dir: None, prompts_dir: None, worlds: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectiveSettings {
    #[serde(default = "default_max_calls")]
    pub max_calls: u32,
    /// Budgets visited by the step sweep.
    #[serde(default = "default_budgets")]
    pub budgets: Vec<u32>,
}

fn default_max_calls() -> u32 {
    DEFAULT_MAX_CALLS
}

fn default_budgets() -> Vec<u32> {
    (0..=DEFAULT_MAX_CALLS).collect()
}

impl Default for DetectiveSettings {
    fn default() -> Self {
        Self { max_calls: default_max_calls(), budgets: default_budgets() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub backends: BTreeMap<String, BackendSpec>,
    #[serde(default)]
    pub toolbox: Vec<ToolEntry>,
    #[serde(default)]
    pub roles: Roles,
    #[serde(default)]
    pub quota: ClozeQuota,
    #[serde(default)]
    pub detective: DetectiveSettings,
    #[serde(default)]
    pub decode: DecodeParams,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub elo: EloConfig,
    #[serde(default = "default_qa_template")]
    pub qa_template: String,
    #[serde(default)]
    pub paths: Paths,
}

fn default_parallelism() -> usize {
    4
}

fn default_qa_template() -> String {
    crate::prompt::QA_DIRECT.to_string()
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

fn canonical(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Object(m) => {
            let sorted: BTreeMap<String, Value> = m.into_iter().map(|(k, v)| (k, canonical(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(a) => Value::Array(a.into_iter().map(canonical).collect()),
        other => other,
    }
}

impl RunConfig {
    /// Makes relative paths relative to `base` (normally the directory of
    /// the config file) and checks cross references.
    pub fn resolve(mut self, base: &Path) -> Result<Self, ConfigError> {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.run_root);
        for p in [&mut self.paths.cache_dir, &mut self.paths.prompts_dir, &mut self.paths.worlds].into_iter().flatten() {
            fix(p);
        }
        for spec in self.backends.values_mut() {
            if let BackendSpec::Scripted { fixture } = spec {
                fix(fixture);
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.parallelism == 0 {
            return Err(ConfigError::Invalid("parallelism must be at least 1".into()));
        }
        if !self.quota.is_satisfiable() {
            return Err(ConfigError::Invalid("cloze quota minima exceed the total".into()));
        }
        self.elo.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (role, id) in [
            ("detective", &self.roles.detective),
            ("generator", &self.roles.generator),
            ("judge", &self.roles.judge),
            ("qa", &self.roles.qa),
        ] {
            if let Some(id) = id {
                if !self.backends.contains_key(id) {
                    return Err(ConfigError::UnknownRoleBackend { role: role.into(), backend: id.clone() });
                }
            }
        }
        for t in &self.toolbox {
            if !self.backends.contains_key(&t.backend) {
                return Err(ToolBoxError::UnresolvedTool { tool: t.name.clone(), backend: t.backend.clone() }.into());
            }
        }
        let needs_worlds = self.backends.values().any(|b| {
            matches!(b, BackendSpec::Observer { .. } | BackendSpec::ClozeAuthor | BackendSpec::GreedyDetective)
        });
        if needs_worlds && self.paths.worlds.is_none() {
            return Err(ConfigError::Invalid("synthetic backends need `paths.worlds`".into()));
        }
        Ok(())
    }

    /// sha256 over the canonical JSON form; key order in the source file
    /// does not matter. Where runs and the cache live is left out since it
    /// cannot change any result.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.paths.run_root = PathBuf::new();
        c.paths.cache_dir = None;
        let v = canonical(serde_json::to_value(&c).expect("config serializes"));
        hex::encode(Sha256::digest(serde_json::to_string(&v).expect("value serializes").as_bytes()))
    }

    pub fn toolbox(&self) -> Result<ToolBox, ConfigError> {
        Ok(ToolBox::try_from(self.toolbox.clone())?)
    }

    pub fn prompts(&self) -> Result<PromptSet, ConfigError> {
        let set = PromptSet::builtin();
        match &self.paths.prompts_dir {
            Some(dir) => set.with_dir(dir).map_err(|e| ConfigError::Io { path: dir.clone(), message: e.to_string() }),
            None => Ok(set),
        }
    }

    pub fn worlds(&self) -> Result<Vec<SyntheticWorld>, ConfigError> {
        match &self.paths.worlds {
            Some(p) => read_jsonl(p).map_err(|e| ConfigError::Io { path: p.clone(), message: e.to_string() }),
            None => Ok(Vec::new()),
        }
    }

    pub fn role(&self, role: &str) -> Result<&str, ConfigError> {
        let id = match role {
            "detective" => &self.roles.detective,
            "generator" => &self.roles.generator,
            "judge" => &self.roles.judge,
            "qa" => &self.roles.qa,
            other => return Err(ConfigError::Invalid(format!("unknown role `{other}`"))),
        };
        id.as_deref().ok_or_else(|| ConfigError::Invalid(format!("no backend configured for role `{role}`")))
    }

    /// Instantiates every backend and wraps them in a gateway with the
    /// configured retry, parallelism and cache.
    pub fn build_gateway(&self) -> Result<Gateway, ConfigError> {
        let worlds = self.worlds()?;
        let mut gw = Gateway::new().with_parallelism(self.parallelism).with_retry(self.retry.clone());
        if let Some(dir) = &self.paths.cache_dir {
            let cache = ResponseCache::persistent(dir).map_err(|e| ConfigError::Io { path: dir.clone(), message: e.to_string() })?;
            gw = gw.with_cache(cache);
        }
        for (id, spec) in &self.backends {
            let err = |message: String| ConfigError::Backend { backend: id.clone(), message };
            let backend: Arc<dyn ChatBackend> = match spec {
                BackendSpec::Http(cfg) => Arc::new(HttpChatBackend::new(cfg.clone()).map_err(|e| err(e.to_string()))?),
                BackendSpec::Scripted { fixture } => Arc::new(ScriptedBackend::from_fixture(fixture).map_err(err)?),
                BackendSpec::Observer { tool } => Arc::new(ObserverBackend::new(tool.clone(), worlds.clone())),
                BackendSpec::ContentJudge => Arc::new(ContentJudge::new()),
                BackendSpec::ClozeAuthor => Arc::new(ClozeAuthorBackend::new(worlds.clone(), self.quota)),
                BackendSpec::GreedyDetective => Arc::new(FactGreedyDetective::new(worlds.clone())),
            };
            gw.register(id.clone(), backend);
        }
        Ok(gw)
    }
}
