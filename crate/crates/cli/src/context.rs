use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use omnicap_core::config::RunConfig;
use omnicap_core::gateway::{exchange_log_path, Gateway};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::CliError;
use crate::GlobalArgs;

/// Written once into every run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub created_at: String,
    pub config: RunConfig,
}

/// Loads the config named by `--config` (TOML or JSON), or the defaults.
/// Global flags override the file. The hash is taken before relative paths
/// are resolved so it does not depend on where the checkout lives.
pub fn load_config(global: &GlobalArgs) -> Result<(RunConfig, String), CliError> {
    let (mut cfg, base) = match &global.config {
        Some(path) => {
            let raw = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let cfg: RunConfig = if path.extension().is_some_and(|x| x == "json") {
                serde_json::from_str(&raw).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            } else {
                toml::from_str(&raw).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            };
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (cfg, base)
        }
        None => (RunConfig::default(), PathBuf::new()),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(p) = global.parallelism {
        cfg.parallelism = p;
    }
    if let Some(dir) = &global.cache_dir {
        cfg.paths.cache_dir = Some(absolute(dir));
    }
    if let Some(dir) = &global.run_dir {
        cfg.paths.run_root = absolute(dir);
    }
    let hash = cfg.config_hash();
    let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
    Ok((cfg.resolve(&base)?, hash))
}

fn absolute(p: &Path) -> PathBuf {
    std::env::current_dir().map(|cwd| cwd.join(p)).unwrap_or_else(|_| p.to_path_buf())
}

pub struct Context {
    pub cfg: RunConfig,
    pub config_hash: String,
    pub run_dir: PathBuf,
}

impl Context {
    /// Creates a fresh timestamped run directory, or reopens `resume` after
    /// checking it was produced by the same configuration.
    pub fn open(global: &GlobalArgs, command: &str, resume: Option<&Path>) -> Result<Self, CliError> {
        let (cfg, config_hash) = load_config(global)?;
        let run_dir = match resume {
            Some(dir) => {
                let raw = fs::read_to_string(dir.join("run.json"))
                    .map_err(|e| CliError::Config(format!("cannot resume {}: {e}", dir.display())))?;
                let prev: RunManifest = serde_json::from_str(&raw)
                    .map_err(|e| CliError::Config(format!("cannot resume {}: {e}", dir.display())))?;
                if prev.config_hash != config_hash || prev.command != command {
                    return Err(CliError::Config(format!(
                        "run {} was `{}` with config {}, not `{command}` with {config_hash}",
                        dir.display(),
                        prev.command,
                        prev.config_hash
                    )));
                }
                dir.to_path_buf()
            }
            None => create_run_dir(&cfg.paths.run_root, command, &config_hash)?,
        };
        if resume.is_none() {
            let manifest = RunManifest {
                command: command.to_string(),
                config_hash: config_hash.clone(),
                created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
                config: cfg.clone(),
            };
            write_json(&run_dir.join("run.json"), &manifest)?;
        }
        Ok(Self { cfg, config_hash, run_dir })
    }

    pub fn gateway(&self) -> Result<Gateway, CliError> {
        let gw = self.cfg.build_gateway()?;
        gw.with_exchange_log(&exchange_log_path(&self.run_dir)).map_err(|e| CliError::Io(e.to_string()))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }
}

fn create_run_dir(root: &Path, command: &str, hash: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(root).map_err(|e| CliError::Io(format!("{}: {e}", root.display())))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%3fZ");
    let stem = format!("{stamp}-{command}-{}", &hash[..8]);
    for n in 0.. {
        let name = if n == 0 { stem.clone() } else { format!("{stem}.{n}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(CliError::Io(format!("{}: {e}", dir.display()))),
        }
    }
    unreachable!()
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let raw = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&raw).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

pub fn stamp(value: &mut serde_json::Value, ctx: &Context) {
    if let Some(obj) = value.as_object_mut() {
        obj.insert("config_hash".into(), json!(ctx.config_hash));
    }
}
