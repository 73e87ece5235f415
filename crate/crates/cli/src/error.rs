use omnicap_core::arena::{ArenaError, CorrelationError, EloError};
use omnicap_core::cascade::CascadeError;
use omnicap_core::cloze::{EvalError, ForgeError};
use omnicap_core::config::ConfigError;
use omnicap_core::detective::{InvestigationError, SweepError};
use omnicap_core::gateway::{GatewayError, ToolBoxError};
use omnicap_core::jsonl::{JsonlError, ManifestError, StoreError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_BACKEND: i32 = 2;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_CONFIG: i32 = 78;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    /// Bad input data or a failed check.
    Validation(String),
    Backend(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Validation(_) | CliError::Io(_) => EXIT_VALIDATION,
            CliError::Backend(_) => EXIT_BACKEND,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Validation(m) => write!(f, "error: {m}"),
            CliError::Backend(m) => write!(f, "backend error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ToolBoxError> for CliError {
    fn from(e: ToolBoxError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::InvalidRequest(_) | GatewayError::UnknownBackend(_) => CliError::Config(e.to_string()),
            other => CliError::Backend(other.to_string()),
        }
    }
}

impl From<InvestigationError> for CliError {
    fn from(e: InvestigationError) -> Self {
        match e {
            InvestigationError::Gateway(g) => g.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Gateway(g) => g.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ForgeError> for CliError {
    fn from(e: ForgeError) -> Self {
        match e {
            ForgeError::Gateway(g) => g.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<CascadeError> for CliError {
    fn from(e: CascadeError) -> Self {
        match e {
            CascadeError::Gateway(g) => g.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<SweepError> for CliError {
    fn from(e: SweepError) -> Self {
        match e {
            SweepError::Investigation { source: InvestigationError::Gateway(g), .. } => g.into(),
            SweepError::Forge(f) => f.into(),
            SweepError::Eval(ev) => ev.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ArenaError> for CliError {
    fn from(e: ArenaError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<EloError> for CliError {
    fn from(e: EloError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<CorrelationError> for CliError {
    fn from(e: CorrelationError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<JsonlError> for CliError {
    fn from(e: JsonlError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::Io(e.to_string())
    }
}
