use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration.
    #[error("{0}")]
    Usage(String),
    /// Unreadable or invalid input data, or unwritable outputs.
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] steinda_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(_) => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Strict parse of a JSON config: unknown and duplicate keys are errors,
/// absent fields take their defaults. Messages carry line and column.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T, serde_json::Error> {
    serde_json::from_str(text)
}

/// Loads `path` when given, otherwise the defaults.
pub fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    path.map_or_else(|| Ok(T::default()), load_config)
}

/// Directory that relative paths inside a config are taken from.
pub fn config_base(config: Option<&Path>) -> PathBuf {
    config
        .and_then(Path::parent)
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

/// Absolute form of `path` read relative to `base`.
pub fn resolve_path(base: &Path, path: &str) -> CliResult<String> {
    if path.is_empty() {
        return Err(CliError::Usage("a data path is required".into()));
    }
    let p = Path::new(path);
    let joined = if p.is_relative() { base.join(p) } else { p.to_path_buf() };
    let abs = fs::canonicalize(&joined).map_err(|e| CliError::Data(format!("{}: {e}", joined.display())))?;
    Ok(abs.to_string_lossy().into_owned())
}

/// The run's output directory; nothing is written anywhere else.
pub struct Outputs {
    dir: PathBuf,
}

impl Outputs {
    pub fn create(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Outputs { dir: dir.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        write_json(&self.path(name), value)
    }

    pub fn csv<T: Serialize>(&self, name: &str, rows: &[T]) -> CliResult<()> {
        let path = self.path(name);
        steinda_core::io::write_rows_file(&path, rows).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}
