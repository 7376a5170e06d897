use std::path::PathBuf;

use serde_json::{json, Value};

#[derive(Debug)]
pub enum CliError {
    /// The config file does not parse or names an unknown key.
    Config {
        key: String,
        message: String,
    },
    /// A stage ran before the stage that produces its input.
    Dependency {
        stage: &'static str,
        needs: &'static str,
        missing: PathBuf,
    },
    /// Another invocation holds the output directory.
    Locked(PathBuf),
    /// A `--model` or `--trials` selection that does not exist.
    Select {
        what: &'static str,
        name: String,
        available: Vec<String>,
    },
    Io {
        path: PathBuf,
        message: String,
    },
    Core(sslspk::Error),
}

impl From<sslspk::Error> for CliError {
    fn from(e: sslspk::Error) -> Self {
        CliError::Core(e)
    }
}

pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |e| CliError::Io { path, message: e.to_string() }
}

fn core_kind(e: &sslspk::Error) -> &'static str {
    use sslspk::Error::*;
    match e {
        Config { .. } => "config",
        Format { .. } => "format",
        Length { .. } => "length",
        Capacity { .. } => "capacity",
        Shape(_) => "shape",
        Numeric { .. } => "numeric",
        Index { .. } => "index",
        Metric(_) => "metric",
        Lookup(_) => "lookup",
        Coverage { .. } => "coverage",
        Checkpoint(_) => "checkpoint",
        Io { .. } => "io",
        Wav { .. } => "wav",
        Parse(_) => "parse",
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config { key, message } => write!(f, "invalid config at `{key}`: {message}"),
            CliError::Dependency { stage, needs, missing } => {
                write!(f, "`{stage}` needs the output of `{needs}` ({} not found); run `{needs}` first", missing.display())
            }
            CliError::Locked(p) => write!(f, "output directory is in use ({} exists)", p.display()),
            CliError::Select { what, name, available } => {
                write!(f, "no {what} named `{name}`; available: {}", available.join(", "))
            }
            CliError::Io { path, message } => write!(f, "{}: {message}", path.display()),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl CliError {
    pub fn to_json(&self) -> Value {
        let mut v = json!({ "message": self.to_string() });
        match self {
            CliError::Config { key, .. } => {
                v["kind"] = "config".into();
                v["key"] = key.clone().into();
            }
            CliError::Dependency { needs, missing, .. } => {
                v["kind"] = "dependency".into();
                v["needs"] = (*needs).into();
                v["missing"] = missing.display().to_string().into();
            }
            CliError::Locked(_) => v["kind"] = "locked".into(),
            CliError::Select { .. } => v["kind"] = "select".into(),
            CliError::Io { .. } => v["kind"] = "io".into(),
            CliError::Core(sslspk::Error::Config { field, .. }) => {
                v["kind"] = "config".into();
                v["key"] = field.clone().into();
            }
            CliError::Core(e) => v["kind"] = core_kind(e).into(),
        }
        json!({ "error": v })
    }
}
