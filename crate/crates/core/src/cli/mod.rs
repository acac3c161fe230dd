//! The `foldkit` command line.
//!
//! Every command resolves its settings as defaults, overridden by flags, overridden by
//! the `--config` JSON file, validates them, and writes the resolved settings next to
//! its outputs as `<output>.config.json`.

mod args;
mod commands;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::nn::io::write_atomic;

pub use args::{Cli, Command};

/// Failure of a command, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or configuration (exit code 1).
    #[error("{0}")]
    Validation(String),
    /// Failure while executing (exit code 2).
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    /// Machine-readable form printed on stderr.
    pub fn to_json(&self) -> Value {
        let kind = match self {
            CliError::Validation(_) => "validation",
            CliError::Runtime(_) => "runtime",
        };
        json!({ "error": { "kind": kind, "message": self.to_string(), "exit_code": self.exit_code() } })
    }
}

pub(crate) fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

pub(crate) fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

/// Overlays `top` onto `base`: objects merge key by key, nulls in `top` are ignored,
/// everything else replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (_, Value::Null) => {}
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, t) => *b = t,
    }
}

/// Defaults, then flag overrides, then the config file.
pub(crate) fn resolve<T: Serialize + DeserializeOwned + Default>(
    flags: Value,
    config: Option<&Path>,
) -> Result<T, CliError> {
    let mut value = serde_json::to_value(T::default()).map_err(invalid)?;
    merge(&mut value, flags);
    if let Some(path) = config {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        if !file.is_object() {
            return Err(invalid(format!("{}: config must be a JSON object", path.display())));
        }
        merge(&mut value, file);
    }
    serde_json::from_value(value).map_err(|e| invalid(format!("configuration: {e}")))
}

/// Writes `config` to `<output>.config.json`.
pub(crate) fn write_resolved<T: Serialize>(output: &Path, config: &T) -> Result<(), CliError> {
    let mut name: OsString = output.as_os_str().to_owned();
    name.push(".config.json");
    write_json(&PathBuf::from(name), config)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(runtime)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(runtime)
}

/// Parses `args` (including the program name) and runs the command, returning what it
/// prints on stdout.
pub fn run<I, T>(args: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => commands::execute(cli.command),
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            Ok(e.to_string())
        }
        Err(e) => Err(invalid(e.to_string().trim_end())),
    }
}

/// Entry point of the binary.
pub fn main() -> ExitCode {
    match Cli::try_parse() {
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            let _ = e.print();
            ExitCode::SUCCESS
        }
        Err(e) => report(invalid(e.to_string().trim_end())),
        Ok(cli) => match commands::execute(cli.command) {
            Ok(out) => {
                print!("{out}");
                ExitCode::SUCCESS
            }
            Err(e) => report(e),
        },
    }
}

fn report(e: CliError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(e.exit_code())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_precedence_and_nulls() {
        let mut base = json!({"a": 1, "b": {"c": 2, "d": 3}});
        merge(&mut base, json!({"a": null, "b": {"c": 5}}));
        assert_eq!(base, json!({"a": 1, "b": {"c": 5, "d": 3}}));
        merge(&mut base, json!({"b": 7}));
        assert_eq!(base, json!({"a": 1, "b": 7}));
    }

    #[test]
    fn error_codes() {
        assert_eq!(invalid("x").exit_code(), 1);
        assert_eq!(runtime("x").exit_code(), 2);
        assert_eq!(runtime("boom").to_json()["error"]["kind"], "runtime");
    }
}
