//! Plain-text `key = value` defaults, merged in front of the command line
//! so that explicit flags win.

use std::ffi::OsString;
use std::path::Path;

use clap::{ArgAction, CommandFactory};
use thiserror::Error;

use crate::Cli;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}: expected `key = value`")]
    Syntax { path: String, line: usize },

    #[error("{path}: `{key}` is not an option of `{command}`")]
    UnknownKey { path: String, key: String, command: String },

    #[error("{path}: `{key}` must be true or false, got `{value}`")]
    NotBool { path: String, key: String, value: String },

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// `key = value` pairs in file order. Blank lines and `#` comments are
/// skipped; underscores in keys read as dashes.
pub fn parse(text: &str, path: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { path: path.into(), line: i + 1 })?;
        let k = k.trim().replace('_', "-");
        if k.is_empty() {
            return Err(ConfigError::Syntax { path: path.into(), line: i + 1 });
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<(usize, OsString)> {
    let mut it = args.iter().enumerate().skip(1);
    while let Some((i, a)) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(|(_, v)| (i, v.clone()));
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some((i, v.into()));
        }
    }
    None
}

/// Expands `--config FILE` into flags inserted right after the subcommand
/// name. Returns `args` unchanged when there is no config file or no
/// subcommand.
pub fn with_defaults(args: Vec<OsString>) -> Result<Vec<OsString>, ConfigError> {
    let Some((at, file)) = config_path(&args) else {
        return Ok(args);
    };
    let cmd = Cli::command();
    let skip = |i: usize| i == at || (i == at + 1 && args[at] == "--config");
    let Some((pos, sub)) = args
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(i, _)| !skip(*i))
        .find_map(|(i, a)| cmd.find_subcommand(a.to_str()?).map(|s| (i, s)))
    else {
        return Ok(args);
    };
    let path = Path::new(&file).display().to_string();
    let text = std::fs::read_to_string(&file).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
    let mut extra: Vec<OsString> = Vec::new();
    for (key, value) in parse(&text, &path)? {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| ConfigError::UnknownKey { path: path.clone(), key: key.clone(), command: sub.get_name().into() })?;
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value.as_str() {
                "true" => extra.push(format!("--{key}").into()),
                "false" => {}
                _ => return Err(ConfigError::NotBool { path: path.clone(), key, value }),
            }
        } else {
            extra.push(format!("--{key}={value}").into());
        }
    }
    let mut out = args;
    out.splice(pos + 1..pos + 1, extra);
    Ok(out)
}
