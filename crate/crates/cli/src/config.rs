//! `--config FILE` support: `key=value` lines that act as flags for the chosen subcommand.
//! Flags given on the command line win over the file.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// One flag read from a config file. `None` marks a boolean switch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigEntry {
    pub key: String,
    pub value: Option<String>,
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped; keys may carry a
/// leading `--` and use `_` or `-`. `true`/`false` values turn switches on or off.
pub fn parse_config(text: &str) -> Result<Vec<ConfigEntry>> {
    let mut entries = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("config line {}: expected key=value, got {raw:?}", n + 1);
        };
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() {
            bail!("config line {}: empty key", n + 1);
        }
        if key == "config" {
            bail!("config line {}: config files cannot include other config files", n + 1);
        }
        let value = value.trim();
        match value {
            "true" => entries.push(ConfigEntry { key, value: None }),
            "false" => {}
            v => entries.push(ConfigEntry {
                key,
                value: Some(v.to_string()),
            }),
        }
    }
    Ok(entries)
}

/// Splits `--config PATH` / `--config=PATH` out of the raw arguments.
fn take_config_path(args: &[OsString]) -> Result<(Option<OsString>, Vec<OsString>)> {
    let mut path = None;
    let mut rest = Vec::with_capacity(args.len());
    let mut iter = args.iter();
    while let Some(arg) = iter.next() {
        let text = arg.to_string_lossy();
        if text == "--config" {
            let Some(p) = iter.next() else {
                bail!("--config needs a file path");
            };
            path = Some(p.clone());
        } else if let Some(p) = text.strip_prefix("--config=") {
            path = Some(OsString::from(p));
        } else {
            rest.push(arg.clone());
        }
    }
    Ok((path, rest))
}

fn flags_present(args: &[OsString]) -> BTreeSet<String> {
    args.iter()
        .filter_map(|a| a.to_str())
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect()
}

/// Returns the argument vector with config-file flags inserted right after the
/// subcommand name, skipping any flag the command line already sets.
pub fn expand_args(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let (program, rest) = match args.split_first() {
        Some((p, r)) => (p.clone(), r.to_vec()),
        None => return Ok(args),
    };
    let (path, rest) = take_config_path(&rest)?;
    let Some(path) = path else {
        let mut out = vec![program];
        out.extend(rest);
        return Ok(out);
    };
    let path = Path::new(&path);
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let entries = parse_config(&text).with_context(|| format!("in config {}", path.display()))?;

    let Some(sub) = rest.iter().position(|a| !a.to_string_lossy().starts_with('-')) else {
        let mut out = vec![program];
        out.extend(rest);
        return Ok(out);
    };
    let given = flags_present(&rest[sub + 1..]);
    let mut out = vec![program];
    out.extend_from_slice(&rest[..=sub]);
    for e in entries.iter().filter(|e| !given.contains(&e.key)) {
        out.push(OsString::from(format!("--{}", e.key)));
        if let Some(v) = &e.value {
            out.push(OsString::from(v));
        }
    }
    out.extend_from_slice(&rest[sub + 1..]);
    Ok(out)
}
