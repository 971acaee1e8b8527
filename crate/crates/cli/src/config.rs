//! `--config FILE` support. Each `key=value` line of the file becomes
//! `--key value` and is spliced in right after the subcommand name, so any
//! flag given on the command line (which comes later) overrides it.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};

pub fn parse_config(text: &str, path: &Path) -> Result<Vec<OsString>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected key=value, got {line:?}", path.display(), n + 1);
        };
        let key = key.trim().replace('_', "-");
        if key.is_empty() || key.starts_with('-') {
            bail!("{}:{}: bad key {key:?}", path.display(), n + 1);
        }
        if key == "config" {
            bail!("{}:{}: config files cannot include other config files", path.display(), n + 1);
        }
        out.push(format!("--{key}").into());
        out.push(value.trim().into());
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Result<Option<OsString>> {
    let mut found = None;
    let mut i = 0;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        let value = if a == "--config" {
            i += 1;
            Some(args.get(i).cloned().context("--config needs a file path")?)
        } else {
            a.strip_prefix("--config=").map(OsString::from)
        };
        if let Some(v) = value {
            if found.is_some() {
                bail!("--config given more than once");
            }
            found = Some(v);
        }
        i += 1;
    }
    Ok(found)
}

/// Returns `args` with the config file's flags inserted after the
/// subcommand. Arguments are left alone when there is no `--config`.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>> {
    if args.len() < 2 {
        return Ok(args);
    }
    let Some(path) = config_path(&args[2..])? else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let extra = parse_config(&text, path)?;
    let mut out = Vec::with_capacity(args.len() + extra.len());
    out.extend_from_slice(&args[..2]);
    out.extend(extra);
    out.extend_from_slice(&args[2..]);
    Ok(out)
}
