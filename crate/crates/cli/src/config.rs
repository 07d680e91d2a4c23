//! Expands a TOML config file into command-line flags.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};
use toml::Value;

use crate::args::GLOBAL_VALUE_FLAGS;
use crate::UsageError;

/// Finds `--config` in raw arguments, if given.
pub fn config_path(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter().skip(1);
    let mut found = None;
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            found = it.next().cloned();
        } else if let Some(v) = s.strip_prefix("--config=") {
            found = Some(v.into());
        }
    }
    found
}

/// Index of the subcommand token among `argv[1..]`, skipping leading global
/// flags and their values.
fn subcommand_index(argv: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let s = argv[i].to_string_lossy();
        if !s.starts_with('-') {
            return Some(i);
        }
        i += if GLOBAL_VALUE_FLAGS.contains(&s.as_ref()) { 2 } else { 1 };
    }
    None
}

fn flag_values(key: &str, value: &Value) -> Result<Vec<OsString>> {
    let flag = format!("--{}", key.replace('_', "-"));
    let scalar = |v: &Value| -> Result<String> {
        Ok(match v {
            Value::String(s) => s.clone(),
            Value::Integer(i) => i.to_string(),
            Value::Float(f) => f.to_string(),
            other => bail!(UsageError(format!("config key {key:?}: unsupported value {other}"))),
        })
    };
    Ok(match value {
        Value::Boolean(true) => vec![flag.into()],
        Value::Boolean(false) => vec![],
        Value::Array(items) => {
            let parts = items.iter().map(scalar).collect::<Result<Vec<_>>>()?;
            vec![flag.into(), parts.join(",").into()]
        }
        v => vec![flag.into(), scalar(v)?.into()],
    })
}

/// Inserts flags from the config file right after the subcommand, ahead of
/// everything typed on the command line, so explicit flags override them.
pub fn expand(argv: Vec<OsString>, path: &Path) -> Result<Vec<OsString>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("--config {}", path.display()))?;
    let table: toml::Table =
        text.parse().map_err(|e| UsageError(format!("--config {}: {e}", path.display())))?;
    let Some(sub_idx) = subcommand_index(&argv) else {
        return Ok(argv);
    };
    let sub = argv[sub_idx].to_string_lossy().into_owned();

    let mut from_file = Vec::new();
    for (key, value) in &table {
        match value {
            Value::Table(inner) if key == &sub => {
                for (k, v) in inner {
                    from_file.extend(flag_values(k, v)?);
                }
            }
            // Tables for other subcommands are ignored.
            Value::Table(_) => {}
            v if key == "config" => {
                bail!(UsageError(format!("--config {}: nested config key {v}", path.display())))
            }
            v => from_file.extend(flag_values(key, v)?),
        }
    }

    let mut out = vec![argv[0].clone(), argv[sub_idx].clone()];
    out.extend(from_file);
    out.extend(argv[1..sub_idx].iter().cloned());
    out.extend(argv[sub_idx + 1..].iter().cloned());
    Ok(out)
}
