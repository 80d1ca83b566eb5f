//! Run configuration: one TOML file per run, overridden by command-line flags.
//!
//! Top-level keys apply to every subcommand; a table named after the
//! subcommand (`[calibrate]`, `[run]`, ...) overrides them for that command.
//! Relative paths in the file resolve against the file's directory. A relative
//! `--config` path is looked up in `$EXCESS_CUSUM_CONFIG_DIR` when set.

use std::path::{Path, PathBuf};

use excess_cusum::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

pub const CONFIG_DIR_VAR: &str = "EXCESS_CUSUM_CONFIG_DIR";

const PATH_KEYS: [&str; 7] = ["model", "life_table", "patients", "calibration", "bootstrap", "schema", "out_dir"];

pub struct ConfigFile {
    pub path: PathBuf,
    table: Table,
}

impl ConfigFile {
    pub fn load_optional(path: Option<&Path>) -> Result<Option<Self>> {
        path.map(Self::load).transpose()
    }

    /// A boolean set at top level or in `section`.
    pub fn flag(&self, section: &str, key: &str) -> bool {
        let top = self.table.get(key).and_then(Value::as_bool);
        let sec = self.table.get(section).and_then(|s| s.get(key)).and_then(Value::as_bool);
        sec.or(top).unwrap_or(false)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path = match std::env::var_os(CONFIG_DIR_VAR) {
            Some(dir) if path.is_relative() => Path::new(&dir).join(path),
            _ => path.to_path_buf(),
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut table: Table = text.parse().map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        resolve_paths(&mut table, &base);
        Ok(ConfigFile { path, table })
    }
}

fn resolve_paths(table: &mut Table, base: &Path) {
    for (key, value) in table.iter_mut() {
        match value {
            Value::String(s) if PATH_KEYS.contains(&key.as_str()) && Path::new(s).is_relative() => {
                *s = base.join(&*s).to_string_lossy().into_owned();
            }
            Value::Table(t) => resolve_paths(t, base),
            _ => {}
        }
    }
}

/// Combines file settings with flags. Unset flags (`None`, `false`) leave the
/// file's value in place.
pub fn merge<T: Serialize + DeserializeOwned>(
    flags: &T,
    file: Option<&ConfigFile>,
    section: &str,
) -> Result<(T, Table)> {
    let mut merged = Table::new();
    if let Some(file) = file {
        for (k, v) in &file.table {
            if !v.is_table() || k == "covariate_source" {
                merged.insert(k.clone(), v.clone());
            }
        }
        if let Some(Value::Table(sec)) = file.table.get(section) {
            merged.extend(sec.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
    }
    let flags = Table::try_from(flags).map_err(|e| Error::Config(e.to_string()))?;
    for (k, v) in flags {
        if v != Value::Boolean(false) {
            merged.insert(k, v);
        }
    }
    let value = merged.clone().try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    Ok((value, merged))
}

pub fn required<T: Clone>(value: &Option<T>, name: &str) -> Result<T> {
    value
        .clone()
        .ok_or_else(|| Error::Config(format!("`{name}` is required (flag --{} or config key)", name.replace('_', "-"))))
}
