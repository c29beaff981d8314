//! Table manifests and the meaningless-column-name filter.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tabsynth::table::{load_csv, SchemaHint, Table, Task};
use tabsynth::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    #[serde(rename = "table", default)]
    pub tables: Vec<TableEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableEntry {
    /// Relative paths are taken from the manifest's directory.
    pub path: PathBuf,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub task: Option<Task>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<(Manifest, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::VersionMismatch {
                found: format!("manifest format {}", m.format_version),
                expected: format!("manifest format {MANIFEST_VERSION}"),
            });
        }
        if m.tables.is_empty() {
            return Err(Error::Config(format!("{} lists no tables", path.display())));
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, base))
    }
}

/// `V1`, `x12`, `col3`: letters followed by digits.
fn letters_then_digits(name: &str) -> bool {
    let split = name.find(|c: char| c.is_ascii_digit()).unwrap_or(name.len());
    let (head, tail) = name.split_at(split);
    !head.is_empty()
        && !tail.is_empty()
        && head.chars().all(|c| c.is_ascii_alphabetic())
        && tail.chars().all(|c| c.is_ascii_digit())
}

pub fn is_meaningless(name: &str) -> bool {
    let name = name.trim();
    name.chars().count() <= 1 || letters_then_digits(name)
}

/// Rejects a table when at least half of its column names are meaningless.
pub fn meaningful_names(names: &[&str]) -> std::result::Result<(), String> {
    let bad: Vec<&str> = names.iter().copied().filter(|n| is_meaningless(n)).collect();
    if names.is_empty() || 2 * bad.len() >= names.len() {
        Err(format!(
            "{}/{} column names are meaningless ({})",
            bad.len(),
            names.len(),
            bad.join(", ")
        ))
    } else {
        Ok(())
    }
}

pub struct Loaded {
    pub path: PathBuf,
    pub outcome: std::result::Result<Table, String>,
}

pub fn hint(label: Option<&str>, task: Option<Task>) -> SchemaHint {
    match label {
        Some(l) => SchemaHint::labeled(l, task.unwrap_or(Task::Classification)),
        None => SchemaHint::default(),
    }
}

/// Loads every listed table and applies the name filter. Unreadable files
/// are errors; filtered tables are reported, not fatal.
pub fn load_tables(manifest: &Manifest, base: &Path) -> Result<Vec<Loaded>> {
    manifest
        .tables
        .iter()
        .map(|e| {
            let path = if e.path.is_absolute() {
                e.path.clone()
            } else {
                base.join(&e.path)
            };
            let table = load_csv(&path, &hint(e.label.as_deref(), e.task))
                .map_err(|err| err.context(format!("table {}", path.display())))?;
            let names: Vec<&str> = table.schema.columns().iter().map(|c| c.name.as_str()).collect();
            let outcome = meaningful_names(&names).map(|_| table.clone());
            Ok(Loaded {
                path,
                outcome,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn name_patterns() {
        for n in ["V1", "x12", "col3", "a", "7", " "] {
            assert!(is_meaningless(n), "{n}");
        }
        for n in ["Age", "Income", "v1x", "hours_per_week", "1st", "ab"] {
            assert!(!is_meaningless(n), "{n}");
        }
    }

    #[test]
    fn half_or_more_rejects() {
        assert!(meaningful_names(&["V1", "V2", "V3"]).is_err());
        assert!(meaningful_names(&["Age", "Income"]).is_ok());
        assert!(meaningful_names(&["Age", "V2"]).is_err());
        assert!(meaningful_names(&["Age", "Income", "V3"]).is_ok());
    }
}
