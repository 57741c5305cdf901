//! Configuration loading with command-line overrides.

use std::path::Path;

use kdgan::engine::ExperimentConfig;
use toml::{Table, Value};

use crate::Failure;

/// Parses `raw` as a TOML value, falling back to a plain string so that
/// `--set mode=kd` works without quoting.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies one `dotted.key=value` assignment to a TOML document.
pub fn apply_override(doc: &mut Table, assignment: &str) -> Result<(), Failure> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Failure::Validation(format!("--set {assignment}: expected key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Failure::Validation(format!("--set {assignment}: empty key segment")));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Failure::Validation(format!("--set {assignment}: {part} is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Reads a config file, applies `--seed` and `--set` overrides, fills
/// defaults and validates.
pub fn load_config(path: &Path, seed: Option<u64>, sets: &[String]) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Validation(format!("cannot read config {}: {e}", path.display())))?;
    let mut doc: Table = text
        .parse()
        .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    for s in sets {
        apply_override(&mut doc, s)?;
    }
    if let Some(seed) = seed {
        doc.insert("seed".into(), Value::Integer(seed as i64));
    }
    let text = toml::to_string(&doc).map_err(|e| Failure::Validation(e.to_string()))?;
    Ok(ExperimentConfig::from_toml(&text)?)
}
