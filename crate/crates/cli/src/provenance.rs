//! Every artifact carries the hash of the effective run config and the seed.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use arreid_core::io::RunConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn of(config: &RunConfig) -> Self {
        Self {
            config_hash: config.hash(),
            seed: config.seed,
        }
    }

    pub fn png_text(&self) -> Vec<(String, String)> {
        vec![
            ("config_hash".into(), self.config_hash.clone()),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    /// Comment line that leads every CSV.
    pub fn csv_comment(&self) -> String {
        format!("# config_hash={} seed={}\n", self.config_hash, self.seed)
    }
}

/// Serializes `body` with an added top-level `provenance` field; non-object
/// bodies land under `value`.
pub fn write_json<T: Serialize>(path: &Path, prov: &Provenance, body: &T) -> Result<()> {
    let mut out = serde_json::Map::new();
    out.insert("provenance".into(), serde_json::to_value(prov)?);
    match serde_json::to_value(body)? {
        Value::Object(fields) => out.extend(fields),
        other => {
            out.insert("value".into(), other);
        }
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(out))?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(arreid_core::Error::from)?)
}

pub fn write_csv(path: &Path, prov: &Provenance, header: &str, rows: &[String]) -> Result<()> {
    let mut text = prov.csv_comment();
    text.push_str(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `features.rfv` -> `features.meta.json`; the binary store format has no
/// room for provenance.
pub fn sidecar_path(store: &Path) -> PathBuf {
    store.with_extension("meta.json")
}
