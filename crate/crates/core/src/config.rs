//! Tool-level configuration file and canonical JSON helpers.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compositor::GenConfig;
use crate::error::{Error, Result};
use crate::keyer::KeyerParams;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub assets: Option<PathBuf>,
    pub backgrounds: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmitToggles {
    pub coco: bool,
    pub yolo: bool,
    pub masks: bool,
}

impl Default for EmitToggles {
    fn default() -> Self {
        Self {
            coco: true,
            yolo: true,
            masks: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolConfig {
    pub keyer: KeyerParams,
    pub generation: GenConfig,
    pub paths: Paths,
    pub emit: EmitToggles,
}

impl ToolConfig {
    pub fn validate(&self) -> Result<()> {
        self.keyer.validate()?;
        self.generation.validate()
    }

    /// Parses and validates a config file. Relative paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ToolConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let base = std::path::absolute(&base).unwrap_or(base);
        for p in [
            &mut cfg.paths.assets,
            &mut cfg.paths.backgrounds,
            &mut cfg.paths.output,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Pretty JSON with object keys sorted, newline terminated.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

/// Hex SHA-256 of the canonical serialization.
pub fn canonical_hash<T: Serialize>(value: &T) -> Result<String> {
    let text = canonical_json(value)?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}
