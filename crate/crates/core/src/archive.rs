//! Versioned JSON model archives.
//!
//! An archive is two lines: a header object holding `format_version` and a
//! SHA-256 `fingerprint` of everything after the first newline, followed by
//! the JSON payload. The version is checked before the fingerprint, and the
//! fingerprint before the payload is parsed, so truncation or corruption is
//! reported as a fingerprint error rather than a parse error.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SpatialError};
use crate::forest::ForestVariant;
use crate::model::{FittedModel, Method, MethodConfig};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArchive {
    pub format_version: u64,
    pub method: Method,
    pub variant: Option<ForestVariant>,
    pub delta: Option<f64>,
    pub config: MethodConfig,
    pub coord_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub response_name: Option<String>,
    pub model: FittedModel,
}

impl ModelArchive {
    pub fn new(
        method: Method,
        config: MethodConfig,
        model: FittedModel,
        coord_names: Vec<String>,
        covariate_names: Vec<String>,
        response_name: Option<String>,
    ) -> Self {
        let (variant, delta) = match &model {
            FittedModel::Forest { forest, .. } => (Some(forest.variant), Some(forest.delta_selected)),
            _ => (None, None),
        };
        ModelArchive {
            format_version: FORMAT_VERSION,
            method,
            variant,
            delta,
            config,
            coord_names,
            covariate_names,
            response_name,
            model,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u64,
    fingerprint: String,
}

fn fingerprint(payload: &[u8]) -> String {
    hex::encode(Sha256::digest(payload))
}

pub fn archive_to_string(archive: &ModelArchive) -> Result<String> {
    let payload = serde_json::to_string(archive)?;
    let header = serde_json::to_string(&Header {
        format_version: archive.format_version,
        fingerprint: fingerprint(payload.as_bytes()),
    })?;
    Ok(format!("{header}\n{payload}"))
}

pub fn archive_from_str(text: &str) -> Result<ModelArchive> {
    let (head, payload) = text
        .split_once('\n')
        .ok_or_else(|| SpatialError::Fingerprint("archive has no payload".into()))?;
    let header: serde_json::Value = serde_json::from_str(head)?;
    let version = header
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| SpatialError::Data("archive header lacks format_version".into()))?;
    if version != FORMAT_VERSION {
        return Err(SpatialError::UnsupportedVersion(version));
    }
    let expected = header
        .get("fingerprint")
        .and_then(serde_json::Value::as_str)
        .ok_or_else(|| SpatialError::Fingerprint("archive header lacks fingerprint".into()))?;
    let actual = fingerprint(payload.as_bytes());
    if actual != expected {
        return Err(SpatialError::Fingerprint(format!("expected {expected}, content hashes to {actual}")));
    }
    let archive: ModelArchive = serde_json::from_str(payload)?;
    if archive.format_version != FORMAT_VERSION {
        return Err(SpatialError::UnsupportedVersion(archive.format_version));
    }
    Ok(archive)
}

pub fn save_model(archive: &ModelArchive, path: &Path) -> Result<()> {
    std::fs::write(path, archive_to_string(archive)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelArchive> {
    archive_from_str(&std::fs::read_to_string(path)?)
}
