//! JSON persistence helpers for parameter trees and config sidecars.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

/// Version stamp expected in every sidecar file.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("parameter tree mismatch: {0}")]
    Params(#[from] crate::math::ParamError),
}

/// Config sidecar wrapper carrying the required format version field.
#[derive(Debug, Serialize, Deserialize)]
pub struct Sidecar<C> {
    pub format_version: u32,
    pub config: C,
}

impl<C> Sidecar<C> {
    pub fn new(config: C) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config,
        }
    }

    pub fn check_version(&self) -> Result<(), PersistError> {
        if self.format_version != FORMAT_VERSION {
            return Err(PersistError::Version {
                found: self.format_version,
                expected: FORMAT_VERSION,
            });
        }
        Ok(())
    }
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PersistError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, value)?;
    w.flush()?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, PersistError> {
    let file = fs::File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}
