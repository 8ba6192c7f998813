//! On-disk formats: map files, query files, localization results and the
//! binary descriptor sidecar.
//!
//! Map and query files are JSON documents. Descriptors are either inlined in
//! the document ([`DescriptorStorage::Inline`]) or moved into two binary
//! sidecar matrices written next to it ([`DescriptorStorage::Sidecar`]); the
//! document then names the sidecars in `descriptor_sidecar` and leaves the
//! per-entity descriptor arrays out.

pub mod binary;
mod map_file;
mod query_file;
mod results_file;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PinholeCamera;
use crate::map::CameraId;

pub use map_file::{load_map, save_map, save_map_with};
pub use query_file::{load_queries, save_queries, save_queries_with, QuerySet};
pub use results_file::{read_results, write_results, ResultRecord};

/// Current version of the map and query documents.
pub const DOCUMENT_VERSION: u32 = 1;

/// Where descriptor matrices are stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DescriptorStorage {
    /// Inline JSON arrays; floats are written in shortest round-trip form.
    Inline,
    /// Binary sidecar matrices next to the document.
    #[default]
    Sidecar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CameraRecord {
    id: CameraId,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: f64,
    height: f64,
}

impl CameraRecord {
    fn from_camera(id: CameraId, c: &PinholeCamera) -> Self {
        Self {
            id,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
        }
    }

    fn to_camera(&self) -> PinholeCamera {
        PinholeCamera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SidecarRef {
    global: String,
    local: String,
}

impl SidecarRef {
    fn for_document(path: &Path) -> Self {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "descriptors".into());
        Self {
            global: format!("{stem}.global.bin"),
            local: format!("{stem}.local.bin"),
        }
    }

    fn resolve(&self, document: &Path) -> (PathBuf, PathBuf) {
        let dir = document.parent().unwrap_or_else(|| Path::new(""));
        (dir.join(&self.global), dir.join(&self.local))
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| {
        if e.is_io() {
            Error::io(path, e.into())
        } else {
            Error::schema(path.display().to_string(), e.to_string())
        }
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::io(path, e.into()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn check_version(path: &Path, version: u32) -> Result<()> {
    if version != DOCUMENT_VERSION {
        return Err(Error::schema(
            path.display().to_string(),
            format!("unsupported version {version} (expected {DOCUMENT_VERSION})"),
        ));
    }
    Ok(())
}
