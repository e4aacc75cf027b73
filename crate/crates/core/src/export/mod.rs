//! Simulator interchange formats and the export manifest.

mod geojson;
mod opendrive;
mod sumo;

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::builder::RoadNetwork3D;
use crate::geo::GeoError;

pub use geojson::export_geojson;
pub use opendrive::{check_opendrive, export_opendrive, OpenDriveSummary, LANE_WIDTH};
pub use sumo::{export_sumo_net, read_sumo_net, SumoEdge, SumoNet, SumoNode};

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("segment {segment}: degenerate geometry ({reason})")]
    Degenerate { segment: String, reason: String },
    #[error("projection: {0}")]
    Geo(#[from] GeoError),
    #[error("unknown export format `{0}` (expected geojson, xodr or netxml)")]
    UnknownFormat(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Geojson,
    Xodr,
    Netxml,
}

impl Format {
    pub const ALL: [Format; 3] = [Format::Geojson, Format::Xodr, Format::Netxml];

    pub fn file_name(&self) -> &'static str {
        match self {
            Format::Geojson => "network.geojson",
            Format::Xodr => "network.xodr",
            Format::Netxml => "network.net.xml",
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Format::Geojson => "geojson",
            Format::Xodr => "xodr",
            Format::Netxml => "netxml",
        }
    }

    pub fn render(&self, net: &RoadNetwork3D) -> Result<String, ExportError> {
        match self {
            Format::Geojson => export_geojson(net),
            Format::Xodr => export_opendrive(net),
            Format::Netxml => export_sumo_net(net),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Format {
    type Err = ExportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "geojson" => Ok(Format::Geojson),
            "xodr" | "opendrive" => Ok(Format::Xodr),
            "netxml" | "sumo" | "net.xml" => Ok(Format::Netxml),
            other => Err(ExportError::UnknownFormat(other.to_string())),
        }
    }
}

/// Parses a comma-separated list such as `geojson,xodr,netxml`. Duplicates
/// collapse; order follows [`Format::ALL`].
pub fn parse_formats(list: &str) -> Result<Vec<Format>, ExportError> {
    let mut out = Vec::new();
    for token in list.split(',').filter(|t| !t.trim().is_empty()) {
        let f: Format = token.parse()?;
        if !out.contains(&f) {
            out.push(f);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub format: Format,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    /// Checksum of the network artifact the exports were produced from.
    pub network_sha256: String,
    pub files: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes each requested format into `dir` plus `manifest.json`.
pub fn write_exports(
    net: &RoadNetwork3D,
    dir: &Path,
    formats: &[Format],
    network_sha256: &str,
) -> Result<ExportManifest, ExportError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| ExportError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut files = Vec::new();
    for f in formats {
        let text = f.render(net)?;
        let path = dir.join(f.file_name());
        fs::write(&path, &text).map_err(io(&path))?;
        files.push(ManifestEntry {
            path: f.file_name().to_string(),
            format: *f,
            bytes: text.len() as u64,
            sha256: sha256_hex(text.as_bytes()),
        });
        log::info!("wrote {}", path.display());
    }
    let manifest = ExportManifest { network_sha256: network_sha256.to_string(), files };
    let path = dir.join("manifest.json");
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(&path, json).map_err(io(&path))?;
    Ok(manifest)
}

/// Fixed-point formatting without a negative zero.
pub(crate) fn fixed(v: f64, digits: usize) -> String {
    let s = format!("{v:.digits$}");
    if s.starts_with('-') && s[1..].bytes().all(|b| b == b'0' || b == b'.') {
        s[1..].to_string()
    } else {
        s
    }
}
