//! Project configuration, the network artifact and the end-to-end commands.
//!
//! Every command reads its inputs from disk and writes its outputs into the
//! project output directory:
//!
//! | command  | writes                                   |
//! |----------|------------------------------------------|
//! | build    | `network.json`                           |
//! | validate | `report.json`                            |
//! | export   | format files and `manifest.json`         |
//! | cosim    | `trace.jsonl` and `cosim_summary.json`   |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builder::{self, BuildConfig, BuildError, RoadNetwork3D, Terrain};
use crate::cosim::{
    parse_routes, run_scenario, synthetic_routes, CosimError, CosimSummary, Fault, Framing, Route, SyncConfig, Transport,
};
use crate::dem::{parse_ascii_grid, DemError, DemGrid, SamplingMode};
use crate::export::{sha256_hex, write_exports, ExportError, ExportManifest, Format};
use crate::geo::BBox;
use crate::road::{parse_osm, GradientLimits, RoadError};
use crate::validation::{validate, ValidationError, ValidationReport};

pub const ARTIFACT_SCHEMA: &str = "elevroad.network";
pub const ARTIFACT_VERSION: u32 = 1;
pub const NETWORK_FILE: &str = "network.json";
pub const REPORT_FILE: &str = "report.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const SUMMARY_FILE: &str = "cosim_summary.json";
/// Offset used when a fault step is configured without an offset.
pub const DEFAULT_FAULT_OFFSET: f64 = 0.6;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config {path}: {message}")]
    Config { path: String, message: String },
    #[error("{path}: {message}")]
    Input { path: String, message: String },
    #[error("osm: {0}")]
    Road(#[from] RoadError),
    #[error("dem: {0}")]
    Dem(#[from] DemError),
    #[error("build: {0}")]
    Build(#[from] BuildError),
    #[error("validate: {0}")]
    Validation(#[from] ValidationError),
    #[error("export: {0}")]
    Export(#[from] ExportError),
    #[error("cosim: {0}")]
    Cosim(#[from] CosimError),
    #[error("writing {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("validation failed: {0}")]
    ValidationFailed(String),
}

impl PipelineError {
    /// 1 internal error, 2 invalid input or config, 3 validation failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config { .. }
            | PipelineError::Input { .. }
            | PipelineError::Road(_)
            | PipelineError::Dem(_)
            | PipelineError::Build(_)
            | PipelineError::Validation(_) => 2,
            PipelineError::Export(ExportError::Degenerate { .. } | ExportError::UnknownFormat(_)) => 2,
            PipelineError::Cosim(
                CosimError::InvalidRoute(_) | CosimError::InvalidConfig(_) | CosimError::OffNetwork { .. },
            ) => 2,
            PipelineError::ValidationFailed(_) => 3,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn input_err(path: &Path, message: impl std::fmt::Display) -> PipelineError {
    PipelineError::Input { path: path.display().to_string(), message: message.to_string() }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| input_err(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| PipelineError::Io { path: dir.display().to_string(), source })?;
    }
    fs::write(path, bytes).map_err(|source| PipelineError::Io { path: path.display().to_string(), source })?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn default_iters() -> usize {
    builder::DEFAULT_MAX_SMOOTH_ITERS
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_floor() -> f64 {
    100.0
}

fn default_formats() -> Vec<String> {
    Format::ALL.iter().map(|f| f.as_str().to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyncSection {
    pub dt: f64,
    pub resync_threshold: f64,
    pub max_steps: u64,
    pub snap_distance: f64,
    pub drift_per_step: f64,
    pub speed_noise: f64,
    pub seed: u64,
    /// Synthetic vehicle count when no routes file is given.
    pub vehicles: usize,
    pub routes: Option<PathBuf>,
    pub transport: Transport,
    pub framing: Framing,
    pub fault_at: Option<u64>,
    pub fault_offset: Option<f64>,
}

impl Default for SyncSection {
    fn default() -> Self {
        let d = SyncConfig::default();
        Self {
            dt: d.dt,
            resync_threshold: d.resync_threshold,
            max_steps: d.max_steps,
            snap_distance: d.snap_distance,
            drift_per_step: d.drift_per_step,
            speed_noise: d.speed_noise,
            seed: d.seed,
            vehicles: 4,
            routes: None,
            transport: Transport::Memory,
            framing: d.framing,
            fault_at: None,
            fault_offset: None,
        }
    }
}

impl SyncSection {
    pub fn sync_config(&self) -> SyncConfig {
        SyncConfig {
            dt: self.dt,
            resync_threshold: self.resync_threshold,
            max_steps: self.max_steps,
            snap_distance: self.snap_distance,
            drift_per_step: self.drift_per_step,
            speed_noise: self.speed_noise,
            seed: self.seed,
            fault: self
                .fault_at
                .map(|step| Fault { step, offset: self.fault_offset.unwrap_or(DEFAULT_FAULT_OFFSET) }),
            framing: self.framing,
        }
    }
}

/// One project file. Relative paths are resolved against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    pub osm: PathBuf,
    pub dem: PathBuf,
    /// min_lon, min_lat, max_lon, max_lat
    pub bbox: [f64; 4],
    /// Vertical datum label of the DEM, recorded but never converted.
    #[serde(default)]
    pub dem_datum: Option<String>,
    #[serde(default)]
    pub sampling_mode: SamplingMode,
    #[serde(default = "default_iters")]
    pub max_smooth_iters: usize,
    #[serde(default)]
    pub gradient_limits: GradientLimits,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Reference grid for validation; the input DEM when absent.
    #[serde(default)]
    pub truth_dem: Option<PathBuf>,
    /// Minimum per-segment compliance, percent.
    #[serde(default = "default_floor")]
    pub compliance_floor: f64,
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
    #[serde(default)]
    pub sync: SyncSection,
}

impl ProjectConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let cfg = Self::from_toml(&text, path.parent().unwrap_or(Path::new("")))
            .map_err(|message| PipelineError::Config { path: path.display().to_string(), message })?;
        cfg.check().map_err(|e| match e {
            PipelineError::Config { message, .. } => PipelineError::Config { path: path.display().to_string(), message },
            other => other,
        })?;
        Ok(cfg)
    }

    /// Parses and resolves paths against `base`; does not check them.
    pub fn from_toml(text: &str, base: &Path) -> std::result::Result<Self, String> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.osm);
        resolve(&mut cfg.dem);
        resolve(&mut cfg.output_dir);
        if let Some(p) = cfg.truth_dem.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.sync.routes.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        let bad = |message: String| Err(PipelineError::Config { path: String::new(), message });
        for (what, p) in [("osm", Some(&self.osm)), ("dem", Some(&self.dem)), ("truth_dem", self.truth_dem.as_ref())] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(input_err(p, format!("{what} file not found")));
                }
            }
        }
        if let Some(p) = &self.sync.routes {
            if !p.is_file() {
                return Err(input_err(p, "routes file not found"));
            }
        }
        if let Err(e) = BBox::from_slice(&self.bbox) {
            return bad(format!("bbox: {e}"));
        }
        let l = &self.gradient_limits;
        for (name, v) in [("highway", l.highway), ("arterial", l.arterial), ("residential", l.residential)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("gradient limit for {name} must be positive, got {v}"));
            }
        }
        if self.max_smooth_iters == 0 {
            return bad("max_smooth_iters must be at least 1".into());
        }
        if !(0.0..=100.0).contains(&self.compliance_floor) {
            return bad(format!("compliance_floor must be a percentage, got {}", self.compliance_floor));
        }
        self.export_formats()?;
        self.sync.sync_config().check().or_else(|e| bad(e.to_string()))
    }

    pub fn bbox(&self) -> Result<BBox> {
        BBox::from_slice(&self.bbox).map_err(|e| PipelineError::Config { path: String::new(), message: e.to_string() })
    }

    pub fn export_formats(&self) -> Result<Vec<Format>> {
        Ok(crate::export::parse_formats(&self.formats.join(","))?)
    }

    pub fn artifact_path(&self) -> PathBuf {
        self.output_dir.join(NETWORK_FILE)
    }

    pub fn build_config(&self) -> BuildConfig {
        BuildConfig {
            sampling_mode: self.sampling_mode,
            gradient_limits: self.gradient_limits,
            max_smooth_iters: self.max_smooth_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    /// File name only, so artifacts do not depend on where a project lives.
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactProvenance {
    pub osm: InputFile,
    pub dem: InputFile,
    /// DEM values are used verbatim in this datum.
    pub dem_datum: String,
    pub bbox: BBox,
    pub sampling_mode: SamplingMode,
    /// Smoothing iterations per segment.
    pub iterations: BTreeMap<String, usize>,
    pub flagged_segments: Vec<String>,
    pub tool_version: String,
}

/// The versioned on-disk form of a built network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkArtifact {
    pub schema: String,
    pub version: u32,
    pub provenance: ArtifactProvenance,
    pub network: RoadNetwork3D,
}

impl NetworkArtifact {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let a: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if a.schema != ARTIFACT_SCHEMA {
            return Err(format!("schema `{}` is not {ARTIFACT_SCHEMA}", a.schema));
        }
        if a.version != ARTIFACT_VERSION {
            return Err(format!("artifact version {} is not supported (expected {ARTIFACT_VERSION})", a.version));
        }
        Ok(a)
    }
}

fn input_file(path: &Path, bytes: &[u8]) -> InputFile {
    InputFile {
        name: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        sha256: sha256_hex(bytes),
        bytes: bytes.len() as u64,
    }
}

fn load_dem(path: &Path) -> Result<DemGrid> {
    parse_ascii_grid(&read_text(path)?).map_err(|e| input_err(path, e))
}

#[derive(Debug, Clone)]
pub struct BuildOutcome {
    pub path: PathBuf,
    pub sha256: String,
    pub artifact: NetworkArtifact,
}

/// Parses, stacks, resamples, smooths and reconciles, then writes `network.json`.
pub fn cmd_build(cfg: &ProjectConfig) -> Result<BuildOutcome> {
    let osm_text = read_text(&cfg.osm)?;
    let dem_text = read_text(&cfg.dem)?;
    let bbox = cfg.bbox()?;
    let net2d = parse_osm(&osm_text, &bbox)?;
    log::info!("parsed {} nodes and {} segments", net2d.nodes.len(), net2d.segments.len());
    let grid = parse_ascii_grid(&dem_text).map_err(|e| input_err(&cfg.dem, e))?;
    let network = builder::build(&net2d, &grid, &cfg.build_config())?;
    let flagged: Vec<String> = network.flagged_segments().iter().map(|s| s.to_string()).collect();
    if !flagged.is_empty() {
        log::warn!("{} segment(s) could not be smoothed: {}", flagged.len(), flagged.join(", "));
    }
    let artifact = NetworkArtifact {
        schema: ARTIFACT_SCHEMA.into(),
        version: ARTIFACT_VERSION,
        provenance: ArtifactProvenance {
            osm: input_file(&cfg.osm, osm_text.as_bytes()),
            dem: input_file(&cfg.dem, dem_text.as_bytes()),
            dem_datum: cfg.dem_datum.clone().unwrap_or_else(|| "unspecified".into()),
            bbox,
            sampling_mode: cfg.sampling_mode,
            iterations: network.segments.iter().map(|s| (s.id.to_string(), s.smoothing.iterations)).collect(),
            flagged_segments: flagged,
            tool_version: env!("CARGO_PKG_VERSION").into(),
        },
        network,
    };
    let json = artifact.to_json()?;
    let path = cfg.artifact_path();
    write_file(&path, json.as_bytes())?;
    Ok(BuildOutcome { path, sha256: sha256_hex(json.as_bytes()), artifact })
}

/// Reads an artifact and returns it with the checksum of its bytes.
pub fn load_artifact(path: &Path) -> Result<(NetworkArtifact, String)> {
    let text = read_text(path)?;
    let artifact = NetworkArtifact::from_json(&text).map_err(|e| input_err(path, e))?;
    Ok((artifact, sha256_hex(text.as_bytes())))
}

/// Compares the artifact against `reference` (a DEM) and writes `report.json`.
/// The report is returned whether or not it passes.
pub fn cmd_validate(artifact: &Path, reference: &Path, compliance_floor: f64, out_dir: &Path) -> Result<ValidationReport> {
    let (artifact, _) = load_artifact(artifact)?;
    let grid = load_dem(reference)?;
    let net = &artifact.network;
    let terrain = Terrain::new(&grid, net.frame, net.provenance.sampling_mode);
    let name = reference.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let report = validate(net, &name, |x, y| terrain.elevation(x, y).ok(), compliance_floor)?;
    write_file(&out_dir.join(REPORT_FILE), report.to_json().as_bytes())?;
    log::info!(
        "mae {:.4} rmse {:.4} max {:.4}; compliance {:.1}%; max gap {:.4}",
        report.mae,
        report.rmse,
        report.max_error,
        report.gradient_compliance.segments_pct,
        report.intersection_gaps.max_gap
    );
    Ok(report)
}

/// Failure reasons of a report, or `None` when it passes.
pub fn report_failure(report: &ValidationReport) -> Option<String> {
    let mut why = Vec::new();
    if !report.compliance_pass {
        why.push(format!(
            "gradient compliance {:.2}% is below the floor of {:.2}%",
            report.gradient_compliance.segments_pct, report.compliance_floor
        ));
    }
    if !report.intersection_gaps.pass {
        why.push(format!(
            "intersection gap {:.4} m reaches the {} m threshold",
            report.intersection_gaps.max_gap, report.intersection_gaps.threshold
        ));
    }
    (!why.is_empty()).then(|| why.join("; "))
}

pub fn cmd_export(artifact: &Path, out_dir: &Path, formats: &[Format]) -> Result<ExportManifest> {
    let (artifact, sha) = load_artifact(artifact)?;
    Ok(write_exports(&artifact.network, out_dir, formats, &sha)?)
}

pub fn load_routes(path: &Path) -> Result<Vec<Route>> {
    parse_routes(&read_text(path)?).map_err(|e| input_err(path, e))
}

/// Runs the co-simulation and writes `trace.jsonl` and `cosim_summary.json`.
pub fn cmd_cosim(artifact: &Path, sync: &SyncSection, out_dir: &Path) -> Result<CosimSummary> {
    let (artifact, _) = load_artifact(artifact)?;
    let routes = match &sync.routes {
        Some(p) => load_routes(p)?,
        None => synthetic_routes(&artifact.network, sync.vehicles),
    };
    let outcome = run_scenario(&artifact.network, &routes, &sync.sync_config(), sync.transport)?;
    write_file(&out_dir.join(TRACE_FILE), outcome.trace.as_bytes())?;
    let mut summary = serde_json::to_string_pretty(&outcome.summary)?;
    summary.push('\n');
    write_file(&out_dir.join(SUMMARY_FILE), summary.as_bytes())?;
    log::info!(
        "{} steps, {} resync(s), max sync error {:.4} m",
        outcome.summary.steps,
        outcome.summary.resync_count,
        outcome.summary.max_sync_error
    );
    Ok(outcome.summary)
}

#[derive(Debug, Clone)]
pub struct AllOutcome {
    pub build: BuildOutcome,
    pub report: ValidationReport,
    pub manifest: ExportManifest,
}

/// build, validate and export in sequence. Export runs even when validation
/// fails; the caller decides the exit status from the report.
pub fn cmd_all(cfg: &ProjectConfig) -> Result<AllOutcome> {
    let build = cmd_build(cfg)?;
    let reference = cfg.truth_dem.as_deref().unwrap_or(&cfg.dem);
    let report = cmd_validate(&build.path, reference, cfg.compliance_floor, &cfg.output_dir)?;
    let manifest = cmd_export(&build.path, &cfg.output_dir, &cfg.export_formats()?)?;
    Ok(AllOutcome { build, report, manifest })
}
