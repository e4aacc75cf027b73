use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use elevroad_core::cosim::{Framing, Transport};
use elevroad_core::export::{parse_formats, Format};
use elevroad_core::pipeline::{
    cmd_all, cmd_build, cmd_cosim, cmd_export, cmd_validate, report_failure, PipelineError, ProjectConfig,
    SyncSection, NETWORK_FILE,
};

/// Builds elevation-aware road networks from OSM and a DEM, validates them,
/// exports simulator formats and runs a lockstep co-simulation.
///
/// Log level comes from RUST_LOG (default: warn).
#[derive(Debug, Parser)]
#[command(name = "elevroad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the 3D network artifact.
    Build(Project),
    /// Validate an artifact against its DEM or a truth grid.
    Validate {
        #[command(flatten)]
        project: Project,
        #[arg(long)]
        artifact: Option<PathBuf>,
        /// Reference grid; defaults to the config's truth_dem, then its dem.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Minimum segment compliance in percent.
        #[arg(long)]
        compliance_floor: Option<f64>,
    },
    /// Write GeoJSON, OpenDRIVE and SUMO files plus a manifest.
    Export {
        #[command(flatten)]
        project: Project,
        #[arg(long)]
        artifact: Option<PathBuf>,
        /// Comma-separated list of geojson, xodr, netxml.
        #[arg(long)]
        formats: Option<String>,
    },
    /// Run the co-simulation and write a trace and summary.
    Cosim {
        #[command(flatten)]
        project: Project,
        #[arg(long)]
        artifact: Option<PathBuf>,
        #[command(flatten)]
        sync: SyncArgs,
    },
    /// build, validate and export in one go.
    All {
        #[command(flatten)]
        project: Project,
        #[arg(long)]
        formats: Option<String>,
    },
}

#[derive(Debug, Args)]
struct Project {
    /// Project TOML file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SyncArgs {
    /// JSON routes file; synthetic routes are used otherwise.
    #[arg(long)]
    routes: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Step at which to displace the first vehicle on the terrain side.
    #[arg(long)]
    fault_at: Option<u64>,
    /// Fault displacement in metres.
    #[arg(long)]
    fault_offset: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    vehicles: Option<usize>,
    /// Per-step eastward drift in metres.
    #[arg(long)]
    drift: Option<f64>,
    /// memory or tcp.
    #[arg(long)]
    transport: Option<Transport>,
    /// length-prefixed or json-lines.
    #[arg(long)]
    framing: Option<Framing>,
}

impl SyncArgs {
    fn apply(&self, s: &mut SyncSection) {
        if let Some(v) = &self.routes {
            s.routes = Some(v.clone());
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
        if let Some(v) = self.fault_at {
            s.fault_at = Some(v);
        }
        if let Some(v) = self.fault_offset {
            s.fault_offset = Some(v);
        }
        if let Some(v) = self.steps {
            s.max_steps = v;
        }
        if let Some(v) = self.vehicles {
            s.vehicles = v;
        }
        if let Some(v) = self.drift {
            s.drift_per_step = v;
        }
        if let Some(v) = self.transport {
            s.transport = v;
        }
        if let Some(v) = self.framing {
            s.framing = v;
        }
    }
}

fn usage(message: impl Into<String>) -> PipelineError {
    PipelineError::Config { path: "<command line>".into(), message: message.into() }
}

impl Project {
    fn load(&self) -> Result<Option<ProjectConfig>, PipelineError> {
        let Some(path) = &self.config else { return Ok(None) };
        let mut cfg = ProjectConfig::load(path)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        Ok(Some(cfg))
    }

    fn require(&self) -> Result<ProjectConfig, PipelineError> {
        self.load()?.ok_or_else(|| usage("--config is required"))
    }

    fn out_dir(&self, cfg: Option<&ProjectConfig>) -> PathBuf {
        match (&self.out, cfg) {
            (Some(out), _) => out.clone(),
            (None, Some(cfg)) => cfg.output_dir.clone(),
            (None, None) => PathBuf::from("out"),
        }
    }
}

fn artifact_path(
    explicit: &Option<PathBuf>,
    cfg: Option<&ProjectConfig>,
    out: &Path,
) -> Result<PathBuf, PipelineError> {
    match (explicit, cfg) {
        (Some(p), _) => Ok(p.clone()),
        (None, Some(cfg)) => Ok(cfg.artifact_path()),
        (None, None) if out.join(NETWORK_FILE).is_file() => Ok(out.join(NETWORK_FILE)),
        (None, None) => Err(usage("--artifact or --config is required")),
    }
}

fn formats(flag: &Option<String>, cfg: Option<&ProjectConfig>) -> Result<Vec<Format>, PipelineError> {
    match (flag, cfg) {
        (Some(list), _) => Ok(parse_formats(list)?),
        (None, Some(cfg)) => cfg.export_formats(),
        (None, None) => Ok(Format::ALL.to_vec()),
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Build(project) => {
            let cfg = project.require()?;
            let b = cmd_build(&cfg)?;
            let net = &b.artifact.network;
            println!(
                "built {} segments, {} nodes, {} flagged -> {} (sha256 {})",
                net.segments.len(),
                net.nodes.len(),
                b.artifact.provenance.flagged_segments.len(),
                b.path.display(),
                b.sha256
            );
        }
        Command::Validate { project, artifact, truth, compliance_floor } => {
            let cfg = project.load()?;
            let out = project.out_dir(cfg.as_ref());
            let artifact = artifact_path(&artifact, cfg.as_ref(), &out)?;
            let reference = match (&truth, &cfg) {
                (Some(t), _) => t.clone(),
                (None, Some(cfg)) => cfg.truth_dem.clone().unwrap_or_else(|| cfg.dem.clone()),
                (None, None) => return Err(usage("--truth or --config is required")),
            };
            let floor = compliance_floor.or(cfg.as_ref().map(|c| c.compliance_floor)).unwrap_or(100.0);
            if !(0.0..=100.0).contains(&floor) {
                return Err(usage(format!("compliance floor must be a percentage, got {floor}")));
            }
            let report = cmd_validate(&artifact, &reference, floor, &out)?;
            print_report(&report);
            if let Some(why) = report_failure(&report) {
                return Err(PipelineError::ValidationFailed(why));
            }
        }
        Command::Export { project, artifact, formats: list } => {
            let cfg = project.load()?;
            let out = project.out_dir(cfg.as_ref());
            let artifact = artifact_path(&artifact, cfg.as_ref(), &out)?;
            let manifest = cmd_export(&artifact, &out, &formats(&list, cfg.as_ref())?)?;
            for f in &manifest.files {
                println!("{} {} bytes sha256 {}", out.join(&f.path).display(), f.bytes, f.sha256);
            }
        }
        Command::Cosim { project, artifact, sync } => {
            let cfg = project.load()?;
            let out = project.out_dir(cfg.as_ref());
            let artifact = artifact_path(&artifact, cfg.as_ref(), &out)?;
            let mut section = cfg.map(|c| c.sync).unwrap_or_default();
            sync.apply(&mut section);
            let summary = cmd_cosim(&artifact, &section, &out)?;
            println!(
                "{} steps (t_a {}, t_b {}), {} vehicles, {} resync(s), max sync error {:.4} m",
                summary.steps,
                summary.final_t_a,
                summary.final_t_b,
                summary.vehicles,
                summary.resync_count,
                summary.max_sync_error
            );
            for e in &summary.resync_events {
                println!("resync at step {} for {} (error {:.4} m)", e.step, e.vehicle_id, e.sync_error);
            }
        }
        Command::All { project, formats: list } => {
            let mut cfg = project.require()?;
            if let Some(list) = &list {
                cfg.formats = vec![list.clone()];
                cfg.export_formats()?;
            }
            let all = cmd_all(&cfg)?;
            println!("built {} segments -> {}", all.build.artifact.network.segments.len(), all.build.path.display());
            print_report(&all.report);
            for f in &all.manifest.files {
                println!("{} {} bytes", cfg.output_dir.join(&f.path).display(), f.bytes);
            }
            if let Some(why) = report_failure(&all.report) {
                return Err(PipelineError::ValidationFailed(why));
            }
        }
    }
    Ok(())
}

fn print_report(r: &elevroad_core::validation::ValidationReport) {
    println!(
        "mae {:.4} m, rmse {:.4} m, max {:.4} m over {} samples; compliance {:.2}% of segments, {:.2}% of sub-segments; max gap {:.4} m",
        r.mae,
        r.rmse,
        r.max_error,
        r.sample_count,
        r.gradient_compliance.segments_pct,
        r.gradient_compliance.subsegments_pct,
        r.intersection_gaps.max_gap
    );
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
