//! Accuracy and consistency metrics for a finished 3D network.

use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builder::{RoadNetwork3D, GRADE_TOLERANCE};
use crate::dem::SamplingMode;
use crate::geo::Point3;
use crate::road::{NodeId, SegmentId};

/// Endpoint elevations at a node must differ by strictly less than this.
pub const GAP_THRESHOLD: f64 = 0.1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValidationError {
    #[error("no samples to compare")]
    Empty,
    #[error("{generated} generated samples but {actual} reference samples")]
    LengthMismatch { generated: usize, actual: usize },
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mae: f64,
    pub rmse: f64,
    pub max_error: f64,
}

pub fn elevation_error_stats(generated: &[f64], actual: &[f64]) -> Result<ErrorStats, ValidationError> {
    if generated.len() != actual.len() {
        return Err(ValidationError::LengthMismatch { generated: generated.len(), actual: actual.len() });
    }
    if generated.is_empty() {
        return Err(ValidationError::Empty);
    }
    let (mut abs_sum, mut sq_sum, mut max) = (0.0, 0.0, 0.0f64);
    for (i, (g, a)) in generated.iter().zip(actual).enumerate() {
        let d = (g - a).abs();
        if !d.is_finite() {
            return Err(ValidationError::NonFinite(i));
        }
        abs_sum += d;
        sq_sum += d * d;
        max = max.max(d);
    }
    let n = generated.len() as f64;
    let mae = abs_sum / n;
    // guard the power-mean ordering against last-bit rounding
    let rmse = (sq_sum / n).sqrt().max(mae).min(max);
    Ok(ErrorStats { mae, rmse, max_error: max })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Error3d {
    pub per_pair: Vec<f64>,
    pub max: f64,
    pub mean: f64,
}

pub fn error_3d(generated: &[Point3], actual: &[Point3]) -> Result<Error3d, ValidationError> {
    if generated.len() != actual.len() {
        return Err(ValidationError::LengthMismatch { generated: generated.len(), actual: actual.len() });
    }
    if generated.is_empty() {
        return Err(ValidationError::Empty);
    }
    let mut per_pair = Vec::with_capacity(generated.len());
    for (i, (g, a)) in generated.iter().zip(actual).enumerate() {
        let d = ((g.x - a.x).powi(2) + (g.y - a.y).powi(2) + (g.z - a.z).powi(2)).sqrt();
        if !d.is_finite() {
            return Err(ValidationError::NonFinite(i));
        }
        per_pair.push(d);
    }
    let max = per_pair.iter().cloned().fold(0.0, f64::max);
    let mean = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
    Ok(Error3d { per_pair, max, mean })
}

/// Share of valid segments, counted over original segments and over the
/// 1 m sub-segments between consecutive profile samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compliance {
    pub segments_valid: usize,
    pub segments_total: usize,
    pub segments_pct: f64,
    pub subsegments_valid: usize,
    pub subsegments_total: usize,
    pub subsegments_pct: f64,
}

fn percent(valid: usize, total: usize) -> f64 {
    if total == 0 {
        100.0
    } else {
        100.0 * valid as f64 / total as f64
    }
}

pub fn gradient_compliance(net: &RoadNetwork3D) -> Compliance {
    let limits = net.provenance.gradient_limits;
    let (mut seg_ok, mut sub_ok, mut sub_total) = (0, 0, 0);
    for seg in &net.segments {
        let limit = limits.limit(seg.class) + GRADE_TOLERANCE;
        let mut all = true;
        for g in seg.profile.gradients() {
            sub_total += 1;
            if g.abs() <= limit {
                sub_ok += 1;
            } else {
                all = false;
            }
        }
        if all {
            seg_ok += 1;
        }
    }
    let total = net.segments.len();
    Compliance {
        segments_valid: seg_ok,
        segments_total: total,
        segments_pct: percent(seg_ok, total),
        subsegments_valid: sub_ok,
        subsegments_total: sub_total,
        subsegments_pct: percent(sub_ok, sub_total),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeGap {
    pub node: NodeId,
    pub endpoints: usize,
    pub gap: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapCheck {
    pub threshold: f64,
    pub max_gap: f64,
    pub pass: bool,
    pub nodes: Vec<NodeGap>,
}

/// Largest pairwise endpoint elevation difference per node with two or more
/// incident segment ends.
pub fn intersection_gap_check(net: &RoadNetwork3D) -> GapCheck {
    let mut nodes = Vec::new();
    for (node, ends) in net.incidence() {
        if ends.len() < 2 {
            continue;
        }
        let zs = ends.iter().map(|&(i, start)| {
            let z = &net.segments[i].profile.z;
            if start {
                z[0]
            } else {
                z[z.len() - 1]
            }
        });
        let (lo, hi) = zs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), z| (lo.min(z), hi.max(z)));
        let gap = hi - lo;
        nodes.push(NodeGap { node, endpoints: ends.len(), gap, pass: gap < GAP_THRESHOLD });
    }
    let max_gap = nodes.iter().map(|g| g.gap).fold(0.0, f64::max);
    GapCheck { threshold: GAP_THRESHOLD, max_gap, pass: nodes.iter().all(|g| g.pass), nodes }
}

/// Profile points paired with reference elevations at the same xy.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub generated: Vec<Point3>,
    pub actual: Vec<Point3>,
    /// Points the reference could not answer for.
    pub skipped: usize,
}

pub fn compare_with<F>(net: &RoadNetwork3D, reference: F) -> Comparison
where
    F: Fn(f64, f64) -> Option<f64>,
{
    let mut out = Comparison { generated: Vec::new(), actual: Vec::new(), skipped: 0 };
    for p in net.segments.iter().flat_map(|s| &s.points) {
        match reference(p.x, p.y) {
            Some(z) => {
                out.generated.push(*p);
                out.actual.push(Point3::new(p.x, p.y, z));
            }
            None => out.skipped += 1,
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub schema_version: u32,
    pub reference: String,
    pub sampling_mode: SamplingMode,
    pub sample_count: usize,
    pub skipped_samples: usize,
    pub mae: f64,
    pub rmse: f64,
    pub max_error: f64,
    pub error3d_max: f64,
    pub error3d_mean: f64,
    pub gradient_compliance: Compliance,
    pub compliance_floor: f64,
    pub compliance_pass: bool,
    pub intersection_gaps: GapCheck,
    pub flagged_segments: Vec<SegmentId>,
    pub pass: bool,
    /// Unix seconds; `SOURCE_DATE_EPOCH` wins when set.
    pub timestamp: u64,
}

impl ValidationReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report is always serialisable");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

pub fn report_timestamp() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.trim().parse().ok()) {
        return t;
    }
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Full metric suite against `reference`. `compliance_floor` is a percentage
/// applied to the original-segment count.
pub fn validate<F>(
    net: &RoadNetwork3D,
    reference_name: &str,
    reference: F,
    compliance_floor: f64,
) -> Result<ValidationReport, ValidationError>
where
    F: Fn(f64, f64) -> Option<f64>,
{
    let cmp = compare_with(net, reference);
    let gen_z: Vec<f64> = cmp.generated.iter().map(|p| p.z).collect();
    let act_z: Vec<f64> = cmp.actual.iter().map(|p| p.z).collect();
    let stats = elevation_error_stats(&gen_z, &act_z)?;
    let e3 = error_3d(&cmp.generated, &cmp.actual)?;
    let compliance = gradient_compliance(net);
    let gaps = intersection_gap_check(net);
    let compliance_pass = compliance.segments_pct >= compliance_floor;
    Ok(ValidationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        reference: reference_name.to_string(),
        sampling_mode: net.provenance.sampling_mode,
        sample_count: gen_z.len(),
        skipped_samples: cmp.skipped,
        mae: stats.mae,
        rmse: stats.rmse,
        max_error: stats.max_error,
        error3d_max: e3.max,
        error3d_mean: e3.mean,
        pass: compliance_pass && gaps.pass,
        gradient_compliance: compliance,
        compliance_floor,
        compliance_pass,
        intersection_gaps: gaps,
        flagged_segments: net.flagged_segments(),
        timestamp: report_timestamp(),
    })
}
