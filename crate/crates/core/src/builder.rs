//! Lifting a 2D network onto a DEM and shaping its elevation profiles.
//!
//! Stage order: [`stack`] -> [`resample`] -> [`enforce_gradients`] ->
//! [`reconcile_intersections`] (which re-smooths touched segments).

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dem::{DemError, DemGrid, SamplingMode};
use crate::geo::{Extent, LocalFrame, Point2, Point3};
use crate::road::{GradientLimits, NodeId, RoadClass, RoadNetwork2D, SegmentId};

/// Horizontal distances below this are degenerate for gradient computation.
pub const MIN_HORIZONTAL_DISTANCE: f64 = 1e-9;
/// Absolute slack when comparing a grade against its limit; absorbs the
/// rounding difference between station deltas and recomputed xy distances.
pub const GRADE_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_MAX_SMOOTH_ITERS: usize = 1000;
/// Resampled stations this close to an original vertex are dropped.
const STATION_MERGE_DISTANCE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BuildError {
    #[error("{count} road point(s) outside the DEM extent (nodes: {}; segments: {})", join(.node_ids), join(.segment_ids))]
    OutOfExtent { count: usize, node_ids: Vec<NodeId>, segment_ids: Vec<SegmentId> },
    #[error("{count} road point(s) sample nodata cells (nodes: {}; segments: {})", join(.node_ids), join(.segment_ids))]
    Nodata { count: usize, node_ids: Vec<NodeId>, segment_ids: Vec<SegmentId> },
    #[error("segment {0} has zero length")]
    ZeroLength(SegmentId),
    #[error("degenerate segment: horizontal distance {0:e} m")]
    Degenerate(f64),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("segment {segment}: {source}")]
    Dem { segment: SegmentId, source: DemError },
}

fn join<T: fmt::Display>(ids: &[T]) -> String {
    const SHOWN: usize = 10;
    let mut s: Vec<String> = ids.iter().take(SHOWN).map(|i| i.to_string()).collect();
    if ids.len() > SHOWN {
        s.push(format!("... {} more", ids.len() - SHOWN));
    }
    if s.is_empty() {
        "none".into()
    } else {
        s.join(", ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElevationProfile {
    pub stations: Vec<f64>,
    pub z: Vec<f64>,
}

impl ElevationProfile {
    pub fn new(stations: Vec<f64>, z: Vec<f64>) -> Result<Self, BuildError> {
        if stations.len() != z.len() {
            return Err(BuildError::InvalidProfile(format!(
                "{} stations but {} elevations",
                stations.len(),
                z.len()
            )));
        }
        if stations.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(BuildError::InvalidProfile("stations must be strictly increasing".into()));
        }
        if z.iter().chain(&stations).any(|v| !v.is_finite()) {
            return Err(BuildError::InvalidProfile("non-finite value".into()));
        }
        Ok(Self { stations, z })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn gradients(&self) -> impl Iterator<Item = f64> + '_ {
        self.stations
            .windows(2)
            .zip(self.z.windows(2))
            .map(|(s, z)| (z[1] - z[0]) / (s[1] - s[0]))
    }

    /// Index of the interval with the largest |grade| and that grade.
    pub fn worst_gradient(&self) -> Option<(usize, f64)> {
        self.gradients()
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (i, g)| match best {
                Some((_, b)) if b.abs() >= g.abs() => best,
                _ => Some((i, g)),
            })
    }

    pub fn complies(&self, limit: f64) -> bool {
        self.gradients().all(|g| g.abs() <= limit + GRADE_TOLERANCE)
    }
}

/// Why a profile could not be brought under its grade limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintViolation {
    pub iterations: usize,
    pub limit: f64,
    /// Start station of the steepest remaining interval.
    pub worst_station: f64,
    pub worst_gradient: f64,
}

impl fmt::Display for ConstraintViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "grade {:.4} at station {:.3} m still exceeds {:.4} after {} iterations",
            self.worst_gradient, self.worst_station, self.limit, self.iterations
        )
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmoothingError {
    #[error("profile needs at least 2 samples")]
    TooShort,
    #[error("grade limit must be positive, got {0}")]
    BadLimit(f64),
    #[error("smoothing did not converge: {0}")]
    NotConverged(ConstraintViolation),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SmoothingRecord {
    pub iterations: usize,
    pub flagged: Option<ConstraintViolation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node3D {
    pub id: NodeId,
    pub pos: Point3,
    pub is_intersection: bool,
    #[serde(default)]
    pub is_signal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment3D {
    pub id: SegmentId,
    pub from_node: NodeId,
    pub to_node: NodeId,
    /// Original 2D vertices.
    pub polyline: Vec<Point2>,
    pub class: RoadClass,
    pub lanes: u32,
    pub oneway: bool,
    pub profile: ElevationProfile,
    /// One point per profile station.
    pub points: Vec<Point3>,
    #[serde(default)]
    pub smoothing: SmoothingRecord,
}

impl RoadSegment3D {
    pub fn length(&self) -> f64 {
        crate::road::polyline_length(&self.polyline)
    }

    pub fn is_flagged(&self) -> bool {
        self.smoothing.flagged.is_some()
    }

    fn set_elevations(&mut self, z: Vec<f64>) {
        for (p, &zi) in self.points.iter_mut().zip(&z) {
            p.z = zi;
        }
        self.profile.z = z;
    }

    fn start_z(&self) -> f64 {
        self.profile.z[0]
    }

    fn end_z(&self) -> f64 {
        *self.profile.z.last().expect("profile is non-empty")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub sampling_mode: SamplingMode,
    pub gradient_limits: GradientLimits,
    pub max_smooth_iters: usize,
    /// Smoothing runs on the 1 m resampled profile.
    pub smoothing_input: String,
    pub stages: Vec<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadNetwork3D {
    pub nodes: Vec<Node3D>,
    pub segments: Vec<RoadSegment3D>,
    pub frame: LocalFrame,
    pub bbox: Extent,
    pub provenance: Provenance,
}

impl RoadNetwork3D {
    pub fn node(&self, id: NodeId) -> Option<&Node3D> {
        self.nodes.binary_search_by_key(&id, |n| n.id).ok().map(|i| &self.nodes[i])
    }

    pub fn segment(&self, id: &SegmentId) -> Option<&RoadSegment3D> {
        self.segments.iter().find(|s| &s.id == id)
    }

    pub fn flagged_segments(&self) -> Vec<SegmentId> {
        self.segments.iter().filter(|s| s.is_flagged()).map(|s| s.id.clone()).collect()
    }

    /// Segment endpoints touching each node: `(segment index, is_start)`.
    pub fn incidence(&self) -> BTreeMap<NodeId, Vec<(usize, bool)>> {
        let mut map: BTreeMap<NodeId, Vec<(usize, bool)>> = BTreeMap::new();
        for (i, seg) in self.segments.iter().enumerate() {
            map.entry(seg.from_node).or_default().push((i, true));
            map.entry(seg.to_node).or_default().push((i, false));
        }
        map
    }

    /// Drops elevations, recovering the 2D network.
    pub fn to_2d(&self) -> RoadNetwork2D {
        RoadNetwork2D {
            nodes: self
                .nodes
                .iter()
                .map(|n| crate::road::RoadNode {
                    id: n.id,
                    pos: n.pos.xy(),
                    is_intersection: n.is_intersection,
                    is_signal: n.is_signal,
                })
                .collect(),
            segments: self
                .segments
                .iter()
                .map(|s| crate::road::RoadSegment2D {
                    id: s.id.clone(),
                    from_node: s.from_node,
                    to_node: s.to_node,
                    polyline: s.polyline.clone(),
                    class: s.class,
                    lanes: s.lanes,
                    oneway: s.oneway,
                })
                .collect(),
            frame: self.frame,
            bbox: self.bbox,
            warnings: self.provenance.warnings.clone(),
        }
    }
}

/// DEM lookups in local-frame coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Terrain<'a> {
    pub grid: &'a DemGrid,
    pub frame: LocalFrame,
    pub mode: SamplingMode,
}

impl<'a> Terrain<'a> {
    pub fn new(grid: &'a DemGrid, frame: LocalFrame, mode: SamplingMode) -> Self {
        Self { grid, frame, mode }
    }

    pub fn elevation(&self, x: f64, y: f64) -> Result<f64, DemError> {
        let (e, n) = self.frame.to_utm_xy(x, y);
        self.grid.sample_with(self.mode, e, n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildConfig {
    pub sampling_mode: SamplingMode,
    pub gradient_limits: GradientLimits,
    pub max_smooth_iters: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            sampling_mode: SamplingMode::Idw4,
            gradient_limits: GradientLimits::default(),
            max_smooth_iters: DEFAULT_MAX_SMOOTH_ITERS,
        }
    }
}

/// Appends a DEM elevation to every node and polyline vertex. Topology and
/// xy are untouched.
pub fn stack(net: &RoadNetwork2D, terrain: &Terrain<'_>, config: &BuildConfig) -> Result<RoadNetwork3D, BuildError> {
    #[derive(Default)]
    struct Failures {
        out_count: usize,
        out_nodes: Vec<NodeId>,
        out_segments: Vec<SegmentId>,
        nodata_count: usize,
        nodata_nodes: Vec<NodeId>,
        nodata_segments: Vec<SegmentId>,
    }
    let mut fail = Failures::default();

    let mut nodes = Vec::with_capacity(net.nodes.len());
    for n in &net.nodes {
        match terrain.elevation(n.pos.x, n.pos.y) {
            Ok(z) => nodes.push(Node3D {
                id: n.id,
                pos: Point3::new(n.pos.x, n.pos.y, z),
                is_intersection: n.is_intersection,
                is_signal: n.is_signal,
            }),
            Err(DemError::Nodata { .. }) => {
                fail.nodata_count += 1;
                fail.nodata_nodes.push(n.id);
            }
            Err(_) => {
                fail.out_count += 1;
                fail.out_nodes.push(n.id);
            }
        }
    }

    let stacked: Vec<Result<RoadSegment3D, (usize, usize, SegmentId)>> = net
        .segments
        .par_iter()
        .map(|seg| {
            let mut points = Vec::with_capacity(seg.polyline.len());
            let (mut outside, mut nodata) = (0, 0);
            for p in &seg.polyline {
                match terrain.elevation(p.x, p.y) {
                    Ok(z) => points.push(Point3::new(p.x, p.y, z)),
                    Err(DemError::Nodata { .. }) => nodata += 1,
                    Err(_) => outside += 1,
                }
            }
            if outside + nodata > 0 {
                return Err((outside, nodata, seg.id.clone()));
            }
            let mut stations = Vec::with_capacity(points.len());
            let mut s = 0.0;
            for (i, p) in seg.polyline.iter().enumerate() {
                if i > 0 {
                    s += seg.polyline[i - 1].distance(p);
                }
                stations.push(s);
            }
            let z = points.iter().map(|p| p.z).collect();
            Ok(RoadSegment3D {
                id: seg.id.clone(),
                from_node: seg.from_node,
                to_node: seg.to_node,
                polyline: seg.polyline.clone(),
                class: seg.class,
                lanes: seg.lanes,
                oneway: seg.oneway,
                profile: ElevationProfile { stations, z },
                points,
                smoothing: SmoothingRecord::default(),
            })
        })
        .collect();

    let mut segments = Vec::with_capacity(stacked.len());
    for r in stacked {
        match r {
            Ok(s) => segments.push(s),
            Err((outside, nodata, id)) => {
                if outside > 0 {
                    fail.out_count += outside;
                    fail.out_segments.push(id.clone());
                }
                if nodata > 0 {
                    fail.nodata_count += nodata;
                    fail.nodata_segments.push(id);
                }
            }
        }
    }
    if fail.out_count > 0 {
        return Err(BuildError::OutOfExtent {
            count: fail.out_count,
            node_ids: fail.out_nodes,
            segment_ids: fail.out_segments,
        });
    }
    if fail.nodata_count > 0 {
        return Err(BuildError::Nodata {
            count: fail.nodata_count,
            node_ids: fail.nodata_nodes,
            segment_ids: fail.nodata_segments,
        });
    }

    Ok(RoadNetwork3D {
        nodes,
        segments,
        frame: net.frame,
        bbox: net.bbox,
        provenance: Provenance {
            sampling_mode: config.sampling_mode,
            gradient_limits: config.gradient_limits,
            max_smooth_iters: config.max_smooth_iters,
            smoothing_input: "resampled_1m".into(),
            stages: vec!["stack".into()],
            warnings: net.warnings.clone(),
        },
    })
}

fn point_at(polyline: &[Point2], leg: usize, leg_start: f64, leg_len: f64, s: f64) -> Point2 {
    let t = ((s - leg_start) / leg_len).clamp(0.0, 1.0);
    polyline[leg].lerp(&polyline[leg + 1], t)
}

/// Densifies a stacked segment: with `n = floor(L / 1 m)`, adds stations
/// `k * L / n` for `k = 1..n-1`, keeping every original vertex.
pub fn resample_segment(seg: &RoadSegment3D, terrain: &Terrain<'_>) -> Result<RoadSegment3D, BuildError> {
    let poly = &seg.polyline;
    let length = crate::road::polyline_length(poly);
    if !(length > MIN_HORIZONTAL_DISTANCE) {
        return Err(BuildError::ZeroLength(seg.id.clone()));
    }
    let n = (length / 1.0).floor() as usize;
    let spacing = if n > 0 { length / n as f64 } else { length };
    let dem_err = |source| BuildError::Dem { segment: seg.id.clone(), source };

    let mut stations = Vec::with_capacity(n + poly.len());
    let mut points = Vec::with_capacity(n + poly.len());
    let mut k = 1usize;
    let mut leg_start = 0.0;
    for leg in 0..poly.len() - 1 {
        let leg_len = poly[leg].distance(&poly[leg + 1]);
        let leg_end = leg_start + leg_len;
        let z = if leg == 0 { seg.start_z() } else { terrain.elevation(poly[leg].x, poly[leg].y).map_err(dem_err)? };
        stations.push(leg_start);
        points.push(Point3::new(poly[leg].x, poly[leg].y, z));
        let last_leg = leg + 2 == poly.len();
        while k < n && (last_leg || (k as f64 * spacing) < leg_end) {
            let s = k as f64 * spacing;
            k += 1;
            // merge with a nearby original vertex
            if s - leg_start <= STATION_MERGE_DISTANCE || leg_end - s <= STATION_MERGE_DISTANCE {
                continue;
            }
            let p = point_at(poly, leg, leg_start, leg_len, s);
            let z = terrain.elevation(p.x, p.y).map_err(dem_err)?;
            stations.push(s);
            points.push(Point3::new(p.x, p.y, z));
        }
        leg_start = leg_end;
    }
    let last = *poly.last().expect("segment has >= 2 vertices");
    stations.push(leg_start);
    points.push(Point3::new(last.x, last.y, seg.end_z()));

    let z = points.iter().map(|p| p.z).collect();
    Ok(RoadSegment3D {
        profile: ElevationProfile::new(stations, z)?,
        points,
        ..seg.clone()
    })
}

pub fn resample(net: &RoadNetwork3D, terrain: &Terrain<'_>) -> Result<RoadNetwork3D, BuildError> {
    let segments = net
        .segments
        .par_iter()
        .map(|s| resample_segment(s, terrain))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = RoadNetwork3D { segments, ..net.clone() };
    out.provenance.stages.push("resample".into());
    Ok(out)
}

/// Signed grade between two points: rise over horizontal run.
pub fn gradient(start: &Point3, end: &Point3) -> Result<f64, BuildError> {
    let run = (end.x - start.x).hypot(end.y - start.y);
    if run < MIN_HORIZONTAL_DISTANCE {
        return Err(BuildError::Degenerate(run));
    }
    Ok((end.z - start.z) / run)
}

/// Three-point moving average over interior samples, repeated until every
/// interval grade is within `limit`. Endpoints never move. A compliant input
/// is returned untouched with zero iterations.
pub fn smooth_profile(
    profile: &ElevationProfile,
    limit: f64,
    max_iters: usize,
) -> Result<(ElevationProfile, usize), SmoothingError> {
    if profile.len() < 2 {
        return Err(SmoothingError::TooShort);
    }
    if !(limit > 0.0) {
        return Err(SmoothingError::BadLimit(limit));
    }
    if profile.complies(limit) {
        return Ok((profile.clone(), 0));
    }
    let mut current = profile.clone();
    let mut next = profile.z.clone();
    for iteration in 1..=max_iters {
        let z = &current.z;
        for i in 1..z.len() - 1 {
            next[i] = (z[i - 1] + z[i] + z[i + 1]) / 3.0;
        }
        std::mem::swap(&mut current.z, &mut next);
        if current.complies(limit) {
            return Ok((current, iteration));
        }
    }
    let (idx, g) = current.worst_gradient().expect("at least one interval");
    Err(SmoothingError::NotConverged(ConstraintViolation {
        iterations: max_iters,
        limit,
        worst_station: current.stations[idx],
        worst_gradient: g,
    }))
}

fn smooth_segment(seg: &mut RoadSegment3D, limits: &GradientLimits, max_iters: usize) {
    let limit = limits.limit(seg.class);
    match smooth_profile(&seg.profile, limit, max_iters) {
        Ok((_, 0)) => {}
        Ok((profile, used)) => {
            seg.set_elevations(profile.z);
            seg.smoothing = SmoothingRecord { iterations: used, flagged: None };
        }
        Err(SmoothingError::NotConverged(v)) => {
            log::warn!("segment {} flagged: {v}", seg.id);
            seg.smoothing = SmoothingRecord { iterations: v.iterations, flagged: Some(v) };
        }
        Err(e) => {
            // only reachable with a < 2 sample profile or a non-positive limit
            let (idx, g) = seg.profile.worst_gradient().unwrap_or((0, f64::NAN));
            log::warn!("segment {} cannot be smoothed: {e}", seg.id);
            seg.smoothing = SmoothingRecord {
                iterations: 0,
                flagged: Some(ConstraintViolation {
                    iterations: 0,
                    limit,
                    worst_station: seg.profile.stations.get(idx).copied().unwrap_or(0.0),
                    worst_gradient: g,
                }),
            };
        }
    }
}

/// Smooths every segment against its class limit. Segments that cannot be
/// brought into compliance keep their input profile and are flagged.
pub fn enforce_gradients(net: &RoadNetwork3D, limits: &GradientLimits, max_iters: usize) -> RoadNetwork3D {
    let mut out = net.clone();
    out.segments.par_iter_mut().for_each(|seg| smooth_segment(seg, limits, max_iters));
    out.provenance.gradient_limits = *limits;
    out.provenance.max_smooth_iters = max_iters;
    if out.provenance.stages.last().map(String::as_str) != Some("enforce_gradients") {
        out.provenance.stages.push("enforce_gradients".into());
    }
    out
}

/// Gives every node shared by two or more segment endpoints the mean of those
/// endpoint elevations, then re-smooths segments whose grades were pushed
/// over their limit.
pub fn reconcile_intersections(net: &RoadNetwork3D, limits: &GradientLimits, max_iters: usize) -> RoadNetwork3D {
    let mut out = net.clone();
    let incidence = out.incidence();
    let mut touched = vec![false; out.segments.len()];
    for (node_id, ends) in &incidence {
        if ends.len() < 2 {
            continue;
        }
        let mean = ends
            .iter()
            .map(|&(i, start)| if start { out.segments[i].start_z() } else { out.segments[i].end_z() })
            .sum::<f64>()
            / ends.len() as f64;
        for &(i, start) in ends {
            let seg = &mut out.segments[i];
            let idx = if start { 0 } else { seg.profile.len() - 1 };
            if seg.profile.z[idx] != mean {
                seg.profile.z[idx] = mean;
                seg.points[idx].z = mean;
                touched[i] = true;
            }
        }
        if let Ok(pos) = out.nodes.binary_search_by_key(node_id, |n| n.id) {
            out.nodes[pos].pos.z = mean;
        }
    }
    for (seg, touched) in out.segments.iter_mut().zip(touched) {
        let limit = limits.limit(seg.class);
        if touched && !seg.profile.complies(limit) {
            smooth_segment(seg, limits, max_iters);
        }
    }
    out.provenance.stages.push("reconcile_intersections".into());
    out
}

/// Full build: stack, resample, enforce gradients, reconcile intersections.
pub fn build(net: &RoadNetwork2D, grid: &DemGrid, config: &BuildConfig) -> Result<RoadNetwork3D, BuildError> {
    let terrain = Terrain::new(grid, net.frame, config.sampling_mode);
    let stacked = stack(net, &terrain, config)?;
    let resampled = resample(&stacked, &terrain)?;
    let smoothed = enforce_gradients(&resampled, &config.gradient_limits, config.max_smooth_iters);
    Ok(reconcile_intersections(&smoothed, &config.gradient_limits, config.max_smooth_iters))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{Hemisphere, UtmPoint};
    use crate::road::{RoadNode, RoadSegment2D};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const E0: f64 = 500_000.0;
    const N0: f64 = 4_000_000.0;

    fn frame() -> LocalFrame {
        LocalFrame::new(UtmPoint::new(E0, N0, 10, Hemisphere::North).unwrap())
    }

    fn grid(f: impl Fn(f64, f64) -> f64) -> DemGrid {
        DemGrid::from_fn(E0 - 10.0, N0 - 10.0, 1.0, 240, 240, |e, n| f(e - E0, n - N0)).unwrap()
    }

    fn extent() -> Extent {
        Extent { min_x: 0.0, min_y: 0.0, max_x: 200.0, max_y: 200.0 }
    }

    fn node(id: i64, x: f64, y: f64) -> RoadNode {
        RoadNode { id: NodeId(id), pos: Point2::new(x, y), is_intersection: false, is_signal: false }
    }

    fn seg(id: &str, from: i64, to: i64, polyline: Vec<Point2>, class: RoadClass) -> RoadSegment2D {
        RoadSegment2D {
            id: id.into(),
            from_node: NodeId(from),
            to_node: NodeId(to),
            polyline,
            class,
            lanes: 1,
            oneway: false,
        }
    }

    fn line_net(len: f64) -> RoadNetwork2D {
        let nodes = vec![node(1, 10.0, 50.0), node(2, 10.0 + len, 50.0)];
        let s = seg("a", 1, 2, vec![Point2::new(10.0, 50.0), Point2::new(10.0 + len, 50.0)], RoadClass::Residential);
        RoadNetwork2D::new(frame(), extent(), nodes, vec![s]).unwrap()
    }

    fn stacked(net: &RoadNetwork2D, g: &DemGrid) -> RoadNetwork3D {
        stack(net, &Terrain::new(g, net.frame, SamplingMode::Idw4), &BuildConfig::default()).unwrap()
    }

    #[test]
    fn flat_dem_stacks_constant() {
        let g = grid(|_, _| 5.0);
        let net = stacked(&line_net(30.0), &g);
        assert!(net.nodes.iter().all(|n| n.pos.z == 5.0));
        assert!(net.segments[0].points.iter().all(|p| p.z == 5.0));
    }

    #[test]
    fn stacking_matches_independent_sampling() {
        let g = grid(|x, y| 0.02 * x + 0.01 * y + 3.0);
        let poly = vec![Point2::new(3.3, 7.7), Point2::new(40.25, 19.1), Point2::new(80.6, 3.45)];
        let nodes = vec![node(1, 3.3, 7.7), node(2, 80.6, 3.45)];
        let net2 = RoadNetwork2D::new(frame(), extent(), nodes, vec![seg("a", 1, 2, poly.clone(), RoadClass::Arterial)]).unwrap();
        let net = stacked(&net2, &g);
        for (p, q) in net.segments[0].points.iter().zip(&poly) {
            let oracle = g.sample(E0 + q.x, N0 + q.y).unwrap();
            assert_eq!(p.z, oracle);
            assert_eq!((p.x, p.y), (q.x, q.y));
        }
        assert_eq!(net.to_2d().segments, net2.segments);
    }

    #[test]
    fn out_of_extent_lists_node() {
        let g = DemGrid::from_fn(E0, N0, 1.0, 20, 20, |_, _| 0.0).unwrap();
        let nodes = vec![node(1, 5.0, 5.0), node(7, 20.0, 5.0)];
        let s = seg("a", 1, 7, vec![Point2::new(5.0, 5.0), Point2::new(20.0, 5.0)], RoadClass::Residential);
        let net = RoadNetwork2D::new(frame(), extent(), nodes, vec![s]).unwrap();
        let err = stack(&net, &Terrain::new(&g, net.frame, SamplingMode::Idw4), &BuildConfig::default()).unwrap_err();
        match err {
            BuildError::OutOfExtent { count, node_ids, segment_ids } => {
                assert_eq!(count, 2);
                assert_eq!(node_ids, vec![NodeId(7)]);
                assert_eq!(segment_ids, vec![SegmentId::from("a")]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn resampled_stations(len: f64) -> Vec<f64> {
        let g = grid(|_, _| 0.0);
        let net = stacked(&line_net(len), &g);
        let t = Terrain::new(&g, net.frame, SamplingMode::Idw4);
        resample_segment(&net.segments[0], &t).unwrap().profile.stations
    }

    #[test]
    fn resample_every_meter() {
        let st = resampled_stations(5.0);
        assert_eq!(st.len(), 6);
        for (s, e) in st.iter().zip([0.0, 1.0, 2.0, 3.0, 4.0, 5.0]) {
            assert_abs_diff_eq!(*s, e, epsilon = 1e-12);
        }
        assert_eq!(resampled_stations(0.5), vec![0.0, 0.5]);
        let three = resampled_stations(3.0);
        assert_eq!(three.len(), 4);
        assert_abs_diff_eq!(three[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(three[2], 2.0, epsilon = 1e-12);
        // uniform L/n spacing, no sliver at the end
        let st = resampled_stations(10.5);
        assert_eq!(st.len(), 11);
        assert_abs_diff_eq!(st[1], 1.05, epsilon = 1e-12);
    }

    #[test]
    fn resample_keeps_vertices_and_length() {
        let g = grid(|x, y| (x * 0.05).sin() + 0.01 * y);
        let poly = vec![Point2::new(3.3, 7.7), Point2::new(40.25, 19.1), Point2::new(41.0, 19.1), Point2::new(80.6, 3.45)];
        let nodes = vec![node(1, 3.3, 7.7), node(2, 80.6, 3.45)];
        let net2 = RoadNetwork2D::new(frame(), extent(), nodes, vec![seg("a", 1, 2, poly.clone(), RoadClass::Arterial)]).unwrap();
        let net = stacked(&net2, &g);
        let t = Terrain::new(&g, net.frame, SamplingMode::Idw4);
        let r = resample_segment(&net.segments[0], &t).unwrap();
        assert_eq!(r.points.len(), r.profile.len());
        assert!(r.profile.stations.windows(2).all(|w| w[1] > w[0]));
        assert_abs_diff_eq!(*r.profile.stations.last().unwrap(), net2.segments[0].length(), epsilon = 1e-9);
        for v in &poly {
            assert!(r.points.iter().any(|p| p.x == v.x && p.y == v.y), "vertex {v:?} dropped");
        }
        // stations are arc length
        for (w, s) in r.points.windows(2).zip(r.profile.stations.windows(2)) {
            assert_abs_diff_eq!(w[0].xy().distance(&w[1].xy()), s[1] - s[0], epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_length_rejected() {
        let g = grid(|_, _| 0.0);
        let mut s = stacked(&line_net(5.0), &g).segments[0].clone();
        s.polyline = vec![Point2::new(1.0, 1.0), Point2::new(1.0, 1.0)];
        let t = Terrain::new(&g, frame(), SamplingMode::Idw4);
        assert_eq!(resample_segment(&s, &t), Err(BuildError::ZeroLength("a".into())));
    }

    #[test]
    fn gradient_examples() {
        assert_eq!(gradient(&Point3::new(0.0, 0.0, 0.0), &Point3::new(100.0, 0.0, 8.0)).unwrap(), 0.08);
        assert_eq!(gradient(&Point3::new(0.0, 0.0, 3.0), &Point3::new(3.0, 4.0, 3.0)).unwrap(), 0.0);
        assert_eq!(gradient(&Point3::new(0.0, 0.0, -1.0), &Point3::new(3.0, 4.0, -2.0)).unwrap(), -0.2);
        assert!(matches!(gradient(&Point3::new(1.0, 1.0, 0.0), &Point3::new(1.0, 1.0, 5.0)), Err(BuildError::Degenerate(_))));
    }

    fn profile(stations: &[f64], z: &[f64]) -> ElevationProfile {
        ElevationProfile::new(stations.to_vec(), z.to_vec()).unwrap()
    }

    #[test]
    fn one_pass_example() {
        let (p, it) = smooth_profile(&profile(&[0.0, 10.0, 20.0], &[0.0, 9.0, 0.0]), 0.5, 1000).unwrap();
        assert_eq!(it, 1);
        assert_eq!(p.z, vec![0.0, 3.0, 0.0]);
        let g: Vec<f64> = p.gradients().collect();
        assert_eq!(g, vec![0.3, -0.3]);
    }

    #[test]
    fn compliant_profile_untouched() {
        let p = profile(&[0.0, 1.0, 2.0, 3.0], &[0.0, 0.05, 0.1, 0.15]);
        let (q, it) = smooth_profile(&p, 0.08, 1000).unwrap();
        assert_eq!(it, 0);
        assert_eq!(q, p);
    }

    #[test]
    fn single_spike_converges_in_five_passes() {
        // Independent oracle (Python, exact rationals): 100 / 3^5 at the
        // interior sample, grade 0.0412 after five passes.
        let (p, it) = smooth_profile(&profile(&[0.0, 10.0, 20.0], &[0.0, 100.0, 0.0]), 0.08, 1000).unwrap();
        assert_eq!(it, 5);
        assert_abs_diff_eq!(p.z[1], 0.41152263374485604, epsilon = 1e-12);
    }

    #[test]
    fn pinned_cliff_never_converges() {
        let err = smooth_profile(&profile(&[0.0, 10.0, 20.0], &[0.0, 0.0, 100.0]), 0.08, 1000).unwrap_err();
        match err {
            SmoothingError::NotConverged(v) => {
                assert_eq!(v.iterations, 1000);
                assert_abs_diff_eq!(v.worst_gradient.abs(), 5.0, epsilon = 1e-6);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(smooth_profile(&profile(&[0.0], &[1.0]), 0.1, 10), Err(SmoothingError::TooShort));
        assert_eq!(smooth_profile(&profile(&[0.0, 1.0], &[1.0, 1.0]), 0.0, 10), Err(SmoothingError::BadLimit(0.0)));
    }

    fn grid_net() -> RoadNetwork2D {
        // 3x3 nodes, 50 m blocks, mixed classes
        let mut nodes = Vec::new();
        let mut segs = Vec::new();
        let id = |r: i64, c: i64| r * 3 + c + 1;
        for r in 0..3 {
            for c in 0..3 {
                nodes.push(RoadNode {
                    id: NodeId(id(r, c)),
                    pos: Point2::new(20.0 + 50.0 * c as f64, 20.0 + 50.0 * r as f64),
                    is_intersection: true,
                    is_signal: false,
                });
            }
        }
        let pos = |n: i64| {
            let (r, c) = ((n - 1) / 3, (n - 1) % 3);
            Point2::new(20.0 + 50.0 * c as f64, 20.0 + 50.0 * r as f64)
        };
        for r in 0..3 {
            for c in 0..3 {
                if c < 2 {
                    let (a, b) = (id(r, c), id(r, c + 1));
                    segs.push(seg(&format!("h{a}"), a, b, vec![pos(a), pos(b)], RoadClass::Highway));
                }
                if r < 2 {
                    let (a, b) = (id(r, c), id(r + 1, c));
                    segs.push(seg(&format!("v{a}"), a, b, vec![pos(a), pos(b)], RoadClass::Residential));
                }
            }
        }
        RoadNetwork2D::new(frame(), extent(), nodes, segs).unwrap()
    }

    #[test]
    fn classes_judged_against_own_limits() {
        // 0.10 grade along x: too steep for highways (0.08), fine for residential
        // roads which run along y anyway; add a bump so smoothing has work.
        let g = grid(|x, y| 0.1 * x + 2.0 * (-((y - 45.0) / 3.0).powi(2)).exp());
        let cfg = BuildConfig::default();
        let net = build(&grid_net(), &g, &cfg).unwrap();
        for s in &net.segments {
            let limit = cfg.gradient_limits.limit(s.class);
            if s.class == RoadClass::Highway {
                assert!(s.is_flagged(), "{} should be flagged", s.id);
            } else {
                assert!(!s.is_flagged(), "{} flagged", s.id);
                assert!(s.profile.complies(limit));
                assert!(s.smoothing.iterations > 0 || s.profile.gradients().all(|g| g.abs() <= limit));
            }
        }
    }

    #[test]
    fn compliant_network_is_untouched_and_idempotent() {
        let g = grid(|x, y| 0.01 * x + 0.02 * y);
        let cfg = BuildConfig::default();
        let t = Terrain::new(&g, frame(), cfg.sampling_mode);
        let net = resample(&stack(&grid_net(), &t, &cfg).unwrap(), &t).unwrap();
        let once = enforce_gradients(&net, &cfg.gradient_limits, 1000);
        for (a, b) in net.segments.iter().zip(&once.segments) {
            assert_eq!(a.profile, b.profile);
        }
        let twice = enforce_gradients(&once, &cfg.gradient_limits, 1000);
        assert_eq!(once, twice);
    }

    #[test]
    fn steep_segment_matches_standalone_smoothing() {
        let g = grid(|x, _| 4.0 * (x / 6.0).sin());
        let cfg = BuildConfig::default();
        let t = Terrain::new(&g, frame(), cfg.sampling_mode);
        let net = resample(&stack(&line_net(60.0), &t, &cfg).unwrap(), &t).unwrap();
        let raw = net.segments[0].profile.clone();
        let oracle = smooth_profile(&raw, 0.15, 1000);
        let out = enforce_gradients(&net, &cfg.gradient_limits, 1000);
        match oracle {
            Ok((p, it)) => {
                assert!(it > 0);
                assert_eq!(out.segments[0].profile, p);
                assert_eq!(out.segments[0].smoothing.iterations, it);
                assert_eq!(enforce_gradients(&out, &cfg.gradient_limits, 1000), out);
            }
            Err(_) => assert!(out.segments[0].is_flagged()),
        }
    }

    fn star(zs: &[f64]) -> RoadNetwork3D {
        let g = grid(|_, _| 0.0);
        let center = Point2::new(100.0, 100.0);
        let dirs = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)];
        let mut nodes = vec![RoadNode { id: NodeId(0), pos: center, is_intersection: zs.len() > 1, is_signal: false }];
        let mut segs = Vec::new();
        for (i, _) in zs.iter().enumerate() {
            let (dx, dy) = dirs[i];
            let end = Point2::new(100.0 + 30.0 * dx, 100.0 + 30.0 * dy);
            nodes.push(node(i as i64 + 1, end.x, end.y));
            segs.push(seg(&format!("s{i}"), 0, i as i64 + 1, vec![center, end], RoadClass::Residential));
        }
        let net2 = RoadNetwork2D::new(frame(), extent(), nodes, segs).unwrap();
        let mut net = stacked(&net2, &g);
        for (s, &z) in net.segments.iter_mut().zip(zs) {
            s.profile.z[0] = z;
            s.points[0].z = z;
        }
        net
    }

    #[test]
    fn reconcile_means() {
        let limits = GradientLimits::default();
        let net = reconcile_intersections(&star(&[10.04, 10.06]), &limits, 1000);
        assert!(net.segments.iter().all(|s| (s.profile.z[0] - 10.05).abs() < 1e-12));
        assert!((net.node(NodeId(0)).unwrap().pos.z - 10.05).abs() < 1e-12);
        // the endpoint jump made both segments too steep, so they were re-smoothed
        assert!(net.segments.iter().all(|s| s.profile.complies(0.15) || s.is_flagged()));

        let four = reconcile_intersections(&star(&[10.0, 10.2, 9.9, 10.1]), &limits, 1000);
        for s in &four.segments {
            assert_abs_diff_eq!(s.profile.z[0], 10.05, epsilon = 1e-12);
        }
        let starts: Vec<f64> = four.segments.iter().map(|s| s.profile.z[0]).collect();
        assert!(starts.windows(2).all(|w| w[0] == w[1]));

        let lone = star(&[3.0]);
        assert_eq!(reconcile_intersections(&lone, &limits, 1000).segments, lone.segments);
    }

    proptest! {
        #[test]
        fn smoothing_stays_within_original_range(
            z in prop::collection::vec(-50.0f64..50.0, 3..40),
            limit in 0.05f64..1.0,
        ) {
            let stations: Vec<f64> = (0..z.len()).map(|i| i as f64).collect();
            let p = ElevationProfile::new(stations, z.clone()).unwrap();
            let lo = z.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = match smooth_profile(&p, limit, 200) {
                Ok((q, _)) => q,
                Err(SmoothingError::NotConverged(_)) => return Ok(()),
                Err(e) => panic!("{e}"),
            };
            prop_assert!(out.complies(limit));
            prop_assert_eq!(out.z[0], z[0]);
            prop_assert_eq!(*out.z.last().unwrap(), *z.last().unwrap());
            prop_assert!(out.z.iter().all(|&v| v >= lo - 1e-9 && v <= hi + 1e-9));
        }
    }
}
