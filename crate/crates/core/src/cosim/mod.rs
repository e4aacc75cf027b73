//! Lockstep co-simulation between a 2D traffic endpoint and a 3D terrain
//! endpoint over the generated network.

mod protocol;
mod routes;
mod scenario;
mod transport;

use std::collections::HashMap;
use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builder::RoadNetwork3D;

pub use protocol::{Connection, Framing, Message, PROTOCOL_VERSION};
pub use routes::{parse_routes, synthetic_routes, Route, RoutePath};
pub use scenario::{run_scenario, CosimSummary, Lockstep, ScenarioOutcome, StepOutcome, TraceRecord};
pub use transport::{memory_pipe, PipeEnd, Transport};

pub const DEFAULT_DT: f64 = 0.05;
pub const DEFAULT_RESYNC_THRESHOLD: f64 = 0.5;
pub const DEFAULT_SNAP_DISTANCE: f64 = 5.0;

#[derive(Debug, Error)]
pub enum CosimError {
    #[error("({x:.3}, {y:.3}) is more than {snap} m from any road")]
    OffNetwork { x: f64, y: f64, snap: f64 },
    #[error("vehicle id mismatch: `{0}` vs `{1}`")]
    IdMismatch(String, String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("clock mismatch: expected step {expected}, peer is at {got}")]
    ClockMismatch { expected: u64, got: u64 },
    #[error("invalid route: {0}")]
    InvalidRoute(String),
    #[error("invalid sync config: {0}")]
    InvalidConfig(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("message encoding: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    pub step: u64,
    /// Eastward displacement applied once to the terrain endpoint's first vehicle.
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncConfig {
    pub dt: f64,
    pub resync_threshold: f64,
    pub max_steps: u64,
    pub snap_distance: f64,
    /// Eastward drift added to every terrain-endpoint vehicle each step.
    pub drift_per_step: f64,
    /// Relative amplitude of per-step speed noise on the traffic endpoint.
    pub speed_noise: f64,
    pub seed: u64,
    pub fault: Option<Fault>,
    pub framing: Framing,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            resync_threshold: DEFAULT_RESYNC_THRESHOLD,
            max_steps: 1000,
            snap_distance: DEFAULT_SNAP_DISTANCE,
            drift_per_step: 0.0,
            speed_noise: 0.0,
            seed: 0,
            fault: None,
            framing: Framing::LengthPrefixed,
        }
    }
}

impl SyncConfig {
    pub fn check(&self) -> Result<(), CosimError> {
        let bad = |m: String| Err(CosimError::InvalidConfig(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.resync_threshold > 0.0) {
            return bad(format!("resync threshold must be positive, got {}", self.resync_threshold));
        }
        if !(self.snap_distance > 0.0) {
            return bad(format!("snap distance must be positive, got {}", self.snap_distance));
        }
        if !self.drift_per_step.is_finite() || !(0.0..1.0).contains(&self.speed_noise) {
            return bad("drift must be finite and speed noise in [0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub vehicle_id: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub speed: f64,
    pub heading: f64,
}

/// `t` is always `n * dt`; it is never accumulated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LockstepClock {
    pub n: u64,
    pub dt: f64,
}

impl LockstepClock {
    pub fn new(dt: f64) -> Self {
        Self { n: 0, dt }
    }

    pub fn t(&self) -> f64 {
        self.n as f64 * self.dt
    }

    pub fn advance(&mut self) {
        self.n += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyncAction {
    None,
    Resync,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncEvent {
    pub step: u64,
    pub vehicle_id: String,
    pub sync_error: f64,
    pub action: SyncAction,
}

/// Horizontal distance between two states of the same vehicle; z is ignored.
pub fn sync_error(a: &VehicleState, b: &VehicleState) -> Result<f64, CosimError> {
    if a.vehicle_id != b.vehicle_id {
        return Err(CosimError::IdMismatch(a.vehicle_id.clone(), b.vehicle_id.clone()));
    }
    Ok((a.x - b.x).hypot(a.y - b.y))
}

pub(crate) fn normalize_heading(h: f64) -> f64 {
    let h = h.rem_euclid(TAU);
    if h >= TAU {
        0.0
    } else {
        h
    }
}

/// Closest point on the network to a query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub segment: usize,
    /// Index of the profile interval holding the foot point.
    pub piece: usize,
    pub t: f64,
    pub distance: f64,
    pub z: f64,
}

fn project_piece(net: &RoadNetwork3D, segment: usize, piece: usize, x: f64, y: f64) -> Projection {
    let pts = &net.segments[segment].points;
    let (a, b) = (pts[piece], pts[piece + 1]);
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((x - a.x) * dx + (y - a.y) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (fx, fy) = (a.x + t * dx, a.y + t * dy);
    let z = if t == 0.0 {
        a.z
    } else if t == 1.0 {
        b.z
    } else {
        a.z + t * (b.z - a.z)
    };
    Projection { segment, piece, t, distance: (x - fx).hypot(y - fy), z }
}

fn closer(p: &Projection, best: &Option<Projection>) -> bool {
    match best {
        None => true,
        Some(b) => (p.distance, p.segment, p.piece) < (b.distance, b.segment, b.piece),
    }
}

/// Brute-force elevation lookup: the nearest profile interval within
/// `snap` meters, z interpolated linearly at the foot point. Ties go to the
/// lowest segment index, then the lowest interval.
pub fn vehicle_elevation(net: &RoadNetwork3D, x: f64, y: f64, snap: f64) -> Result<f64, CosimError> {
    let mut best: Option<Projection> = None;
    for (si, seg) in net.segments.iter().enumerate() {
        for k in 0..seg.points.len().saturating_sub(1) {
            let p = project_piece(net, si, k, x, y);
            if closer(&p, &best) {
                best = Some(p);
            }
        }
    }
    match best {
        Some(p) if p.distance <= snap => Ok(p.z),
        _ => Err(CosimError::OffNetwork { x, y, snap }),
    }
}

/// Bucketed index over profile intervals giving the same answers as
/// [`vehicle_elevation`].
pub struct RoadSurface<'a> {
    net: &'a RoadNetwork3D,
    snap: f64,
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<(usize, usize)>>,
}

impl<'a> RoadSurface<'a> {
    pub fn new(net: &'a RoadNetwork3D, snap: f64) -> Self {
        let cell = snap.max(10.0);
        let mut buckets: HashMap<(i64, i64), Vec<(usize, usize)>> = HashMap::new();
        for (si, seg) in net.segments.iter().enumerate() {
            for (k, w) in seg.points.windows(2).enumerate() {
                let (x0, x1) = (w[0].x.min(w[1].x), w[0].x.max(w[1].x));
                let (y0, y1) = (w[0].y.min(w[1].y), w[0].y.max(w[1].y));
                let c0 = ((x0 - snap) / cell).floor() as i64;
                let c1 = ((x1 + snap) / cell).floor() as i64;
                let r0 = ((y0 - snap) / cell).floor() as i64;
                let r1 = ((y1 + snap) / cell).floor() as i64;
                for c in c0..=c1 {
                    for r in r0..=r1 {
                        buckets.entry((c, r)).or_default().push((si, k));
                    }
                }
            }
        }
        Self { net, snap, cell, buckets }
    }

    pub fn snap_distance(&self) -> f64 {
        self.snap
    }

    pub fn project(&self, x: f64, y: f64) -> Result<Projection, CosimError> {
        let key = ((x / self.cell).floor() as i64, (y / self.cell).floor() as i64);
        let mut best: Option<Projection> = None;
        if let Some(pieces) = self.buckets.get(&key) {
            for &(si, k) in pieces {
                let p = project_piece(self.net, si, k, x, y);
                if closer(&p, &best) {
                    best = Some(p);
                }
            }
        }
        match best {
            Some(p) if p.distance <= self.snap => Ok(p),
            _ => Err(CosimError::OffNetwork { x, y, snap: self.snap }),
        }
    }

    pub fn elevation(&self, x: f64, y: f64) -> Result<f64, CosimError> {
        self.project(x, y).map(|p| p.z)
    }
}
