//! Vehicle routes over network segments.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{normalize_heading, CosimError};
use crate::builder::RoadNetwork3D;
use crate::geo::Point2;
use crate::road::{NodeId, SegmentId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub vehicle_id: String,
    #[serde(alias = "segment_ids")]
    pub segments: Vec<SegmentId>,
    /// m/s
    pub speed: f64,
}

pub fn parse_routes(json: &str) -> Result<Vec<Route>, CosimError> {
    let routes: Vec<Route> = serde_json::from_str(json).map_err(|e| CosimError::InvalidRoute(e.to_string()))?;
    let mut seen = BTreeSet::new();
    for r in &routes {
        if !seen.insert(r.vehicle_id.as_str()) {
            return Err(CosimError::InvalidRoute(format!("duplicate vehicle id {}", r.vehicle_id)));
        }
    }
    Ok(routes)
}

/// A route flattened into one polyline with arc-length stations.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutePath {
    pub vehicle_id: String,
    pub speed: f64,
    pub points: Vec<Point2>,
    pub stations: Vec<f64>,
}

impl RoutePath {
    pub fn build(net: &RoadNetwork3D, route: &Route) -> Result<Self, CosimError> {
        let invalid = |m: String| CosimError::InvalidRoute(format!("vehicle {}: {m}", route.vehicle_id));
        if route.segments.is_empty() {
            return Err(invalid("no segments".into()));
        }
        if !(route.speed >= 0.0 && route.speed.is_finite()) {
            return Err(invalid(format!("speed {} must be finite and non-negative", route.speed)));
        }
        let lookup = |id: &SegmentId| {
            net.segments.iter().find(|s| &s.id == id).ok_or_else(|| invalid(format!("unknown segment {id}")))
        };
        let segs = route.segments.iter().map(lookup).collect::<Result<Vec<_>, _>>()?;

        // orientation of the first segment follows its connection to the second
        let first = segs[0];
        let mut forward = true;
        if let Some(next) = segs.get(1) {
            let joins = |n: NodeId| n == next.from_node || n == next.to_node;
            forward = if joins(first.to_node) {
                true
            } else if joins(first.from_node) {
                false
            } else {
                return Err(invalid(format!("{} and {} do not connect", first.id, next.id)));
            };
        }

        let mut points: Vec<Point2> = Vec::new();
        let mut at: NodeId = if forward { first.from_node } else { first.to_node };
        for (i, seg) in segs.iter().enumerate() {
            let fwd = if i == 0 {
                forward
            } else if seg.from_node == at {
                true
            } else if seg.to_node == at {
                false
            } else {
                return Err(invalid(format!("{} does not continue from node {at}", seg.id)));
            };
            if !fwd && seg.oneway {
                return Err(invalid(format!("{} is one-way", seg.id)));
            }
            at = if fwd { seg.to_node } else { seg.from_node };
            let pts: Box<dyn Iterator<Item = Point2>> = if fwd {
                Box::new(seg.points.iter().map(|p| p.xy()))
            } else {
                Box::new(seg.points.iter().rev().map(|p| p.xy()))
            };
            for p in pts {
                if points.last().is_none_or(|q| q.distance(&p) > 1e-9) {
                    points.push(p);
                }
            }
        }
        if points.len() < 2 {
            return Err(invalid("route has no length".into()));
        }
        let mut stations = Vec::with_capacity(points.len());
        let mut s = 0.0;
        for (i, p) in points.iter().enumerate() {
            if i > 0 {
                s += points[i - 1].distance(p);
            }
            stations.push(s);
        }
        Ok(Self { vehicle_id: route.vehicle_id.clone(), speed: route.speed, points, stations })
    }

    pub fn length(&self) -> f64 {
        *self.stations.last().expect("at least two points")
    }

    fn leg(&self, s: f64) -> usize {
        self.stations.partition_point(|&st| st <= s).saturating_sub(1).min(self.points.len() - 2)
    }

    /// Position and heading at station `s`, clamped to the route.
    pub fn position(&self, s: f64) -> (Point2, f64) {
        let s = s.clamp(0.0, self.length());
        let i = self.leg(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        let t = (s - self.stations[i]) / (self.stations[i + 1] - self.stations[i]);
        let heading = normalize_heading((b.y - a.y).atan2(b.x - a.x));
        (a.lerp(&b, t), heading)
    }

    /// Station of the point on the route closest to `(x, y)`.
    pub fn project(&self, x: f64, y: f64) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for (i, w) in self.points.windows(2).enumerate() {
            let (dx, dy) = (w[1].x - w[0].x, w[1].y - w[0].y);
            let t = (((x - w[0].x) * dx + (y - w[0].y) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
            let d = (x - (w[0].x + t * dx)).hypot(y - (w[0].y + t * dy));
            if d < best.0 {
                best = (d, self.stations[i] + t * (self.stations[i + 1] - self.stations[i]));
            }
        }
        best.1
    }
}

const SYNTHETIC_MAX_SEGMENTS: usize = 8;

/// Deterministic routes for `count` vehicles: each starts on a different
/// segment and keeps going as straight as the network allows.
pub fn synthetic_routes(net: &RoadNetwork3D, count: usize) -> Vec<Route> {
    let n = net.segments.len();
    if n == 0 {
        return Vec::new();
    }
    let incidence = net.incidence();
    let dir_at = |seg: usize, start: bool| {
        let p = &net.segments[seg].points;
        let (a, b) = if start { (p[0], p[1]) } else { (p[p.len() - 1], p[p.len() - 2]) };
        (b.y - a.y).atan2(b.x - a.x)
    };
    (0..count)
        .map(|i| {
            let first = (i * 37) % n;
            let mut used = vec![first];
            let mut at = net.segments[first].to_node;
            // heading of travel when arriving at `at`
            let mut heading = dir_at(first, false) + std::f64::consts::PI;
            while used.len() < SYNTHETIC_MAX_SEGMENTS {
                let next = incidence[&at]
                    .iter()
                    .filter(|&&(s, start)| !used.contains(&s) && (start || !net.segments[s].oneway))
                    .map(|&(s, start)| {
                        let turn = (dir_at(s, start) - heading).sin().atan2((dir_at(s, start) - heading).cos()).abs();
                        (turn, s, start)
                    })
                    .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let Some((_, s, start)) = next else { break };
                used.push(s);
                at = if start { net.segments[s].to_node } else { net.segments[s].from_node };
                heading = dir_at(s, !start) + std::f64::consts::PI;
            }
            Route {
                vehicle_id: format!("veh{i}"),
                segments: used.iter().map(|&s| net.segments[s].id.clone()).collect(),
                speed: net.segments[first].class.speed(),
            }
        })
        .collect()
}
