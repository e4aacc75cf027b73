//! Typed 2D road network and OSM XML ingest.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{BBox, Extent, GeoError, GeoPoint, LocalFrame, Point2};

/// Polyline points closer than this are merged.
const DUPLICATE_POINT_DISTANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RoadError {
    #[error("malformed OSM XML: {0}")]
    Xml(String),
    #[error("way {way} references missing node {node}")]
    MissingNode { way: i64, node: i64 },
    #[error("no drivable ways inside the bounding box")]
    Empty,
    #[error("invalid attribute `{attr}` on element `{element}`: {value}")]
    BadAttribute { element: String, attr: String, value: String },
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("segment {segment}: {reason}")]
    InvalidSegment { segment: String, reason: String },
    #[error("segment {segment} references unknown node {node}")]
    DanglingSegment { segment: String, node: NodeId },
    #[error("duplicate id {0}")]
    Duplicate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub i64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SegmentId(pub String);

impl fmt::Display for SegmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SegmentId {
    fn from(s: &str) -> Self {
        SegmentId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoadClass {
    Highway,
    Arterial,
    Residential,
}

impl RoadClass {
    /// Design grade limit for the class.
    pub fn max_gradient(&self) -> f64 {
        GradientLimits::default().limit(*self)
    }

    /// Lanes per direction when OSM carries no `lanes` tag.
    pub fn default_lanes(&self) -> u32 {
        match self {
            RoadClass::Highway | RoadClass::Arterial => 2,
            RoadClass::Residential => 1,
        }
    }

    /// Nominal speed in m/s used by traffic exports.
    pub fn speed(&self) -> f64 {
        match self {
            RoadClass::Highway => 27.8,
            RoadClass::Arterial => 13.9,
            RoadClass::Residential => 8.3,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RoadClass::Highway => "highway",
            RoadClass::Arterial => "arterial",
            RoadClass::Residential => "residential",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientLimits {
    pub highway: f64,
    pub arterial: f64,
    pub residential: f64,
}

impl Default for GradientLimits {
    fn default() -> Self {
        Self { highway: 0.08, arterial: 0.12, residential: 0.15 }
    }
}

impl GradientLimits {
    pub fn limit(&self, class: RoadClass) -> f64 {
        match class {
            RoadClass::Highway => self.highway,
            RoadClass::Arterial => self.arterial,
            RoadClass::Residential => self.residential,
        }
    }
}

/// Result of mapping an OSM `highway` value onto a road class.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub class: RoadClass,
    pub warning: Option<String>,
}

const HIGHWAY_TAGS: &[&str] = &["motorway", "trunk", "motorway_link", "trunk_link"];
const ARTERIAL_TAGS: &[&str] =
    &["primary", "secondary", "tertiary", "primary_link", "secondary_link", "tertiary_link"];
const RESIDENTIAL_TAGS: &[&str] = &["residential", "unclassified", "living_street", "service"];
const NON_DRIVABLE_TAGS: &[&str] = &[
    "footway", "cycleway", "path", "pedestrian", "steps", "bridleway", "corridor", "platform",
    "track", "proposed", "construction", "abandoned", "elevator", "bus_stop", "crossing",
    "street_lamp", "traffic_signals", "via_ferrata", "raceway", "bus_guideway", "escape",
    "emergency_bay", "rest_area", "services",
];

pub fn classify(highway_tag: &str) -> Classification {
    let tag = highway_tag.trim();
    let class = if HIGHWAY_TAGS.contains(&tag) {
        RoadClass::Highway
    } else if ARTERIAL_TAGS.contains(&tag) {
        RoadClass::Arterial
    } else if RESIDENTIAL_TAGS.contains(&tag) {
        RoadClass::Residential
    } else {
        return Classification {
            class: RoadClass::Residential,
            warning: Some(format!("unknown highway tag `{tag}` treated as residential")),
        };
    };
    Classification { class, warning: None }
}

pub fn is_drivable(highway_tag: &str) -> bool {
    !highway_tag.trim().is_empty() && !NON_DRIVABLE_TAGS.contains(&highway_tag.trim())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadNode {
    pub id: NodeId,
    pub pos: Point2,
    pub is_intersection: bool,
    #[serde(default)]
    pub is_signal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment2D {
    pub id: SegmentId,
    pub from_node: NodeId,
    pub to_node: NodeId,
    pub polyline: Vec<Point2>,
    pub class: RoadClass,
    /// Lanes per direction.
    pub lanes: u32,
    pub oneway: bool,
}

impl RoadSegment2D {
    pub fn length(&self) -> f64 {
        polyline_length(&self.polyline)
    }
}

pub fn polyline_length(points: &[Point2]) -> f64 {
    points.windows(2).map(|w| w[0].distance(&w[1])).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadNetwork2D {
    pub nodes: Vec<RoadNode>,
    pub segments: Vec<RoadSegment2D>,
    pub frame: LocalFrame,
    pub bbox: Extent,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl RoadNetwork2D {
    /// Assembles a network, checking ids, referential integrity and polyline
    /// invariants. Nodes are stored sorted by id.
    pub fn new(
        frame: LocalFrame,
        bbox: Extent,
        mut nodes: Vec<RoadNode>,
        segments: Vec<RoadSegment2D>,
    ) -> Result<Self, RoadError> {
        nodes.sort_by_key(|n| n.id);
        for w in nodes.windows(2) {
            if w[0].id == w[1].id {
                return Err(RoadError::Duplicate(format!("node {}", w[0].id)));
            }
        }
        let mut seen = BTreeSet::new();
        for seg in &segments {
            if !seen.insert(&seg.id) {
                return Err(RoadError::Duplicate(format!("segment {}", seg.id)));
            }
            let invalid = |reason: &str| RoadError::InvalidSegment {
                segment: seg.id.to_string(),
                reason: reason.to_string(),
            };
            if seg.polyline.len() < 2 {
                return Err(invalid("polyline needs at least 2 points"));
            }
            if seg.lanes == 0 {
                return Err(invalid("lane count must be positive"));
            }
            if seg.polyline.windows(2).any(|w| w[0].distance(&w[1]) < DUPLICATE_POINT_DISTANCE) {
                return Err(invalid("consecutive polyline points coincide"));
            }
            for (node_id, end) in [(seg.from_node, seg.polyline[0]), (seg.to_node, *seg.polyline.last().unwrap())] {
                let node = nodes
                    .binary_search_by_key(&node_id, |n| n.id)
                    .map(|i| &nodes[i])
                    .map_err(|_| RoadError::DanglingSegment { segment: seg.id.to_string(), node: node_id })?;
                if node.pos.distance(&end) > 1e-9 {
                    return Err(invalid("polyline endpoint does not match node position"));
                }
            }
        }
        Ok(Self { nodes, segments, frame, bbox, warnings: Vec::new() })
    }

    pub fn node(&self, id: NodeId) -> Option<&RoadNode> {
        self.nodes.binary_search_by_key(&id, |n| n.id).ok().map(|i| &self.nodes[i])
    }

    /// Number of segment endpoints attached to each node (a self-loop counts twice).
    pub fn degrees(&self) -> BTreeMap<NodeId, usize> {
        let mut deg = BTreeMap::new();
        for seg in &self.segments {
            *deg.entry(seg.from_node).or_insert(0) += 1;
            *deg.entry(seg.to_node).or_insert(0) += 1;
        }
        deg
    }
}

#[derive(Debug, Default)]
struct OsmNode {
    lat: f64,
    lon: f64,
    junction: bool,
    signal: bool,
}

#[derive(Debug, Default)]
struct OsmWay {
    id: i64,
    refs: Vec<i64>,
    tags: HashMap<String, String>,
}

fn attr(e: &BytesStart<'_>, name: &str) -> Result<Option<String>, RoadError> {
    for a in e.attributes() {
        let a = a.map_err(|err| RoadError::Xml(err.to_string()))?;
        if a.key.as_ref() == name.as_bytes() {
            let v = a.unescape_value().map_err(|err| RoadError::Xml(err.to_string()))?;
            return Ok(Some(v.into_owned()));
        }
    }
    Ok(None)
}

fn required<T: std::str::FromStr>(e: &BytesStart<'_>, name: &str) -> Result<T, RoadError> {
    let element = String::from_utf8_lossy(e.name().as_ref()).into_owned();
    let raw = attr(e, name)?.ok_or_else(|| RoadError::BadAttribute {
        element: element.clone(),
        attr: name.into(),
        value: "<missing>".into(),
    })?;
    raw.parse().map_err(|_| RoadError::BadAttribute { element, attr: name.into(), value: raw })
}

#[derive(Debug)]
enum Open {
    None,
    Node(i64),
    Way(OsmWay),
}

fn read_osm(doc: &str) -> Result<(HashMap<i64, OsmNode>, Vec<OsmWay>), RoadError> {
    let mut reader = Reader::from_str(doc);
    let mut nodes = HashMap::new();
    let mut ways = Vec::new();
    let mut open = Open::None;
    let mut saw_root = false;
    loop {
        let event = reader.read_event().map_err(|e| RoadError::Xml(e.to_string()))?;
        match event {
            Event::Start(ref e) | Event::Empty(ref e) => {
                let is_empty = matches!(event, Event::Empty(_));
                match e.name().as_ref() {
                    b"osm" => saw_root = true,
                    b"node" => {
                        let id: i64 = required(e, "id")?;
                        let lat: f64 = required(e, "lat")?;
                        let lon: f64 = required(e, "lon")?;
                        nodes.insert(id, OsmNode { lat, lon, ..Default::default() });
                        if !is_empty {
                            open = Open::Node(id);
                        }
                    }
                    b"way" => {
                        let way = OsmWay { id: required(e, "id")?, ..Default::default() };
                        if is_empty {
                            ways.push(way);
                        } else {
                            open = Open::Way(way);
                        }
                    }
                    b"nd" => {
                        if let Open::Way(way) = &mut open {
                            way.refs.push(required(e, "ref")?);
                        }
                    }
                    b"tag" => {
                        let k: String = required(e, "k")?;
                        let v: String = required(e, "v")?;
                        match &mut open {
                            Open::Way(way) => {
                                way.tags.insert(k, v);
                            }
                            Open::Node(id) => {
                                let node = nodes.get_mut(id).expect("open node was inserted");
                                if k == "junction" || (k == "highway" && v == "motorway_junction") {
                                    node.junction = true;
                                }
                                if (k == "highway" && v == "traffic_signals") || k == "traffic_signals" {
                                    node.signal = true;
                                }
                            }
                            Open::None => {}
                        }
                    }
                    _ => {}
                }
            }
            Event::End(ref e) => match e.name().as_ref() {
                b"node" => open = Open::None,
                b"way" => {
                    if let Open::Way(way) = std::mem::replace(&mut open, Open::None) {
                        ways.push(way);
                    }
                }
                _ => {}
            },
            Event::Eof => break,
            _ => {}
        }
    }
    if !saw_root {
        return Err(RoadError::Xml("missing <osm> root element".into()));
    }
    Ok((nodes, ways))
}

fn parse_oneway(tags: &HashMap<String, String>, class_tag: &str) -> (bool, bool) {
    // (oneway, reversed)
    match tags.get("oneway").map(String::as_str) {
        Some("yes" | "true" | "1") => (true, false),
        Some("-1" | "reverse") => (true, true),
        Some("no" | "false" | "0") => (false, false),
        _ => {
            let implied = class_tag == "motorway"
                || tags.get("junction").is_some_and(|j| j == "roundabout");
            (implied, false)
        }
    }
}

fn lanes_per_direction(tags: &HashMap<String, String>, class: RoadClass, oneway: bool) -> u32 {
    match tags.get("lanes").and_then(|v| v.trim().parse::<u32>().ok()).filter(|&n| n > 0) {
        Some(total) if oneway => total,
        Some(total) => total.div_ceil(2),
        None => class.default_lanes(),
    }
}

/// Parses an OSM XML document and extracts the drivable network inside `bbox`.
///
/// Ways leaving the box are cut at their last in-box vertex, so one way may
/// yield several runs. Runs are split at every node shared with another run
/// (or repeated inside the same run) and at junction-tagged nodes.
pub fn parse_osm(doc: &str, bbox: &BBox) -> Result<RoadNetwork2D, RoadError> {
    let (osm_nodes, mut ways) = read_osm(doc)?;
    let (frame, extent) = LocalFrame::for_bbox(bbox)?;
    ways.sort_by_key(|w| w.id);

    struct Run {
        way: i64,
        index: usize,
        refs: Vec<i64>,
        class: RoadClass,
        lanes: u32,
        oneway: bool,
    }

    let mut warnings = Vec::new();
    let mut runs = Vec::new();
    for way in &ways {
        let Some(tag) = way.tags.get("highway") else { continue };
        if !is_drivable(tag) {
            continue;
        }
        let classification = classify(tag);
        if let Some(w) = classification.warning {
            warnings.push(format!("way {}: {w}", way.id));
        }
        let class = classification.class;
        for r in &way.refs {
            if !osm_nodes.contains_key(r) {
                return Err(RoadError::MissingNode { way: way.id, node: *r });
            }
        }
        let (oneway, reversed) = parse_oneway(&way.tags, tag);
        let lanes = lanes_per_direction(&way.tags, class, oneway);
        let mut refs = way.refs.clone();
        if reversed {
            refs.reverse();
        }
        refs.dedup();

        let mut current: Vec<i64> = Vec::new();
        let mut index = 0;
        let mut flush = |current: &mut Vec<i64>, runs: &mut Vec<Run>| {
            if current.len() >= 2 {
                runs.push(Run { way: way.id, index, refs: std::mem::take(current), class, lanes, oneway });
                index += 1;
            }
            current.clear();
        };
        for r in refs {
            let n = &osm_nodes[&r];
            let inside = GeoPoint::new(n.lat, n.lon).map(|p| bbox.contains(&p)).unwrap_or(false);
            if inside {
                current.push(r);
            } else {
                flush(&mut current, &mut runs);
            }
        }
        flush(&mut current, &mut runs);
    }

    // Node usage across runs decides where runs are split.
    let mut usage: HashMap<i64, usize> = HashMap::new();
    for run in &runs {
        for r in &run.refs {
            *usage.entry(*r).or_insert(0) += 1;
        }
    }

    let mut positions: BTreeMap<i64, Point2> = BTreeMap::new();
    let mut project = |id: i64| -> Result<Point2, RoadError> {
        if let Some(p) = positions.get(&id) {
            return Ok(*p);
        }
        let n = &osm_nodes[&id];
        let p = frame.geo_to_local(&GeoPoint::new(n.lat, n.lon)?)?;
        positions.insert(id, p);
        Ok(p)
    };

    let mut segments = Vec::new();
    let mut graph_nodes: BTreeSet<i64> = BTreeSet::new();
    for run in &runs {
        let last = run.refs.len() - 1;
        let mut start = 0;
        let mut part = 0;
        for i in 1..=last {
            let r = run.refs[i];
            let split = i == last || usage[&r] > 1 || osm_nodes[&r].junction;
            if !split {
                continue;
            }
            let piece = &run.refs[start..=i];
            start = i;
            let mut polyline: Vec<Point2> = Vec::with_capacity(piece.len());
            for &id in piece {
                let p = project(id)?;
                if polyline.last().is_some_and(|q: &Point2| q.distance(&p) < DUPLICATE_POINT_DISTANCE) {
                    continue;
                }
                polyline.push(p);
            }
            let (from, to) = (piece[0], piece[piece.len() - 1]);
            // Endpoints must stay the node positions even after merging duplicates.
            if polyline.len() >= 2 {
                let first = project(from)?;
                let end = project(to)?;
                polyline[0] = first;
                *polyline.last_mut().unwrap() = end;
            }
            let keep = if from == to { polyline.len() >= 3 } else { polyline.len() >= 2 };
            if !keep {
                continue;
            }
            let id = if run.index == 0 {
                format!("{}-{}", run.way, part)
            } else {
                format!("{}.{}-{}", run.way, run.index, part)
            };
            part += 1;
            graph_nodes.insert(from);
            graph_nodes.insert(to);
            segments.push(RoadSegment2D {
                id: SegmentId(id),
                from_node: NodeId(from),
                to_node: NodeId(to),
                polyline,
                class: run.class,
                lanes: run.lanes,
                oneway: run.oneway,
            });
        }
    }
    if segments.is_empty() {
        return Err(RoadError::Empty);
    }

    let mut degree: HashMap<i64, usize> = HashMap::new();
    for seg in &segments {
        *degree.entry(seg.from_node.0).or_insert(0) += 1;
        *degree.entry(seg.to_node.0).or_insert(0) += 1;
    }
    let nodes = graph_nodes
        .into_iter()
        .map(|id| {
            let osm = &osm_nodes[&id];
            Ok(RoadNode {
                id: NodeId(id),
                pos: project(id)?,
                is_intersection: degree[&id] >= 2 || osm.junction,
                is_signal: osm.signal,
            })
        })
        .collect::<Result<Vec<_>, RoadError>>()?;

    let mut net = RoadNetwork2D::new(frame, extent, nodes, segments)?;
    net.warnings = warnings;
    Ok(net)
}
