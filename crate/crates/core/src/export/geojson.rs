//! RFC 7946 FeatureCollection with WGS84 coordinates and z in meters.

use std::fmt::Write as _;

use super::{fixed, ExportError};
use crate::builder::RoadNetwork3D;
use crate::geo::Point3;

/// Nine decimals keep the write/read round trip well inside 1e-9 degrees.
const DEGREE_DIGITS: usize = 9;
const METER_DIGITS: usize = 3;

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialise")
}

fn position(net: &RoadNetwork3D, p: &Point3, out: &mut String) -> Result<(), ExportError> {
    let g = net.frame.local_to_geo(p.x, p.y)?;
    let _ = write!(
        out,
        "[{},{},{}]",
        fixed(g.lon, DEGREE_DIGITS),
        fixed(g.lat, DEGREE_DIGITS),
        fixed(p.z, METER_DIGITS)
    );
    Ok(())
}

/// Segment LineStrings (every profile sample) first, then node Points.
pub fn export_geojson(net: &RoadNetwork3D) -> Result<String, ExportError> {
    let mut out = String::from("{\"type\":\"FeatureCollection\",\"features\":[");
    let mut first = true;
    let mut sep = |out: &mut String| {
        out.push_str(if first { "\n" } else { ",\n" });
        first = false;
    };
    for seg in &net.segments {
        sep(&mut out);
        let _ = write!(
            out,
            "{{\"type\":\"Feature\",\"properties\":{{\"kind\":\"segment\",\"id\":{},\"from\":{},\"to\":{},\"class\":\"{}\",\"lanes\":{},\"oneway\":{},\"flagged\":{}}},\"geometry\":{{\"type\":\"LineString\",\"coordinates\":[",
            json_str(&seg.id.0),
            seg.from_node.0,
            seg.to_node.0,
            seg.class.as_str(),
            seg.lanes,
            seg.oneway,
            seg.is_flagged()
        );
        for (i, p) in seg.points.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            position(net, p, &mut out)?;
        }
        out.push_str("]}}");
    }
    for node in &net.nodes {
        sep(&mut out);
        let _ = write!(
            out,
            "{{\"type\":\"Feature\",\"properties\":{{\"kind\":\"node\",\"id\":{},\"is_intersection\":{},\"is_signal\":{}}},\"geometry\":{{\"type\":\"Point\",\"coordinates\":",
            node.id.0, node.is_intersection, node.is_signal
        );
        position(net, &node.pos, &mut out)?;
        out.push_str("}}");
    }
    out.push_str("\n]}\n");
    Ok(out)
}
