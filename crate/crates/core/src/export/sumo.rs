//! Plain SUMO network XML with 3D node positions and edge shapes.

use std::fmt::Write as _;

use quick_xml::escape::escape;
use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;

use super::{fixed, ExportError};
use crate::builder::RoadNetwork3D;
use crate::geo::Point3;

const METER_DIGITS: usize = 3;

fn shape<'a>(points: impl Iterator<Item = &'a Point3>) -> String {
    let mut s = String::new();
    for (i, p) in points.enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{},{},{}", fixed(p.x, METER_DIGITS), fixed(p.y, METER_DIGITS), fixed(p.z, METER_DIGITS));
    }
    s
}

/// Two-way segments become an edge pair; the reverse edge is `-<id>`.
pub fn export_sumo_net(net: &RoadNetwork3D) -> Result<String, ExportError> {
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<net version=\"1.9\">\n");
    let b = net.bbox;
    let bounds = if b.min_x.is_finite() {
        format!("{},{},{},{}", fixed(b.min_x, 2), fixed(b.min_y, 2), fixed(b.max_x, 2), fixed(b.max_y, 2))
    } else {
        "0.00,0.00,0.00,0.00".into()
    };
    let _ = writeln!(
        out,
        "  <location netOffset=\"0.00,0.00\" convBoundary=\"{bounds}\" projParameter=\"{}\"/>",
        net.frame.proj_string()
    );
    for n in &net.nodes {
        let _ = writeln!(
            out,
            "  <node id=\"{}\" x=\"{}\" y=\"{}\" z=\"{}\" type=\"{}\"/>",
            n.id,
            fixed(n.pos.x, METER_DIGITS),
            fixed(n.pos.y, METER_DIGITS),
            fixed(n.pos.z, METER_DIGITS),
            if n.is_signal { "traffic_light" } else { "priority" }
        );
    }
    for seg in &net.segments {
        if seg.points.len() < 2 {
            return Err(ExportError::Degenerate { segment: seg.id.0.clone(), reason: "fewer than 2 shape points".into() });
        }
        let id = escape(seg.id.0.as_str());
        let speed = format!("{:.2}", seg.class.speed());
        let _ = writeln!(
            out,
            "  <edge id=\"{id}\" from=\"{}\" to=\"{}\" type=\"{}\" numLanes=\"{}\" speed=\"{speed}\" shape=\"{}\"/>",
            seg.from_node,
            seg.to_node,
            seg.class.as_str(),
            seg.lanes,
            shape(seg.points.iter())
        );
        if !seg.oneway {
            let _ = writeln!(
                out,
                "  <edge id=\"-{id}\" from=\"{}\" to=\"{}\" type=\"{}\" numLanes=\"{}\" speed=\"{speed}\" shape=\"{}\"/>",
                seg.to_node,
                seg.from_node,
                seg.class.as_str(),
                seg.lanes,
                shape(seg.points.iter().rev())
            );
        }
    }
    out.push_str("</net>\n");
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SumoNode {
    pub id: String,
    pub pos: Point3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SumoEdge {
    pub id: String,
    pub from: String,
    pub to: String,
    pub num_lanes: u32,
    pub speed: f64,
    pub shape: Vec<Point3>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SumoNet {
    pub proj: Option<String>,
    pub nodes: Vec<SumoNode>,
    pub edges: Vec<SumoEdge>,
}

fn attrs(e: &BytesStart<'_>) -> Result<Vec<(String, String)>, String> {
    e.attributes()
        .map(|a| {
            let a = a.map_err(|err| err.to_string())?;
            let v = a.unescape_value().map_err(|err| err.to_string())?.into_owned();
            Ok((String::from_utf8_lossy(a.key.as_ref()).into_owned(), v))
        })
        .collect()
}

fn get<'a>(attrs: &'a [(String, String)], tag: &str, key: &str) -> Result<&'a str, String> {
    attrs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| format!("<{tag}> missing `{key}`"))
}

fn float(s: &str) -> Result<f64, String> {
    s.trim().parse().map_err(|_| format!("`{s}` is not a number"))
}

fn parse_shape(s: &str) -> Result<Vec<Point3>, String> {
    s.split_whitespace()
        .map(|tok| {
            let c: Vec<&str> = tok.split(',').collect();
            match c.as_slice() {
                [x, y] => Ok(Point3::new(float(x)?, float(y)?, 0.0)),
                [x, y, z] => Ok(Point3::new(float(x)?, float(y)?, float(z)?)),
                _ => Err(format!("bad shape point `{tok}`")),
            }
        })
        .collect()
}

/// Reads back the subset written by [`export_sumo_net`].
pub fn read_sumo_net(xml: &str) -> Result<SumoNet, String> {
    let mut reader = Reader::from_str(xml);
    reader.config_mut().trim_text(true);
    let mut net = SumoNet::default();
    loop {
        match reader.read_event().map_err(|e| format!("XML error at byte {}: {e}", reader.buffer_position()))? {
            Event::Start(e) | Event::Empty(e) => {
                let a = attrs(&e)?;
                match e.name().as_ref() {
                    b"location" => net.proj = get(&a, "location", "projParameter").ok().map(str::to_string),
                    b"node" => net.nodes.push(SumoNode {
                        id: get(&a, "node", "id")?.to_string(),
                        pos: Point3::new(
                            float(get(&a, "node", "x")?)?,
                            float(get(&a, "node", "y")?)?,
                            get(&a, "node", "z").map(float).unwrap_or(Ok(0.0))?,
                        ),
                    }),
                    b"edge" => net.edges.push(SumoEdge {
                        id: get(&a, "edge", "id")?.to_string(),
                        from: get(&a, "edge", "from")?.to_string(),
                        to: get(&a, "edge", "to")?.to_string(),
                        num_lanes: get(&a, "edge", "numLanes")?.parse().map_err(|_| "bad numLanes".to_string())?,
                        speed: float(get(&a, "edge", "speed")?)?,
                        shape: parse_shape(get(&a, "edge", "shape")?)?,
                    }),
                    _ => {}
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }
    Ok(net)
}
