//! OpenDRIVE 1.4 writer and a checker for the subset it emits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use quick_xml::escape::escape;
use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;

use super::{fixed, ExportError};
use crate::builder::{RoadNetwork3D, RoadSegment3D};
use crate::road::NodeId;

pub const LANE_WIDTH: f64 = 3.5;
/// Stations, lengths, headings and grades. Nine digits keep the summed road
/// length within a micrometer of the network length.
const FINE_DIGITS: usize = 9;
const METER_DIGITS: usize = 3;
/// Consecutive profile intervals whose grades differ by less than this share
/// one elevation record.
const GRADE_MERGE: f64 = 1e-9;
const GEOMETRY_TOLERANCE: f64 = 1e-6;

enum Link {
    Junction(NodeId),
    Road { id: String, contact: &'static str },
    None,
}

fn link_at(net: &RoadNetwork3D, incidence: &BTreeMap<NodeId, Vec<(usize, bool)>>, seg: usize, start: bool) -> Link {
    let s = &net.segments[seg];
    let node = if start { s.from_node } else { s.to_node };
    let ends = &incidence[&node];
    if ends.len() < 2 {
        return Link::None;
    }
    let is_junction = net.node(node).is_some_and(|n| n.is_intersection) || ends.len() > 2;
    if is_junction {
        return Link::Junction(node);
    }
    let &(other, other_start) = ends.iter().find(|&&e| e != (seg, start)).expect("two ends");
    Link::Road {
        id: net.segments[other].id.0.clone(),
        contact: if other_start { "start" } else { "end" },
    }
}

fn write_link(out: &mut String, tag: &str, link: &Link) {
    match link {
        Link::Junction(n) => {
            let _ = writeln!(out, "      <{tag} elementType=\"junction\" elementId=\"{n}\"/>");
        }
        Link::Road { id, contact } => {
            let _ = writeln!(out, "      <{tag} elementType=\"road\" elementId=\"{}\" contactPoint=\"{contact}\"/>", escape(id.as_str()));
        }
        Link::None => {}
    }
}

fn write_plan_view(out: &mut String, seg: &RoadSegment3D) -> Result<(), ExportError> {
    out.push_str("    <planView>\n");
    let mut s = 0.0;
    for w in seg.polyline.windows(2) {
        let len = w[0].distance(&w[1]);
        if len < GEOMETRY_TOLERANCE {
            return Err(ExportError::Degenerate { segment: seg.id.0.clone(), reason: format!("polyline leg of {len:e} m") });
        }
        let hdg = (w[1].y - w[0].y).atan2(w[1].x - w[0].x);
        let _ = writeln!(
            out,
            "      <geometry s=\"{}\" x=\"{}\" y=\"{}\" hdg=\"{}\" length=\"{}\">\n        <line/>\n      </geometry>",
            fixed(s, FINE_DIGITS),
            fixed(w[0].x, METER_DIGITS),
            fixed(w[0].y, METER_DIGITS),
            fixed(hdg, FINE_DIGITS),
            fixed(len, FINE_DIGITS)
        );
        s += len;
    }
    out.push_str("    </planView>\n");
    Ok(())
}

fn write_elevation(out: &mut String, seg: &RoadSegment3D) {
    out.push_str("    <elevationProfile>\n");
    let p = &seg.profile;
    let mut last_b: Option<f64> = None;
    for (k, b) in p.gradients().enumerate() {
        if last_b.is_some_and(|lb| (lb - b).abs() < GRADE_MERGE) {
            continue;
        }
        last_b = Some(b);
        let _ = writeln!(
            out,
            "      <elevation s=\"{}\" a=\"{}\" b=\"{}\" c=\"0\" d=\"0\"/>",
            fixed(p.stations[k], FINE_DIGITS),
            fixed(p.z[k], METER_DIGITS),
            fixed(b, FINE_DIGITS)
        );
    }
    out.push_str("    </elevationProfile>\n");
}

fn write_lane(out: &mut String, id: i64) {
    let _ = writeln!(
        out,
        "          <lane id=\"{id}\" type=\"driving\" level=\"false\">\n            <width sOffset=\"0\" a=\"{}\" b=\"0\" c=\"0\" d=\"0\"/>\n          </lane>",
        fixed(LANE_WIDTH, METER_DIGITS)
    );
}

fn write_lanes(out: &mut String, seg: &RoadSegment3D) {
    let n = seg.lanes as i64;
    out.push_str("    <lanes>\n      <laneSection s=\"0\">\n");
    if !seg.oneway {
        out.push_str("        <left>\n");
        for id in (1..=n).rev() {
            write_lane(out, id);
        }
        out.push_str("        </left>\n");
    }
    out.push_str("        <center>\n          <lane id=\"0\" type=\"none\" level=\"false\"/>\n        </center>\n");
    out.push_str("        <right>\n");
    for id in 1..=n {
        write_lane(out, -id);
    }
    out.push_str("        </right>\n      </laneSection>\n    </lanes>\n");
}

fn bound(v: f64) -> String {
    fixed(if v.is_finite() { v } else { 0.0 }, METER_DIGITS)
}

/// One `<road>` per segment with straight-line plan view, piecewise-linear
/// elevation and a single lane section; one `<junction>` per intersection.
pub fn export_opendrive(net: &RoadNetwork3D) -> Result<String, ExportError> {
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<OpenDRIVE>\n");
    let _ = writeln!(
        out,
        "  <header revMajor=\"1\" revMinor=\"4\" name=\"elevroad\" version=\"1.00\" north=\"{}\" south=\"{}\" east=\"{}\" west=\"{}\">",
        bound(net.bbox.max_y),
        bound(net.bbox.min_y),
        bound(net.bbox.max_x),
        bound(net.bbox.min_x)
    );
    let _ = writeln!(out, "    <geoReference><![CDATA[{}]]></geoReference>\n  </header>", net.frame.proj_string());

    let incidence = net.incidence();
    for (i, seg) in net.segments.iter().enumerate() {
        let id = escape(seg.id.0.as_str());
        let _ = writeln!(
            out,
            "  <road name=\"{id}\" length=\"{}\" id=\"{id}\" junction=\"-1\">",
            fixed(seg.length(), FINE_DIGITS)
        );
        out.push_str("    <link>\n");
        write_link(&mut out, "predecessor", &link_at(net, &incidence, i, true));
        write_link(&mut out, "successor", &link_at(net, &incidence, i, false));
        out.push_str("    </link>\n");
        let _ = writeln!(out, "    <type s=\"0\" type=\"{}\"/>", if seg.class == crate::road::RoadClass::Highway { "motorway" } else { "town" });
        write_plan_view(&mut out, seg)?;
        write_elevation(&mut out, seg);
        write_lanes(&mut out, seg);
        out.push_str("  </road>\n");
    }

    for (node, ends) in &incidence {
        let junction = ends.len() > 2 || (ends.len() == 2 && net.node(*node).is_some_and(|n| n.is_intersection));
        if !junction {
            continue;
        }
        let _ = writeln!(out, "  <junction name=\"node {node}\" id=\"{node}\">");
        let mut cid = 0;
        for (a, &(inc, _)) in ends.iter().enumerate() {
            for (b, &(con, con_start)) in ends.iter().enumerate() {
                if a == b {
                    continue;
                }
                let _ = writeln!(
                    out,
                    "    <connection id=\"{cid}\" incomingRoad=\"{}\" connectingRoad=\"{}\" contactPoint=\"{}\"/>",
                    escape(net.segments[inc].id.0.as_str()),
                    escape(net.segments[con].id.0.as_str()),
                    if con_start { "start" } else { "end" }
                );
                cid += 1;
            }
        }
        out.push_str("  </junction>\n");
    }
    out.push_str("</OpenDRIVE>\n");
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenDriveSummary {
    pub roads: usize,
    pub junctions: usize,
    pub total_length: f64,
    pub elevation_records: usize,
}

#[derive(Debug, Default)]
struct Element {
    name: String,
    attrs: Vec<(String, String)>,
    children: Vec<Element>,
}

impl Element {
    fn attr(&self, key: &str) -> Option<&str> {
        self.attrs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn children_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Element> + 'a {
        self.children.iter().filter(move |c| c.name == name)
    }

    fn child(&self, name: &str) -> Option<&Element> {
        self.children.iter().find(|c| c.name == name)
    }
}

fn element(e: &BytesStart<'_>) -> Result<Element, String> {
    let mut attrs = Vec::new();
    for a in e.attributes() {
        let a = a.map_err(|err| err.to_string())?;
        let value = a.unescape_value().map_err(|err| err.to_string())?;
        attrs.push((String::from_utf8_lossy(a.key.as_ref()).into_owned(), value.into_owned()));
    }
    Ok(Element { name: String::from_utf8_lossy(e.name().as_ref()).into_owned(), attrs, children: Vec::new() })
}

fn parse_tree(xml: &str) -> Result<Element, String> {
    let mut reader = Reader::from_str(xml);
    reader.config_mut().trim_text(true);
    let mut stack: Vec<Element> = vec![Element::default()];
    loop {
        match reader.read_event().map_err(|e| format!("XML error at byte {}: {e}", reader.buffer_position()))? {
            Event::Start(e) => stack.push(element(&e)?),
            Event::Empty(e) => {
                let el = element(&e)?;
                stack.last_mut().expect("root").children.push(el);
            }
            Event::End(_) => {
                let el = stack.pop().expect("balanced");
                stack.last_mut().ok_or("unbalanced end tag")?.children.push(el);
            }
            Event::Eof => break,
            _ => {}
        }
    }
    if stack.len() != 1 {
        return Err("unclosed elements".into());
    }
    let mut doc = stack.pop().expect("root");
    if doc.children.len() != 1 {
        return Err(format!("expected one root element, found {}", doc.children.len()));
    }
    Ok(doc.children.remove(0))
}

fn num(el: &Element, key: &str, ctx: &str, errors: &mut Vec<String>) -> Option<f64> {
    match el.attr(key).map(str::parse::<f64>) {
        Some(Ok(v)) if v.is_finite() => Some(v),
        Some(_) => {
            errors.push(format!("{ctx}: <{}> attribute `{key}` is not a finite number", el.name));
            None
        }
        None => {
            errors.push(format!("{ctx}: <{}> missing attribute `{key}`", el.name));
            None
        }
    }
}

fn check_road(road: &Element, errors: &mut Vec<String>) -> (f64, usize) {
    let id = road.attr("id").unwrap_or("?");
    let ctx = format!("road {id}");
    for key in ["id", "junction"] {
        if road.attr(key).is_none() {
            errors.push(format!("{ctx}: missing attribute `{key}`"));
        }
    }
    let length = num(road, "length", &ctx, errors).unwrap_or(0.0);
    if !(length > 0.0) {
        errors.push(format!("{ctx}: length must be positive"));
    }

    match road.child("planView") {
        None => errors.push(format!("{ctx}: missing <planView>")),
        Some(pv) => {
            let mut expected_s = 0.0;
            let mut count = 0;
            for g in pv.children_named("geometry") {
                count += 1;
                let s = num(g, "s", &ctx, errors);
                let len = num(g, "length", &ctx, errors);
                for key in ["x", "y", "hdg"] {
                    num(g, key, &ctx, errors);
                }
                if let (Some(s), Some(len)) = (s, len) {
                    if (s - expected_s).abs() > GEOMETRY_TOLERANCE {
                        errors.push(format!("{ctx}: geometry starts at s={s}, expected {expected_s}"));
                    }
                    if !(len > 0.0) {
                        errors.push(format!("{ctx}: zero-length geometry at s={s}"));
                    }
                    expected_s = s + len;
                }
                let shapes = g
                    .children
                    .iter()
                    .filter(|c| matches!(c.name.as_str(), "line" | "arc" | "spiral" | "poly3" | "paramPoly3"))
                    .count();
                if shapes != 1 || g.children.len() != 1 {
                    errors.push(format!("{ctx}: geometry must hold exactly one primitive"));
                }
            }
            if count == 0 {
                errors.push(format!("{ctx}: empty <planView>"));
            } else if (expected_s - length).abs() > GEOMETRY_TOLERANCE {
                errors.push(format!("{ctx}: geometry covers {expected_s} m of a {length} m road"));
            }
        }
    }

    let mut records = 0;
    if let Some(ep) = road.child("elevationProfile") {
        let mut prev = f64::NEG_INFINITY;
        for e in ep.children_named("elevation") {
            records += 1;
            for key in ["a", "b", "c", "d"] {
                num(e, key, &ctx, errors);
            }
            if let Some(s) = num(e, "s", &ctx, errors) {
                if s < prev || s > length + GEOMETRY_TOLERANCE {
                    errors.push(format!("{ctx}: elevation s={s} out of order or beyond road end"));
                }
                prev = s;
            }
        }
        if records == 0 {
            errors.push(format!("{ctx}: empty <elevationProfile>"));
        }
    }

    match road.child("lanes") {
        None => errors.push(format!("{ctx}: missing <lanes>")),
        Some(lanes) => {
            let sections: Vec<_> = lanes.children_named("laneSection").collect();
            if sections.is_empty() {
                errors.push(format!("{ctx}: no <laneSection>"));
            }
            for sec in sections {
                num(sec, "s", &ctx, errors);
                let center_ok = sec
                    .child("center")
                    .map(|c| c.children_named("lane").map(|l| l.attr("id")).collect::<Vec<_>>() == vec![Some("0")])
                    .unwrap_or(false);
                if !center_ok {
                    errors.push(format!("{ctx}: <center> must hold exactly lane 0"));
                }
                let mut driving = 0;
                for (side, sign) in [("left", 1i64), ("right", -1i64)] {
                    for lane in sec.child(side).into_iter().flat_map(|s| s.children_named("lane")) {
                        driving += 1;
                        match lane.attr("id").and_then(|v| v.parse::<i64>().ok()) {
                            Some(v) if v.signum() == sign => {}
                            _ => errors.push(format!("{ctx}: bad lane id on the {side} side")),
                        }
                        if lane.attr("type").is_none() {
                            errors.push(format!("{ctx}: lane without type"));
                        }
                        for w in lane.children_named("width") {
                            for key in ["sOffset", "a", "b", "c", "d"] {
                                num(w, key, &ctx, errors);
                            }
                        }
                    }
                }
                if driving == 0 {
                    errors.push(format!("{ctx}: lane section without lanes"));
                }
            }
        }
    }
    (length, records)
}

/// Structural check of a document against the element subset this crate
/// writes: header, road, planView, elevationProfile, lanes and junction.
pub fn check_opendrive(xml: &str) -> Result<OpenDriveSummary, Vec<String>> {
    let root = parse_tree(xml).map_err(|e| vec![e])?;
    let mut errors = Vec::new();
    if root.name != "OpenDRIVE" {
        return Err(vec![format!("root element is <{}>, expected <OpenDRIVE>", root.name)]);
    }
    match root.children.first() {
        Some(h) if h.name == "header" => {
            if h.attr("revMajor") != Some("1") || h.attr("revMinor") != Some("4") {
                errors.push("header must declare revision 1.4".into());
            }
            for key in ["north", "south", "east", "west"] {
                num(h, key, "header", &mut errors);
            }
        }
        _ => errors.push("first child must be <header>".into()),
    }
    for c in &root.children {
        if !matches!(c.name.as_str(), "header" | "road" | "junction" | "controller") {
            errors.push(format!("unexpected top-level element <{}>", c.name));
        }
    }

    let mut road_ids = BTreeSet::new();
    let mut total_length = 0.0;
    let mut elevation_records = 0;
    let mut roads = 0;
    for road in root.children_named("road") {
        roads += 1;
        if let Some(id) = road.attr("id") {
            if !road_ids.insert(id) {
                errors.push(format!("duplicate road id {id}"));
            }
        }
        let (len, recs) = check_road(road, &mut errors);
        total_length += len;
        elevation_records += recs;
    }

    let mut junction_ids = BTreeSet::new();
    let mut junctions = 0;
    for j in root.children_named("junction") {
        junctions += 1;
        let id = j.attr("id").unwrap_or("?");
        if !junction_ids.insert(id) {
            errors.push(format!("duplicate junction id {id}"));
        }
        for c in j.children_named("connection") {
            for key in ["incomingRoad", "connectingRoad"] {
                match c.attr(key) {
                    Some(r) if road_ids.contains(r) => {}
                    Some(r) => errors.push(format!("junction {id}: {key} {r} is not a road")),
                    None => errors.push(format!("junction {id}: connection missing {key}")),
                }
            }
            if !matches!(c.attr("contactPoint"), Some("start" | "end")) {
                errors.push(format!("junction {id}: bad contactPoint"));
            }
        }
    }
    for road in root.children_named("road") {
        let links = road.child("link").into_iter().flat_map(|l| l.children.iter());
        for l in links {
            let target = l.attr("elementId").unwrap_or("");
            let ok = match l.attr("elementType") {
                Some("junction") => junction_ids.contains(target),
                Some("road") => road_ids.contains(target),
                _ => false,
            };
            if !ok {
                errors.push(format!("road {}: {} points at missing element {target}", road.attr("id").unwrap_or("?"), l.name));
            }
        }
    }

    if errors.is_empty() {
        Ok(OpenDriveSummary { roads, junctions, total_length, elevation_records })
    } else {
        Err(errors)
    }
}
