//! Synthetic OSM extracts and terrain grids for fixtures and benchmarks.
//!
//! Coordinates are metres relative to an anchor whose UTM position is snapped
//! to whole metres, so DEM nodes and road vertices can be placed on exact
//! grid positions.

use std::fmt::Write as _;

use crate::dem::{DemError, DemGrid};
use crate::geo::{wgs84_to_utm, BBox, GeoError, GeoPoint, Hemisphere, LocalFrame, TransverseMercator};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Site {
    pub zone: u8,
    pub hemisphere: Hemisphere,
    pub anchor_e: f64,
    pub anchor_n: f64,
}

impl Site {
    pub fn new(anchor: GeoPoint) -> Result<Self, GeoError> {
        let u = wgs84_to_utm(&anchor)?;
        Ok(Self { zone: u.zone, hemisphere: u.hemisphere, anchor_e: u.easting.floor(), anchor_n: u.northing.floor() })
    }

    /// A site in UTM zone 10N near San Francisco.
    pub fn san_francisco() -> Self {
        Self::new(GeoPoint { lat: 37.77, lon: -122.42 }).expect("valid anchor")
    }

    pub fn geo(&self, x: f64, y: f64) -> GeoPoint {
        let (lat, lon) = TransverseMercator::utm(self.zone, self.hemisphere).inverse(self.anchor_e + x, self.anchor_n + y);
        GeoPoint { lat: lat.to_degrees(), lon: lon.to_degrees() }
    }

    /// Geographic envelope of the anchor-relative rectangle.
    pub fn bbox(&self, min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> BBox {
        let corners = [self.geo(min_x, min_y), self.geo(max_x, min_y), self.geo(min_x, max_y), self.geo(max_x, max_y)];
        let lon = corners.iter().map(|p| p.lon);
        let lat = corners.iter().map(|p| p.lat);
        BBox {
            min_lon: lon.clone().fold(f64::INFINITY, f64::min),
            min_lat: lat.clone().fold(f64::INFINITY, f64::min),
            max_lon: lon.fold(f64::NEG_INFINITY, f64::max),
            max_lat: lat.fold(f64::NEG_INFINITY, f64::max),
        }
    }

    /// Grid with `cols` x `rows` nodes starting at anchor-relative `(min_x, min_y)`;
    /// `f` receives anchor-relative coordinates.
    pub fn dem(
        &self,
        min_x: f64,
        min_y: f64,
        spacing: f64,
        cols: usize,
        rows: usize,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<DemGrid, DemError> {
        let (ae, an) = (self.anchor_e, self.anchor_n);
        DemGrid::from_fn(ae + min_x, an + min_y, spacing, cols, rows, |e, n| f(e - ae, n - an))
    }

    /// Anchor-relative coordinates of a point in `frame`.
    pub fn from_frame(&self, frame: &LocalFrame, x: f64, y: f64) -> (f64, f64) {
        let (e, n) = frame.to_utm_xy(x, y);
        (e - self.anchor_e, n - self.anchor_n)
    }
}

type Tags = Vec<(String, String)>;

#[derive(Debug, Clone, Default)]
pub struct OsmBuilder {
    nodes: Vec<(i64, GeoPoint, Tags)>,
    ways: Vec<(i64, Vec<i64>, Tags)>,
}

fn tags(pairs: &[(&str, &str)]) -> Tags {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

impl OsmBuilder {
    pub fn node(&mut self, id: i64, p: GeoPoint, node_tags: &[(&str, &str)]) -> &mut Self {
        self.nodes.push((id, p, tags(node_tags)));
        self
    }

    pub fn way(&mut self, id: i64, refs: &[i64], way_tags: &[(&str, &str)]) -> &mut Self {
        self.ways.push((id, refs.to_vec(), tags(way_tags)));
        self
    }

    /// Coordinates use shortest round-trip formatting.
    pub fn to_xml(&self) -> String {
        let esc = |s: &str| quick_xml::escape::escape(s).into_owned();
        let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<osm version=\"0.6\" generator=\"elevroad-synth\">\n");
        for (id, p, t) in &self.nodes {
            if t.is_empty() {
                let _ = writeln!(out, "  <node id=\"{id}\" lat=\"{}\" lon=\"{}\"/>", p.lat, p.lon);
            } else {
                let _ = writeln!(out, "  <node id=\"{id}\" lat=\"{}\" lon=\"{}\">", p.lat, p.lon);
                for (k, v) in t {
                    let _ = writeln!(out, "    <tag k=\"{}\" v=\"{}\"/>", esc(k), esc(v));
                }
                out.push_str("  </node>\n");
            }
        }
        for (id, refs, t) in &self.ways {
            let _ = writeln!(out, "  <way id=\"{id}\">");
            for r in refs {
                let _ = writeln!(out, "    <nd ref=\"{r}\"/>");
            }
            for (k, v) in t {
                let _ = writeln!(out, "    <tag k=\"{}\" v=\"{}\"/>", esc(k), esc(v));
            }
            out.push_str("  </way>\n");
        }
        out.push_str("</osm>\n");
        out
    }
}

/// Square street grid of `n` x `n` intersections spaced `block` metres apart,
/// the south-west one at anchor-relative `(offset, offset)`. One way per row
/// and per column, tagged `highway=<tag>`.
pub fn manhattan_grid(site: &Site, n: usize, block: f64, offset: f64, tag: &str) -> OsmBuilder {
    let mut osm = OsmBuilder::default();
    let id = |r: usize, c: usize| (r * n + c + 1) as i64;
    for r in 0..n {
        for c in 0..n {
            osm.node(id(r, c), site.geo(offset + c as f64 * block, offset + r as f64 * block), &[]);
        }
    }
    for r in 0..n {
        let refs: Vec<i64> = (0..n).map(|c| id(r, c)).collect();
        osm.way(1000 + r as i64, &refs, &[("highway", tag), ("name", &format!("Row {r}"))]);
    }
    for c in 0..n {
        let refs: Vec<i64> = (0..n).map(|r| id(r, c)).collect();
        osm.way(2000 + c as i64, &refs, &[("highway", tag), ("name", &format!("Column {c}"))]);
    }
    osm
}

/// A fixture project: OSM text, terrain and the box to extract.
#[derive(Debug, Clone)]
pub struct SynthProject {
    pub site: Site,
    pub osm: String,
    pub dem: DemGrid,
    pub bbox: BBox,
}

impl SynthProject {
    /// Writes `map.osm`, `dem.asc` and `project.toml` into `dir`. `extra` is
    /// appended verbatim to the config. Returns the config path.
    pub fn write_to(&self, dir: &std::path::Path, extra: &str) -> std::io::Result<std::path::PathBuf> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("map.osm"), &self.osm)?;
        std::fs::write(dir.join("dem.asc"), self.dem.to_ascii_grid())?;
        let b = &self.bbox;
        let config = format!(
            "osm = \"map.osm\"\ndem = \"dem.asc\"\nbbox = [{}, {}, {}, {}]\noutput_dir = \"out\"\n{extra}",
            b.min_lon, b.min_lat, b.max_lon, b.max_lat
        );
        let path = dir.join("project.toml");
        std::fs::write(&path, config)?;
        Ok(path)
    }
}

/// `n` x `n` grid over a DEM of `f` at 1 m spacing with `margin` metres
/// around the streets.
pub fn grid_project(n: usize, block: f64, margin: f64, tag: &str, f: impl Fn(f64, f64) -> f64) -> SynthProject {
    let site = Site::san_francisco();
    let span = (n - 1) as f64 * block;
    let size = span + 2.0 * margin;
    let osm = manhattan_grid(&site, n, block, margin, tag).to_xml();
    let cells = size.ceil() as usize + 1;
    let dem = site.dem(0.0, 0.0, 1.0, cells, cells, f).expect("valid synthetic grid");
    let bbox = site.bbox(margin / 2.0, margin / 2.0, size - margin / 2.0, size - margin / 2.0);
    SynthProject { site, osm, dem, bbox }
}
