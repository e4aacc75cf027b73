//! Coordinate types, WGS84 <-> UTM projection and the project-local metric frame.
//!
//! The projection is the Krüger n-series transverse Mercator (6th order, as
//! formulated by Karney 2011), which is accurate to well below a millimetre
//! inside a UTM zone.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// WGS84 semi-major axis (m).
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// UTM central-meridian scale factor.
pub const UTM_K0: f64 = 0.9996;
pub const UTM_FALSE_EASTING: f64 = 500_000.0;
pub const UTM_FALSE_NORTHING_SOUTH: f64 = 10_000_000.0;
/// Transverse Mercator is only used inside this latitude band.
pub const UTM_MAX_LAT: f64 = 84.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90] or not finite")]
    InvalidLatitude(f64),
    #[error("longitude {0} outside [-180, 180) or not finite")]
    InvalidLongitude(f64),
    #[error("latitude {0} outside the UTM validity band (|lat| <= 84)")]
    PolarLatitude(f64),
    #[error("UTM zone {0} outside [1, 60]")]
    InvalidZone(u8),
    #[error("easting {0} outside (0, 1000000)")]
    InvalidEasting(f64),
    #[error("point in zone {point} cannot be expressed in a zone {frame} frame")]
    ZoneMismatch { point: u8, frame: u8 },
    #[error("hemisphere mismatch between point and frame")]
    HemisphereMismatch,
    #[error("bounding box {0}")]
    InvalidBBox(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::InvalidLatitude(lat));
        }
        if !lon.is_finite() || !(-180.0..180.0).contains(&lon) {
            return Err(GeoError::InvalidLongitude(lon));
        }
        Ok(Self { lat, lon })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hemisphere {
    North,
    South,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtmPoint {
    pub easting: f64,
    pub northing: f64,
    pub zone: u8,
    pub hemisphere: Hemisphere,
}

impl UtmPoint {
    pub fn new(easting: f64, northing: f64, zone: u8, hemisphere: Hemisphere) -> Result<Self, GeoError> {
        if !(1..=60).contains(&zone) {
            return Err(GeoError::InvalidZone(zone));
        }
        if !easting.is_finite() || easting <= 0.0 || easting >= 1.0e6 {
            return Err(GeoError::InvalidEasting(easting));
        }
        Ok(Self { easting, northing, zone, hemisphere })
    }
}

/// Planar position in the local frame (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (other.x - self.x).hypot(other.y - self.y)
    }

    pub fn lerp(&self, other: &Point2, t: f64) -> Point2 {
        Point2::new(self.x + (other.x - self.x) * t, self.y + (other.y - self.y) * t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn xy(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// WGS84 rectangle, in the CLI order (min_lon, min_lat, max_lon, max_lat).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

impl BBox {
    pub fn new(min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64) -> Result<Self, GeoError> {
        GeoPoint::new(min_lat, min_lon)?;
        GeoPoint::new(max_lat, max_lon)?;
        if min_lon >= max_lon || min_lat >= max_lat {
            return Err(GeoError::InvalidBBox("is empty or inverted".into()));
        }
        Ok(Self { min_lon, min_lat, max_lon, max_lat })
    }

    pub fn from_slice(v: &[f64]) -> Result<Self, GeoError> {
        match v {
            [a, b, c, d] => Self::new(*a, *b, *c, *d),
            _ => Err(GeoError::InvalidBBox(format!("needs 4 values, got {}", v.len()))),
        }
    }

    pub fn contains(&self, p: &GeoPoint) -> bool {
        p.lon >= self.min_lon && p.lon <= self.max_lon && p.lat >= self.min_lat && p.lat <= self.max_lat
    }

    /// The single UTM zone and hemisphere covering the box. Boxes straddling a
    /// zone boundary or the equator are rejected.
    pub fn utm_zone(&self) -> Result<(u8, Hemisphere), GeoError> {
        let zone = utm_zone(self.min_lon)?;
        let east_edge = -180.0 + 6.0 * zone as f64;
        if self.max_lon > east_edge {
            return Err(GeoError::InvalidBBox(format!(
                "spans the UTM zone boundary at longitude {east_edge}"
            )));
        }
        let hemisphere = if self.min_lat >= 0.0 {
            Hemisphere::North
        } else if self.max_lat <= 0.0 {
            Hemisphere::South
        } else {
            return Err(GeoError::InvalidBBox("spans the equator".into()));
        };
        if self.min_lat.abs().max(self.max_lat.abs()) > UTM_MAX_LAT {
            return Err(GeoError::PolarLatitude(self.max_lat.abs().max(self.min_lat.abs())));
        }
        Ok((zone, hemisphere))
    }

    /// Points along the box outline, used to find its projected envelope.
    fn outline(&self, per_edge: usize) -> Vec<GeoPoint> {
        let mut pts = Vec::with_capacity(per_edge * 4);
        for i in 0..=per_edge {
            let t = i as f64 / per_edge as f64;
            let lon = self.min_lon + (self.max_lon - self.min_lon) * t;
            let lat = self.min_lat + (self.max_lat - self.min_lat) * t;
            pts.push(GeoPoint { lat: self.min_lat, lon });
            pts.push(GeoPoint { lat: self.max_lat, lon });
            pts.push(GeoPoint { lat, lon: self.min_lon });
            pts.push(GeoPoint { lat, lon: self.max_lon });
        }
        pts
    }
}

/// Axis-aligned rectangle in a planar metric frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Extent {
    pub fn empty() -> Self {
        Self {
            min_x: f64::INFINITY,
            min_y: f64::INFINITY,
            max_x: f64::NEG_INFINITY,
            max_y: f64::NEG_INFINITY,
        }
    }

    pub fn include(&mut self, x: f64, y: f64) {
        self.min_x = self.min_x.min(x);
        self.min_y = self.min_y.min(y);
        self.max_x = self.max_x.max(x);
        self.max_y = self.max_y.max(y);
    }

    pub fn contains(&self, x: f64, y: f64, tolerance: f64) -> bool {
        x >= self.min_x - tolerance
            && x <= self.max_x + tolerance
            && y >= self.min_y - tolerance
            && y <= self.max_y + tolerance
    }
}

/// `floor((lon + 180) / 6) + 1`.
pub fn utm_zone(lon: f64) -> Result<u8, GeoError> {
    if !lon.is_finite() || !(-180.0..180.0).contains(&lon) {
        return Err(GeoError::InvalidLongitude(lon));
    }
    let zone = ((lon + 180.0) / 6.0).floor() as i64 + 1;
    Ok(zone.clamp(1, 60) as u8)
}

pub fn central_meridian(zone: u8) -> f64 {
    (zone as f64 - 1.0) * 6.0 - 180.0 + 3.0
}

/// Transverse Mercator on the WGS84 ellipsoid.
#[derive(Debug, Clone)]
pub struct TransverseMercator {
    lon0: f64,
    k0: f64,
    false_easting: f64,
    false_northing: f64,
    e: f64,
    e2: f64,
    a_hat: f64,
    alpha: [f64; 6],
    beta: [f64; 6],
}

impl TransverseMercator {
    pub fn utm(zone: u8, hemisphere: Hemisphere) -> Self {
        let false_northing = match hemisphere {
            Hemisphere::North => 0.0,
            Hemisphere::South => UTM_FALSE_NORTHING_SOUTH,
        };
        Self::new(central_meridian(zone).to_radians(), UTM_K0, UTM_FALSE_EASTING, false_northing)
    }

    pub fn new(lon0: f64, k0: f64, false_easting: f64, false_northing: f64) -> Self {
        let f = WGS84_F;
        let n = f / (2.0 - f);
        let e2 = f * (2.0 - f);
        let (n2, n3) = (n * n, n * n * n);
        let (n4, n5, n6) = (n3 * n, n3 * n2, n3 * n3);
        let a_hat = WGS84_A / (1.0 + n) * (1.0 + n2 / 4.0 + n4 / 64.0 + n6 / 256.0);
        let alpha = [
            n / 2.0 - 2.0 / 3.0 * n2 + 5.0 / 16.0 * n3 + 41.0 / 180.0 * n4 - 127.0 / 288.0 * n5
                + 7891.0 / 37800.0 * n6,
            13.0 / 48.0 * n2 - 3.0 / 5.0 * n3 + 557.0 / 1440.0 * n4 + 281.0 / 630.0 * n5
                - 1983433.0 / 1935360.0 * n6,
            61.0 / 240.0 * n3 - 103.0 / 140.0 * n4 + 15061.0 / 26880.0 * n5 + 167603.0 / 181440.0 * n6,
            49561.0 / 161280.0 * n4 - 179.0 / 168.0 * n5 + 6601661.0 / 7257600.0 * n6,
            34729.0 / 80640.0 * n5 - 3418889.0 / 1995840.0 * n6,
            212378941.0 / 319334400.0 * n6,
        ];
        let beta = [
            n / 2.0 - 2.0 / 3.0 * n2 + 37.0 / 96.0 * n3 - 1.0 / 360.0 * n4 - 81.0 / 512.0 * n5
                + 96199.0 / 604800.0 * n6,
            1.0 / 48.0 * n2 + 1.0 / 15.0 * n3 - 437.0 / 1440.0 * n4 + 46.0 / 105.0 * n5
                - 1118711.0 / 3870720.0 * n6,
            17.0 / 480.0 * n3 - 37.0 / 840.0 * n4 - 209.0 / 4480.0 * n5 + 5569.0 / 90720.0 * n6,
            4397.0 / 161280.0 * n4 - 11.0 / 504.0 * n5 - 830251.0 / 7257600.0 * n6,
            4583.0 / 161280.0 * n5 - 108847.0 / 3991680.0 * n6,
            20648693.0 / 638668800.0 * n6,
        ];
        Self { lon0, k0, false_easting, false_northing, e: e2.sqrt(), e2, a_hat, alpha, beta }
    }

    // geodetic tangent -> conformal tangent
    fn conformal_tan(&self, tau: f64) -> f64 {
        let tau1 = tau.hypot(1.0);
        let sigma = (self.e * (self.e * tau / tau1).atanh()).sinh();
        tau * sigma.hypot(1.0) - sigma * tau1
    }

    fn geodetic_tan(&self, tau_prime: f64) -> f64 {
        let mut tau = tau_prime;
        for _ in 0..20 {
            let tau1 = tau.hypot(1.0);
            let estimate = self.conformal_tan(tau);
            let step = (tau_prime - estimate) * (1.0 + (1.0 - self.e2) * tau * tau)
                / ((1.0 - self.e2) * tau1 * estimate.hypot(1.0));
            tau += step;
            if step.abs() <= 1e-14 * tau.abs().max(1.0) {
                break;
            }
        }
        tau
    }

    /// Radians in, meters out.
    pub fn forward(&self, lat: f64, lon: f64) -> (f64, f64) {
        let dlam = lon - self.lon0;
        let tau_prime = self.conformal_tan(lat.tan());
        let xi_prime = tau_prime.atan2(dlam.cos());
        let eta_prime = (dlam.sin() / tau_prime.hypot(dlam.cos())).asinh();
        let mut xi = xi_prime;
        let mut eta = eta_prime;
        for (j, a) in self.alpha.iter().enumerate() {
            let k = 2.0 * (j as f64 + 1.0);
            xi += a * (k * xi_prime).sin() * (k * eta_prime).cosh();
            eta += a * (k * xi_prime).cos() * (k * eta_prime).sinh();
        }
        (
            self.false_easting + self.k0 * self.a_hat * eta,
            self.false_northing + self.k0 * self.a_hat * xi,
        )
    }

    /// Meters in, radians out.
    pub fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let eta = (x - self.false_easting) / (self.k0 * self.a_hat);
        let xi = (y - self.false_northing) / (self.k0 * self.a_hat);
        let mut xi_prime = xi;
        let mut eta_prime = eta;
        for (j, b) in self.beta.iter().enumerate() {
            let k = 2.0 * (j as f64 + 1.0);
            xi_prime -= b * (k * xi).sin() * (k * eta).cosh();
            eta_prime -= b * (k * xi).cos() * (k * eta).sinh();
        }
        let sinh_eta = eta_prime.sinh();
        let cos_xi = xi_prime.cos();
        let tau_prime = xi_prime.sin() / sinh_eta.hypot(cos_xi);
        let lat = self.geodetic_tan(tau_prime).atan();
        let lon = self.lon0 + sinh_eta.atan2(cos_xi);
        (lat, lon)
    }
}

/// Project into the point's own zone.
pub fn wgs84_to_utm(p: &GeoPoint) -> Result<UtmPoint, GeoError> {
    let zone = utm_zone(p.lon)?;
    let hemisphere = if p.lat >= 0.0 { Hemisphere::North } else { Hemisphere::South };
    wgs84_to_utm_in(p, zone, hemisphere)
}

/// Project into a fixed zone (the project zone), even if the point lies a little
/// outside it.
pub fn wgs84_to_utm_in(p: &GeoPoint, zone: u8, hemisphere: Hemisphere) -> Result<UtmPoint, GeoError> {
    let p = GeoPoint::new(p.lat, p.lon)?;
    if p.lat.abs() > UTM_MAX_LAT {
        return Err(GeoError::PolarLatitude(p.lat));
    }
    if !(1..=60).contains(&zone) {
        return Err(GeoError::InvalidZone(zone));
    }
    let (easting, northing) =
        TransverseMercator::utm(zone, hemisphere).forward(p.lat.to_radians(), p.lon.to_radians());
    UtmPoint::new(easting, northing, zone, hemisphere)
}

pub fn utm_to_wgs84(p: &UtmPoint) -> Result<GeoPoint, GeoError> {
    let (lat, lon) = TransverseMercator::utm(p.zone, p.hemisphere).inverse(p.easting, p.northing);
    let mut lon = lon.to_degrees();
    if lon >= 180.0 {
        lon -= 360.0;
    }
    GeoPoint::new(lat.to_degrees(), lon)
}

/// Project-local Cartesian frame: a translation of one UTM zone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalFrame {
    pub origin: UtmPoint,
}

impl LocalFrame {
    pub fn new(origin: UtmPoint) -> Self {
        Self { origin }
    }

    /// Frame whose origin is the south-west corner of the projected envelope of
    /// `bbox`, so every in-box point has non-negative local coordinates.
    pub fn for_bbox(bbox: &BBox) -> Result<(Self, Extent), GeoError> {
        let (zone, hemisphere) = bbox.utm_zone()?;
        let mut env = Extent::empty();
        for p in bbox.outline(32) {
            let u = wgs84_to_utm_in(&p, zone, hemisphere)?;
            env.include(u.easting, u.northing);
        }
        let origin = UtmPoint::new(env.min_x, env.min_y, zone, hemisphere)?;
        let frame = Self { origin };
        let local = Extent {
            min_x: 0.0,
            min_y: 0.0,
            max_x: env.max_x - env.min_x,
            max_y: env.max_y - env.min_y,
        };
        Ok((frame, local))
    }

    pub fn zone(&self) -> u8 {
        self.origin.zone
    }

    pub fn to_local(&self, p: &UtmPoint) -> Result<Point2, GeoError> {
        if p.zone != self.origin.zone {
            return Err(GeoError::ZoneMismatch { point: p.zone, frame: self.origin.zone });
        }
        if p.hemisphere != self.origin.hemisphere {
            return Err(GeoError::HemisphereMismatch);
        }
        Ok(Point2::new(p.easting - self.origin.easting, p.northing - self.origin.northing))
    }

    /// Absolute UTM coordinates of a local point (no easting range check).
    pub fn to_utm_xy(&self, x: f64, y: f64) -> (f64, f64) {
        (self.origin.easting + x, self.origin.northing + y)
    }

    pub fn geo_to_local(&self, p: &GeoPoint) -> Result<Point2, GeoError> {
        let u = wgs84_to_utm_in(p, self.origin.zone, self.origin.hemisphere)?;
        self.to_local(&u)
    }

    pub fn local_to_geo(&self, x: f64, y: f64) -> Result<GeoPoint, GeoError> {
        let (e, n) = self.to_utm_xy(x, y);
        let (lat, lon) = TransverseMercator::utm(self.origin.zone, self.origin.hemisphere).inverse(e, n);
        GeoPoint::new(lat.to_degrees(), lon.to_degrees())
    }

    /// PROJ string describing the frame's zone.
    pub fn proj_string(&self) -> String {
        let south = match self.origin.hemisphere {
            Hemisphere::North => "",
            Hemisphere::South => " +south",
        };
        format!("+proj=utm +zone={}{} +datum=WGS84 +units=m +no_defs", self.origin.zone, south)
    }
}
