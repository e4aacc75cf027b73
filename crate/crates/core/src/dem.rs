//! Regular elevation grids and four-node sampling.
//!
//! Grid coordinates are meters in the project UTM zone. Node `(col, row)` sits
//! at `(origin_x + col * spacing, origin_y + row * spacing)`; row 0 is the
//! southernmost row.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this distance a query coincides with a grid node.
pub const EXACT_HIT_DISTANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DemError {
    #[error("missing header key `{0}`")]
    MissingKey(&'static str),
    #[error("line {line}: cannot parse `{token}` as a number")]
    NonNumeric { line: usize, token: String },
    #[error("header declares {expected} values, found {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("cellsize must be positive, got {0}")]
    BadSpacing(f64),
    #[error("grid must have at least 2x2 nodes, got {ncols}x{nrows}")]
    TooSmall { ncols: usize, nrows: usize },
    #[error("query ({x:.3}, {y:.3}) is outside the grid extent")]
    OutOfExtent { x: f64, y: f64 },
    #[error("stencil for ({x:.3}, {y:.3}) touches a nodata node at col {col}, row {row}")]
    Nodata { x: f64, y: f64, col: usize, row: usize },
}

/// How the four surrounding nodes are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Normalised inverse-distance weights over the four cell corners.
    #[default]
    Idw4,
    Bilinear,
}

impl SamplingMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SamplingMode::Idw4 => "idw4",
            SamplingMode::Bilinear => "bilinear",
        }
    }
}

impl std::str::FromStr for SamplingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "idw4" | "idw" => Ok(SamplingMode::Idw4),
            "bilinear" => Ok(SamplingMode::Bilinear),
            other => Err(format!("unknown sampling mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemGrid {
    origin_x: f64,
    origin_y: f64,
    spacing: f64,
    ncols: usize,
    nrows: usize,
    values: Vec<f64>,
    nodata: Option<f64>,
}

/// The four corners of the cell enclosing a query, ordered SW, SE, NW, NE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub nodes: [(usize, usize); 4],
    pub distances: [f64; 4],
    pub weights: [f64; 4],
}

impl DemGrid {
    pub fn new(
        origin_x: f64,
        origin_y: f64,
        spacing: f64,
        ncols: usize,
        nrows: usize,
        values: Vec<f64>,
        nodata: Option<f64>,
    ) -> Result<Self, DemError> {
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(DemError::BadSpacing(spacing));
        }
        if ncols < 2 || nrows < 2 {
            return Err(DemError::TooSmall { ncols, nrows });
        }
        if values.len() != ncols * nrows {
            return Err(DemError::CountMismatch { expected: ncols * nrows, found: values.len() });
        }
        Ok(Self { origin_x, origin_y, spacing, ncols, nrows, values, nodata })
    }

    /// Builds a grid by evaluating `f(x, y)` at every node.
    pub fn from_fn(
        origin_x: f64,
        origin_y: f64,
        spacing: f64,
        ncols: usize,
        nrows: usize,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self, DemError> {
        let mut values = Vec::with_capacity(ncols * nrows);
        for row in 0..nrows {
            for col in 0..ncols {
                values.push(f(origin_x + col as f64 * spacing, origin_y + row as f64 * spacing));
            }
        }
        Self::new(origin_x, origin_y, spacing, ncols, nrows, values, None)
    }

    pub fn origin(&self) -> (f64, f64) {
        (self.origin_x, self.origin_y)
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn nodata(&self) -> Option<f64> {
        self.nodata
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.ncols + col]
    }

    pub fn node_position(&self, col: usize, row: usize) -> (f64, f64) {
        (self.origin_x + col as f64 * self.spacing, self.origin_y + row as f64 * self.spacing)
    }

    /// Node-center extent `(min_x, min_y, max_x, max_y)`.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        let (max_x, max_y) = self.node_position(self.ncols - 1, self.nrows - 1);
        (self.origin_x, self.origin_y, max_x, max_y)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (x0, y0, x1, y1) = self.extent();
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    }

    fn is_nodata(&self, v: f64) -> bool {
        v.is_nan() || self.nodata.is_some_and(|nd| v == nd)
    }

    fn enclosing_cell(&self, x: f64, y: f64) -> Result<(usize, usize), DemError> {
        if !x.is_finite() || !y.is_finite() || !self.contains(x, y) {
            return Err(DemError::OutOfExtent { x, y });
        }
        let fx = (x - self.origin_x) / self.spacing;
        let fy = (y - self.origin_y) / self.spacing;
        let col = (fx.floor() as usize).min(self.ncols - 2);
        let row = (fy.floor() as usize).min(self.nrows - 2);
        Ok((col, row))
    }

    fn corners(col: usize, row: usize) -> [(usize, usize); 4] {
        [(col, row), (col + 1, row), (col, row + 1), (col + 1, row + 1)]
    }

    /// Inverse-distance stencil for `(x, y)`.
    pub fn stencil_for(&self, x: f64, y: f64) -> Result<Stencil, DemError> {
        self.stencil_with(SamplingMode::Idw4, x, y)
    }

    pub fn stencil_with(&self, mode: SamplingMode, x: f64, y: f64) -> Result<Stencil, DemError> {
        let (col, row) = self.enclosing_cell(x, y)?;
        let nodes = Self::corners(col, row);
        let mut distances = [0.0; 4];
        for (d, &(c, r)) in distances.iter_mut().zip(&nodes) {
            let (nx, ny) = self.node_position(c, r);
            *d = (x - nx).hypot(y - ny);
        }
        for &(c, r) in &nodes {
            if self.is_nodata(self.value(c, r)) {
                return Err(DemError::Nodata { x, y, col: c, row: r });
            }
        }
        let mut weights = [0.0; 4];
        if let Some(hit) = distances.iter().position(|&d| d < EXACT_HIT_DISTANCE) {
            weights[hit] = 1.0;
            return Ok(Stencil { nodes, distances, weights });
        }
        match mode {
            SamplingMode::Idw4 => {
                let inv_sum: f64 = distances.iter().map(|d| 1.0 / d).sum();
                for (w, d) in weights.iter_mut().zip(&distances) {
                    *w = (1.0 / d) / inv_sum;
                }
            }
            SamplingMode::Bilinear => {
                let (x0, y0) = self.node_position(col, row);
                let tx = ((x - x0) / self.spacing).clamp(0.0, 1.0);
                let ty = ((y - y0) / self.spacing).clamp(0.0, 1.0);
                weights = [(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty];
            }
        }
        Ok(Stencil { nodes, distances, weights })
    }

    pub fn sample(&self, x: f64, y: f64) -> Result<f64, DemError> {
        self.sample_with(SamplingMode::Idw4, x, y)
    }

    pub fn sample_with(&self, mode: SamplingMode, x: f64, y: f64) -> Result<f64, DemError> {
        let stencil = self.stencil_with(mode, x, y)?;
        if let Some(hit) = stencil.weights.iter().position(|&w| w == 1.0) {
            let (c, r) = stencil.nodes[hit];
            return Ok(self.value(c, r));
        }
        Ok(stencil
            .nodes
            .iter()
            .zip(&stencil.weights)
            .map(|(&(c, r), w)| w * self.value(c, r))
            .sum())
    }

    /// ESRI ASCII grid text, `xllcenter` convention, northernmost row first.
    pub fn to_ascii_grid(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 9 + 128);
        let _ = writeln!(out, "ncols {}", self.ncols);
        let _ = writeln!(out, "nrows {}", self.nrows);
        let _ = writeln!(out, "xllcenter {}", self.origin_x);
        let _ = writeln!(out, "yllcenter {}", self.origin_y);
        let _ = writeln!(out, "cellsize {}", self.spacing);
        if let Some(nd) = self.nodata {
            let _ = writeln!(out, "nodata_value {nd}");
        }
        for row in (0..self.nrows).rev() {
            let line = &self.values[row * self.ncols..(row + 1) * self.ncols];
            for (i, v) in line.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Parses an ESRI ASCII grid. Header keys are case-insensitive; the body lists
/// `nrows` lines of `ncols` values starting with the northernmost row.
pub fn parse_ascii_grid(text: &str) -> Result<DemGrid, DemError> {
    let mut ncols = None;
    let mut nrows = None;
    let mut x_corner = None;
    let mut x_center = None;
    let mut y_corner = None;
    let mut y_center = None;
    let mut cellsize = None;
    let mut nodata = None;

    let mut lines = text.lines().enumerate().peekable();
    while let Some(&(idx, line)) = lines.peek() {
        let mut parts = line.split_whitespace();
        let Some(key) = parts.next() else {
            lines.next();
            continue;
        };
        if !key.starts_with(|c: char| c.is_ascii_alphabetic()) {
            break;
        }
        let token = parts.next().unwrap_or("");
        let value: f64 = token
            .parse()
            .map_err(|_| DemError::NonNumeric { line: idx + 1, token: token.to_string() })?;
        match key.to_ascii_lowercase().as_str() {
            "ncols" => ncols = Some(value),
            "nrows" => nrows = Some(value),
            "xllcorner" => x_corner = Some(value),
            "xllcenter" => x_center = Some(value),
            "yllcorner" => y_corner = Some(value),
            "yllcenter" => y_center = Some(value),
            "cellsize" => cellsize = Some(value),
            "nodata_value" => nodata = Some(value),
            _ => {
                return Err(DemError::NonNumeric { line: idx + 1, token: key.to_string() });
            }
        }
        lines.next();
    }

    let ncols = ncols.ok_or(DemError::MissingKey("ncols"))?;
    let nrows = nrows.ok_or(DemError::MissingKey("nrows"))?;
    let spacing = cellsize.ok_or(DemError::MissingKey("cellsize"))?;
    if !(spacing > 0.0) {
        return Err(DemError::BadSpacing(spacing));
    }
    let origin_x = match (x_center, x_corner) {
        (Some(c), _) => c,
        (None, Some(c)) => c + spacing / 2.0,
        (None, None) => return Err(DemError::MissingKey("xllcorner")),
    };
    let origin_y = match (y_center, y_corner) {
        (Some(c), _) => c,
        (None, Some(c)) => c + spacing / 2.0,
        (None, None) => return Err(DemError::MissingKey("yllcorner")),
    };
    if ncols < 1.0 || nrows < 1.0 || ncols.fract() != 0.0 || nrows.fract() != 0.0 {
        return Err(DemError::TooSmall { ncols: ncols.max(0.0) as usize, nrows: nrows.max(0.0) as usize });
    }
    let (ncols, nrows) = (ncols as usize, nrows as usize);

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(nrows);
    for (idx, line) in lines {
        let mut row = Vec::with_capacity(ncols);
        for token in line.split_whitespace() {
            let v: f64 = token
                .parse()
                .map_err(|_| DemError::NonNumeric { line: idx + 1, token: token.to_string() })?;
            row.push(v);
        }
        if row.is_empty() {
            continue;
        }
        if row.len() != ncols {
            return Err(DemError::CountMismatch { expected: ncols, found: row.len() });
        }
        rows.push(row);
    }
    if rows.len() != nrows {
        return Err(DemError::CountMismatch { expected: ncols * nrows, found: rows.len() * ncols });
    }
    let values: Vec<f64> = rows.into_iter().rev().flatten().collect();
    DemGrid::new(origin_x, origin_y, spacing, ncols, nrows, values, nodata)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cell(values: [f64; 4]) -> DemGrid {
        // values: SW, SE, NW, NE
        DemGrid::new(0.0, 0.0, 1.0, 2, 2, values.to_vec(), None).unwrap()
    }

    #[test]
    fn parses_minimal_grid() {
        let text = "ncols 2\nnrows 2\nxllcenter 0\nyllcenter 0\ncellsize 1\n1 2\n3 4\n";
        let g = parse_ascii_grid(text).unwrap();
        assert_eq!(g.values().len(), 4);
        assert_eq!(g.spacing(), 1.0);
        // first text line is the northern row
        assert_eq!(g.value(0, 1), 1.0);
        assert_eq!(g.value(1, 1), 2.0);
        assert_eq!(g.value(0, 0), 3.0);
        assert_eq!(g.value(1, 0), 4.0);
    }

    #[test]
    fn header_keys_are_case_insensitive() {
        let text = "NCOLS 2\nNRows 2\nXLLCENTER 10\nYLLCENTER 20\nCELLSIZE 5\nNODATA_value -9999\n1 2\n3 4\n";
        let g = parse_ascii_grid(text).unwrap();
        assert_eq!(g.origin(), (10.0, 20.0));
        assert_eq!(g.nodata(), Some(-9999.0));
    }

    #[test]
    fn count_mismatch_is_reported() {
        let text = "ncols 3\nnrows 2\nxllcenter 0\nyllcenter 0\ncellsize 1\n1 2\n3 4\n";
        assert!(matches!(parse_ascii_grid(text), Err(DemError::CountMismatch { .. })));
        let short = "ncols 2\nnrows 3\nxllcenter 0\nyllcenter 0\ncellsize 1\n1 2\n3 4\n";
        assert!(matches!(parse_ascii_grid(short), Err(DemError::CountMismatch { .. })));
    }

    #[test]
    fn malformed_headers_and_tokens() {
        let no_size = "ncols 2\nnrows 2\nxllcenter 0\nyllcenter 0\n1 2\n3 4\n";
        assert_eq!(parse_ascii_grid(no_size), Err(DemError::MissingKey("cellsize")));
        let bad = "ncols 2\nnrows 2\nxllcenter 0\nyllcenter 0\ncellsize 1\n1 x\n3 4\n";
        assert!(matches!(parse_ascii_grid(bad), Err(DemError::NonNumeric { line: 6, .. })));
        let zero = "ncols 2\nnrows 2\nxllcenter 0\nyllcenter 0\ncellsize 0\n1 2\n3 4\n";
        assert_eq!(parse_ascii_grid(zero), Err(DemError::BadSpacing(0.0)));
    }

    #[test]
    fn corner_form_shifts_origin_by_half_cell() {
        let center = "ncols 2\nnrows 2\nxllcenter 100\nyllcenter 200\ncellsize 10\n1 2\n3 4\n";
        let corner = "ncols 2\nnrows 2\nxllcorner 100\nyllcorner 200\ncellsize 10\n1 2\n3 4\n";
        let a = parse_ascii_grid(center).unwrap();
        let b = parse_ascii_grid(corner).unwrap();
        assert_eq!(b.origin().0 - a.origin().0, 5.0);
        assert_eq!(b.origin().1 - a.origin().1, 5.0);
    }

    #[test]
    fn writer_round_trips() {
        let g = DemGrid::from_fn(500_000.0, 4_000_000.0, 2.0, 4, 3, |x, y| 0.01 * (x - 500_000.0) + y * 1e-6)
            .unwrap();
        assert_eq!(parse_ascii_grid(&g.to_ascii_grid()).unwrap(), g);
    }

    #[test]
    fn exact_node_hit_has_single_weight() {
        let g = cell([1.0, 2.0, 3.0, 4.0]);
        let s = g.stencil_for(1.0, 0.0).unwrap();
        assert_eq!(s.weights, [0.0, 1.0, 0.0, 0.0]);
        assert_eq!(g.sample(1.0, 1.0).unwrap(), 4.0);
    }

    #[test]
    fn cell_center_has_equal_weights() {
        let g = cell([0.0, 0.0, 10.0, 10.0]);
        let s = g.stencil_for(0.5, 0.5).unwrap();
        for w in s.weights {
            assert_abs_diff_eq!(w, 0.25, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(g.sample(0.5, 0.5).unwrap(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn out_of_extent_and_nodata() {
        let g = cell([1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(g.sample(1.5, 0.5), Err(DemError::OutOfExtent { .. })));
        assert!(matches!(g.sample(-0.001, 0.5), Err(DemError::OutOfExtent { .. })));
        let holes = DemGrid::new(0.0, 0.0, 1.0, 2, 2, vec![1.0, -9999.0, 3.0, 4.0], Some(-9999.0)).unwrap();
        assert!(matches!(holes.sample(0.2, 0.2), Err(DemError::Nodata { col: 1, row: 0, .. })));
    }

    #[test]
    fn constant_field_is_reproduced() {
        let g = DemGrid::from_fn(0.0, 0.0, 1.0, 5, 5, |_, _| 10.0).unwrap();
        for (x, y) in [(0.3, 0.7), (2.5, 3.5), (3.99, 0.01)] {
            assert_abs_diff_eq!(g.sample(x, y).unwrap(), 10.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn plane_query_matches_hand_evaluated_weights() {
        // Oracle: the inverse-distance formula evaluated independently
        // (Python, double precision) for the query (0.3, 0.5) in a unit cell.
        let g = DemGrid::from_fn(0.0, 0.0, 1.0, 10, 10, |x, _| 0.02 * x).unwrap();
        assert_abs_diff_eq!(g.sample(0.3, 0.5).unwrap(), 0.008079872407968905, epsilon = 1e-15);
        assert_abs_diff_eq!(g.sample(7.3, 4.5).unwrap(), 0.14807987240796888, epsilon = 1e-14);
        let s = g.stencil_for(0.3, 0.5).unwrap();
        assert_abs_diff_eq!(s.weights[0], 0.2980031898007773, epsilon = 1e-15);
        assert_abs_diff_eq!(s.weights[1], 0.2019968101992226, epsilon = 1e-15);
    }

    #[test]
    fn bilinear_is_exact_on_planes() {
        let g = DemGrid::from_fn(0.0, 0.0, 1.0, 10, 10, |x, y| 0.02 * x - 0.3 * y + 4.0).unwrap();
        let z = g.sample_with(SamplingMode::Bilinear, 3.3, 6.8).unwrap();
        assert_abs_diff_eq!(z, 0.02 * 3.3 - 0.3 * 6.8 + 4.0, epsilon = 1e-12);
    }

    #[test]
    fn sampling_mode_parses() {
        assert_eq!("IDW4".parse::<SamplingMode>().unwrap(), SamplingMode::Idw4);
        assert_eq!("bilinear".parse::<SamplingMode>().unwrap(), SamplingMode::Bilinear);
        assert!("cubic".parse::<SamplingMode>().is_err());
    }

    proptest! {
        #[test]
        fn weights_are_a_convex_combination(
            vals in prop::array::uniform4(-100.0f64..100.0),
            x in 0.0f64..=1.0, y in 0.0f64..=1.0,
            bilinear in any::<bool>(),
        ) {
            let mode = if bilinear { SamplingMode::Bilinear } else { SamplingMode::Idw4 };
            let g = cell(vals);
            let s = g.stencil_with(mode, x, y).unwrap();
            let sum: f64 = s.weights.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(s.weights.iter().all(|&w| w >= 0.0));
            let z = g.sample_with(mode, x, y).unwrap();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(z >= lo - 1e-9 && z <= hi + 1e-9);
        }

        #[test]
        fn mirroring_across_vertical_axis(
            vals in prop::array::uniform4(-100.0f64..100.0),
            x in 0.0f64..=1.0, y in 0.0f64..=1.0,
        ) {
            let g = cell(vals);
            let mirrored = cell([vals[1], vals[0], vals[3], vals[2]]);
            let a = g.sample(x, y).unwrap();
            let b = mirrored.sample(1.0 - x, y).unwrap();
            prop_assert!((a - b).abs() <= 1e-9);
        }

        #[test]
        fn nodes_are_reproduced(values in prop::collection::vec(-500.0f64..500.0, 12), col in 0usize..4, row in 0usize..3) {
            let g = DemGrid::new(100.0, 200.0, 2.5, 4, 3, values.clone(), None).unwrap();
            let (x, y) = g.node_position(col, row);
            prop_assert_eq!(g.sample(x, y).unwrap().to_bits(), values[row * 4 + col].to_bits());
        }
    }
}
