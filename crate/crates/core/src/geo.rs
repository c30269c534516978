//! Geometry and raster primitives shared by the info modules.
//!
//! Everything here works on a sphere of authalic radius [`EARTH_RADIUS_KM`];
//! containment tests are planar in (lon, lat) degrees, which is what raster
//! tooling does for cell-center rules.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Authalic earth radius.
pub const EARTH_RADIUS_KM: f64 = 6371.0072;

const BOUNDARY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LonLat {
    pub lon: f64,
    pub lat: f64,
}

impl LonLat {
    pub const fn new(lon: f64, lat: f64) -> Self {
        Self { lon, lat }
    }

    pub fn is_valid(&self) -> bool {
        self.lon.is_finite()
            && self.lat.is_finite()
            && (-180.0..=180.0).contains(&self.lon)
            && (-90.0..=90.0).contains(&self.lat)
    }
}

/// Closed ring; the first vertex is repeated at the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ring(pub Vec<LonLat>);

impl Ring {
    pub fn validate(&self) -> Result<()> {
        let pts = &self.0;
        if pts.len() < 4 {
            return Err(Error::Geometry(format!(
                "ring has {} vertices, need at least 4",
                pts.len()
            )));
        }
        if pts.first() != pts.last() {
            return Err(Error::Geometry("ring is not closed".into()));
        }
        if let Some(p) = pts.iter().find(|p| !p.is_valid()) {
            return Err(Error::Geometry(format!(
                "coordinate out of range: ({}, {})",
                p.lon, p.lat
            )));
        }
        Ok(())
    }

    pub fn edges(&self) -> impl Iterator<Item = (LonLat, LonLat)> + '_ {
        self.0.windows(2).map(|w| (w[0], w[1]))
    }

    fn distinct_vertices(&self) -> usize {
        let open = &self.0[..self.0.len().saturating_sub(1)];
        let mut seen: Vec<LonLat> = Vec::with_capacity(open.len());
        for p in open {
            if !seen.contains(p) {
                seen.push(*p);
            }
        }
        seen.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub exterior: Ring,
    #[serde(default)]
    pub holes: Vec<Ring>,
}

impl Polygon {
    pub fn new(exterior: Vec<LonLat>) -> Self {
        Self {
            exterior: Ring(exterior),
            holes: Vec::new(),
        }
    }

    /// Axis-aligned lon/lat box, counter-clockwise.
    pub fn rect(min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64) -> Self {
        Self::new(vec![
            LonLat::new(min_lon, min_lat),
            LonLat::new(max_lon, min_lat),
            LonLat::new(max_lon, max_lat),
            LonLat::new(min_lon, max_lat),
            LonLat::new(min_lon, min_lat),
        ])
    }

    pub fn rings(&self) -> impl Iterator<Item = &Ring> {
        std::iter::once(&self.exterior).chain(self.holes.iter())
    }
}

/// Polygon or multipolygon; all parts are treated as one union.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub parts: Vec<Polygon>,
    /// Whether the source encoded this as a MultiPolygon.
    #[serde(default)]
    pub multi: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

impl BBox {
    pub fn contains(&self, p: LonLat) -> bool {
        p.lon >= self.min_lon && p.lon <= self.max_lon && p.lat >= self.min_lat && p.lat <= self.max_lat
    }

    pub fn intersects(&self, other: &BBox, tol: f64) -> bool {
        self.min_lon <= other.max_lon + tol
            && other.min_lon <= self.max_lon + tol
            && self.min_lat <= other.max_lat + tol
            && other.min_lat <= self.max_lat + tol
    }
}

impl From<Polygon> for Geometry {
    fn from(p: Polygon) -> Self {
        Geometry {
            parts: vec![p],
            multi: false,
        }
    }
}

impl Geometry {
    pub fn multi(parts: Vec<Polygon>) -> Self {
        Geometry { parts, multi: true }
    }

    pub fn rings(&self) -> impl Iterator<Item = &Ring> {
        self.parts.iter().flat_map(|p| p.rings())
    }

    pub fn vertex_count(&self) -> usize {
        self.rings().map(|r| r.0.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts.is_empty() {
            return Err(Error::Geometry("geometry has no polygons".into()));
        }
        for ring in self.rings() {
            ring.validate()?;
        }
        Ok(())
    }

    pub fn bbox(&self) -> BBox {
        let mut b = BBox {
            min_lon: f64::INFINITY,
            min_lat: f64::INFINITY,
            max_lon: f64::NEG_INFINITY,
            max_lat: f64::NEG_INFINITY,
        };
        for p in self.rings().flat_map(|r| r.0.iter()) {
            b.min_lon = b.min_lon.min(p.lon);
            b.min_lat = b.min_lat.min(p.lat);
            b.max_lon = b.max_lon.max(p.lon);
            b.max_lat = b.max_lat.max(p.lat);
        }
        b
    }

    /// Area-weighted centroid in an equirectangular projection about the
    /// mean vertex latitude. Holes carry negative weight.
    pub fn centroid(&self) -> LonLat {
        let exterior_pts: Vec<LonLat> = self
            .parts
            .iter()
            .flat_map(|p| p.exterior.0.iter().copied())
            .collect();
        let lat0 = exterior_pts.iter().map(|p| p.lat).sum::<f64>() / exterior_pts.len().max(1) as f64;
        let k = lat0.to_radians().cos().max(1e-12);

        let mut total = 0.0;
        let (mut cx, mut cy) = (0.0, 0.0);
        for part in &self.parts {
            for (i, ring) in part.rings().enumerate() {
                let (a, x, y) = planar_ring_moments(ring, k);
                // exterior counts positive, holes negative, regardless of winding
                let w = if i == 0 { a.abs() } else { -a.abs() };
                if a != 0.0 {
                    cx += w * x;
                    cy += w * y;
                }
                total += w;
            }
        }
        if total.abs() < 1e-300 {
            let n = exterior_pts.len().saturating_sub(self.parts.len()).max(1) as f64;
            let open = self
                .parts
                .iter()
                .flat_map(|p| p.exterior.0[..p.exterior.0.len() - 1].iter());
            let (sx, sy) = open.fold((0.0, 0.0), |(sx, sy), p| (sx + p.lon, sy + p.lat));
            return LonLat::new(sx / n, sy / n);
        }
        LonLat::new(cx / total / k, cy / total)
    }
}

/// Signed shoelace area and centroid of a ring after scaling longitude by `k`.
fn planar_ring_moments(ring: &Ring, k: f64) -> (f64, f64, f64) {
    let mut a2 = 0.0;
    let (mut sx, mut sy) = (0.0, 0.0);
    for (p, q) in ring.edges() {
        let (x0, y0, x1, y1) = (p.lon * k, p.lat, q.lon * k, q.lat);
        let cross = x0 * y1 - x1 * y0;
        a2 += cross;
        sx += (x0 + x1) * cross;
        sy += (y0 + y1) * cross;
    }
    if a2 == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    (a2 / 2.0, sx / (3.0 * a2), sy / (3.0 * a2))
}

/// Unsigned spherical area of one ring in steradians.
///
/// Sums, per edge, the signed spherical excess of the quadrilateral between
/// the edge and the equator; the closed-ring total is the enclosed excess.
fn ring_steradians(ring: &Ring) -> Result<f64> {
    if ring.0.len() < 4 || ring.distinct_vertices() < 3 {
        return Err(Error::Geometry(
            "degenerate ring: fewer than 3 distinct vertices".into(),
        ));
    }
    let mut total = 0.0;
    for (p, q) in ring.edges() {
        let dlon = q.lon - p.lon;
        if dlon.abs() > 180.0 {
            return Err(Error::Geometry(format!(
                "edge ({}, {}) -> ({}, {}) crosses the antimeridian",
                p.lon, p.lat, q.lon, q.lat
            )));
        }
        let t1 = (p.lat.to_radians() / 2.0).tan();
        let t2 = (q.lat.to_radians() / 2.0).tan();
        let num = (dlon.to_radians() / 2.0).tan() * (t1 + t2);
        total += 2.0 * num.atan2(1.0 + t1 * t2);
    }
    let mut area = total.abs();
    if area > 2.0 * std::f64::consts::PI {
        area = 4.0 * std::f64::consts::PI - area;
    }
    Ok(area)
}

/// Area in km² on the authalic sphere. Holes subtract, parts add.
pub fn spherical_polygon_area(geometry: &Geometry) -> Result<f64> {
    let r2 = EARTH_RADIUS_KM * EARTH_RADIUS_KM;
    let mut sum = 0.0;
    for part in &geometry.parts {
        let mut a = ring_steradians(&part.exterior)?;
        for hole in &part.holes {
            a -= ring_steradians(hole)?;
        }
        sum += a;
    }
    Ok(sum * r2)
}

pub fn haversine_distance(p1: LonLat, p2: LonLat) -> f64 {
    let (phi1, phi2) = (p1.lat.to_radians(), p2.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (p2.lon - p1.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.clamp(0.0, 1.0).sqrt().asin()
}

fn on_segment(p: LonLat, a: LonLat, b: LonLat) -> bool {
    let cross = (b.lon - a.lon) * (p.lat - a.lat) - (b.lat - a.lat) * (p.lon - a.lon);
    let scale = (b.lon - a.lon).abs().max((b.lat - a.lat).abs()).max(1.0);
    if cross.abs() > BOUNDARY_EPS * scale {
        return false;
    }
    p.lon >= a.lon.min(b.lon) - BOUNDARY_EPS
        && p.lon <= a.lon.max(b.lon) + BOUNDARY_EPS
        && p.lat >= a.lat.min(b.lat) - BOUNDARY_EPS
        && p.lat <= a.lat.max(b.lat) + BOUNDARY_EPS
}

fn polygon_contains(poly: &Polygon, p: LonLat) -> bool {
    let mut inside = false;
    for ring in poly.rings() {
        for (a, b) in ring.edges() {
            if on_segment(p, a, b) {
                return true;
            }
            if (a.lat > p.lat) != (b.lat > p.lat) {
                let x = a.lon + (p.lat - a.lat) * (b.lon - a.lon) / (b.lat - a.lat);
                if p.lon < x {
                    inside = !inside;
                }
            }
        }
    }
    inside
}

/// Even-odd containment; points on the boundary count as inside.
pub fn point_in_polygon(p: LonLat, geometry: &Geometry) -> bool {
    geometry.parts.iter().any(|poly| polygon_contains(poly, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RasterKind {
    Intensity,
    Categorical,
}

/// ESRI ASCII grid; `cells` is row-major with row 0 at the top (north).
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub ncols: usize,
    pub nrows: usize,
    pub xllcorner: f64,
    pub yllcorner: f64,
    pub cellsize: f64,
    pub nodata_value: f64,
    pub cells: Vec<f64>,
    pub kind: RasterKind,
}

impl Raster {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ncols: usize,
        nrows: usize,
        xllcorner: f64,
        yllcorner: f64,
        cellsize: f64,
        nodata_value: f64,
        cells: Vec<f64>,
        kind: RasterKind,
    ) -> Result<Self> {
        let r = Raster {
            ncols,
            nrows,
            xllcorner,
            yllcorner,
            cellsize,
            nodata_value,
            cells,
            kind,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ncols * self.nrows != self.cells.len() {
            return Err(Error::Validation(format!(
                "raster is {}x{} but has {} cells",
                self.ncols,
                self.nrows,
                self.cells.len()
            )));
        }
        if self.cellsize.is_nan() || self.cellsize <= 0.0 {
            return Err(Error::Validation("raster cellsize must be positive".into()));
        }
        if self.kind == RasterKind::Categorical {
            if let Some(v) = self
                .cells
                .iter()
                .find(|&&v| !self.is_nodata(v) && v.fract() != 0.0)
            {
                return Err(Error::Validation(format!(
                    "categorical raster has non-integer cell {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        v.is_nan() || v == self.nodata_value
    }

    pub fn cell_center(&self, row: usize, col: usize) -> LonLat {
        LonLat::new(
            self.xllcorner + (col as f64 + 0.5) * self.cellsize,
            self.yllcorner + (self.nrows as f64 - row as f64 - 0.5) * self.cellsize,
        )
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.cells[row * self.ncols + col]
    }

    /// Valid cell values whose centers fall inside `geometry`.
    pub fn values_inside<'a>(&'a self, geometry: &'a Geometry) -> impl Iterator<Item = f64> + 'a {
        let bb = geometry.bbox();
        let cs = self.cellsize;
        let col_lo = (((bb.min_lon - self.xllcorner) / cs - 0.5).floor().max(0.0)) as usize;
        let col_hi = ((((bb.max_lon - self.xllcorner) / cs - 0.5).ceil()).max(-1.0) + 1.0) as usize;
        let top = self.yllcorner + self.nrows as f64 * cs;
        let row_lo = (((top - bb.max_lat) / cs - 0.5).floor().max(0.0)) as usize;
        let row_hi = ((((top - bb.min_lat) / cs - 0.5).ceil()).max(-1.0) + 1.0) as usize;
        let cols = col_lo..col_hi.min(self.ncols);
        let rows = row_lo..row_hi.min(self.nrows);
        rows.flat_map(move |r| cols.clone().map(move |c| (r, c)))
            .filter(move |&(r, c)| {
                let p = self.cell_center(r, c);
                bb.contains(p) && point_in_polygon(p, geometry)
            })
            .map(move |(r, c)| self.get(r, c))
            .filter(move |v| !self.is_nodata(*v))
    }

    pub fn read_asc(path: &Path, kind: RasterKind) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_asc(&text, kind).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
            other => other,
        })
    }

    pub fn parse_asc(text: &str, kind: RasterKind) -> Result<Self> {
        let ctx = "ascii grid";
        let mut header: BTreeMap<String, f64> = BTreeMap::new();
        let mut lines = text.lines();
        let mut body = String::new();
        for line in lines.by_ref() {
            let mut it = line.split_whitespace();
            let Some(key) = it.next() else { continue };
            let lower = key.to_ascii_lowercase();
            if lower.chars().next().is_some_and(|c| c.is_ascii_alphabetic()) {
                let val = it
                    .next()
                    .ok_or_else(|| Error::parse(ctx, format!("header {key} has no value")))?;
                let v: f64 = val
                    .parse()
                    .map_err(|_| Error::parse(ctx, format!("bad header value {val:?}")))?;
                header.insert(lower, v);
                if header.len() == 6 {
                    break;
                }
            } else {
                body.push_str(line);
                body.push('\n');
                break;
            }
        }
        for line in lines {
            body.push_str(line);
            body.push('\n');
        }
        let need = |k: &str| {
            header
                .get(k)
                .copied()
                .ok_or_else(|| Error::parse(ctx, format!("missing header {k}")))
        };
        let ncols = need("ncols")? as usize;
        let nrows = need("nrows")? as usize;
        let cellsize = need("cellsize")?;
        let xll = match header.get("xllcorner") {
            Some(v) => *v,
            None => need("xllcenter")? - cellsize / 2.0,
        };
        let yll = match header.get("yllcorner") {
            Some(v) => *v,
            None => need("yllcenter")? - cellsize / 2.0,
        };
        let nodata = header.get("nodata_value").copied().unwrap_or(-9999.0);
        let cells = body
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::parse(ctx, format!("bad cell value {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Raster::new(ncols, nrows, xll, yll, cellsize, nodata, cells, kind)
    }

    pub fn to_asc(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "ncols {}", self.ncols);
        let _ = writeln!(out, "nrows {}", self.nrows);
        let _ = writeln!(out, "xllcorner {}", self.xllcorner);
        let _ = writeln!(out, "yllcorner {}", self.yllcorner);
        let _ = writeln!(out, "cellsize {}", self.cellsize);
        let _ = writeln!(out, "NODATA_value {}", self.nodata_value);
        for row in self.cells.chunks(self.ncols.max(1)) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZonalStats {
    pub sum: f64,
    pub mean: f64,
    pub valid_cell_count: usize,
    /// Set when no valid cell center falls inside the geometry.
    pub empty: bool,
}

/// Sum, mean and count of valid cells whose centers lie inside `geometry`.
pub fn zonal_stats(raster: &Raster, geometry: &Geometry) -> ZonalStats {
    let (sum, count) = raster
        .values_inside(geometry)
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if count == 0 {
        return ZonalStats {
            sum: 0.0,
            mean: 0.0,
            valid_cell_count: 0,
            empty: true,
        };
    }
    ZonalStats {
        sum,
        mean: sum / count as f64,
        valid_cell_count: count,
        empty: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassRatio {
    pub ratio: f64,
    pub class_cells: usize,
    pub valid_cells: usize,
    pub empty: bool,
}

/// Share of valid cells inside `geometry` that carry `class_code`.
pub fn class_ratio(raster: &Raster, geometry: &Geometry, class_code: i64) -> ClassRatio {
    let (hits, total) = raster
        .values_inside(geometry)
        .fold((0usize, 0usize), |(h, t), v| {
            (h + usize::from(v as i64 == class_code), t + 1)
        });
    ClassRatio {
        ratio: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
        class_cells: hits,
        valid_cells: total,
        empty: total == 0,
    }
}

/// Landcover legend: integer code to class name.
pub type Legend = BTreeMap<i64, String>;

pub fn read_legend(path: &Path) -> Result<Legend> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: BTreeMap<String, String> =
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
    raw.into_iter()
        .map(|(k, v)| {
            k.trim()
                .parse::<i64>()
                .map(|code| (code, v))
                .map_err(|_| Error::parse(path.display().to_string(), format!("legend key {k:?} is not an integer")))
        })
        .collect()
}
