//! Region geometries, labels, gazetteers and POI tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::geo::{Geometry, LonLat, Polygon, Ring};

/// Vertices or edges closer than this (degrees) are considered touching.
pub const ADJACENCY_TOLERANCE_DEG: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: String,
    pub name: Option<String>,
    pub geometry: Geometry,
    pub centroid: LonLat,
}

impl Region {
    pub fn new(id: impl Into<String>, name: Option<String>, geometry: Geometry) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::Validation("region id must be non-empty".into()));
        }
        geometry
            .validate()
            .map_err(|e| Error::Validation(format!("region {id}: {e}")))?;
        let centroid = geometry.centroid();
        Ok(Region {
            id,
            name,
            geometry,
            centroid,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionDataset {
    pub country: String,
    pub snapshot_tag: String,
    pub regions: Vec<Region>,
    pub adjacency: BTreeMap<String, BTreeSet<String>>,
}

impl RegionDataset {
    pub fn new(country: impl Into<String>, regions: Vec<Region>) -> Result<Self> {
        let ds = RegionDataset {
            country: country.into(),
            snapshot_tag: String::new(),
            regions,
            adjacency: BTreeMap::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.regions.iter().map(|r| r.id.as_str())
    }

    pub fn region(&self, id: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.id == id)
    }

    pub fn neighbors(&self, id: &str) -> impl Iterator<Item = &Region> {
        self.adjacency
            .get(id)
            .into_iter()
            .flatten()
            .filter_map(|n| self.region(n))
    }

    pub fn validate(&self) -> Result<()> {
        if self.regions.len() < 2 {
            return Err(Error::Validation(format!(
                "dataset needs at least 2 regions, got {}",
                self.regions.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for r in &self.regions {
            if r.id.is_empty() {
                return Err(Error::Validation("empty region id".into()));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Validation(format!("duplicate region id {:?}", r.id)));
            }
        }
        for (a, ns) in &self.adjacency {
            if !seen.contains(a.as_str()) {
                return Err(Error::Validation(format!("adjacency key {a:?} is not a region")));
            }
            for b in ns {
                if a == b {
                    return Err(Error::Validation(format!("region {a:?} is its own neighbor")));
                }
                if !self.adjacency.get(b).is_some_and(|s| s.contains(a)) {
                    return Err(Error::Validation(format!("adjacency {a:?}->{b:?} is not symmetric")));
                }
            }
        }
        Ok(())
    }

    pub fn from_geojson_str(text: &str, context: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text).map_err(|e| Error::parse(context, e))?;
        if root.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
            return Err(Error::parse(context, "top level must be a FeatureCollection"));
        }
        let features = root
            .get("features")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::parse(context, "missing features array"))?;
        let mut regions = Vec::with_capacity(features.len());
        for (i, f) in features.iter().enumerate() {
            regions.push(parse_feature(f).map_err(|msg| {
                let id = f
                    .pointer("/properties/id")
                    .map(|v| v.to_string())
                    .unwrap_or_else(|| "<no id>".into());
                Error::parse(context, format!("feature #{i} (id {id}): {msg}"))
            })?);
        }
        let str_member = |k: &str| root.get(k).and_then(Value::as_str).unwrap_or_default().to_string();
        let mut ds = RegionDataset {
            country: str_member("country"),
            snapshot_tag: str_member("snapshot"),
            regions,
            adjacency: BTreeMap::new(),
        };
        ds.validate()?;
        ds.adjacency.clear();
        Ok(ds)
    }

    pub fn to_geojson(&self) -> Value {
        let features: Vec<Value> = self
            .regions
            .iter()
            .map(|r| {
                let mut props = serde_json::Map::new();
                props.insert("id".into(), json!(r.id));
                if let Some(name) = &r.name {
                    props.insert("name".into(), json!(name));
                }
                json!({
                    "type": "Feature",
                    "properties": props,
                    "geometry": geometry_to_geojson(&r.geometry),
                })
            })
            .collect();
        json!({
            "type": "FeatureCollection",
            "country": self.country,
            "snapshot": self.snapshot_tag,
            "features": features,
        })
    }
}

fn parse_ring(v: &Value) -> std::result::Result<Ring, String> {
    let pts = v.as_array().ok_or("ring is not an array")?;
    let ring = pts
        .iter()
        .map(|p| {
            let a = p.as_array().filter(|a| a.len() >= 2).ok_or("position needs [lon, lat]")?;
            let lon = a[0].as_f64().ok_or("longitude is not a number")?;
            let lat = a[1].as_f64().ok_or("latitude is not a number")?;
            Ok(LonLat::new(lon, lat))
        })
        .collect::<std::result::Result<Vec<_>, &str>>()?;
    let ring = Ring(ring);
    ring.validate().map_err(|e| e.to_string())?;
    Ok(ring)
}

fn parse_polygon(v: &Value) -> std::result::Result<Polygon, String> {
    let rings = v.as_array().ok_or("polygon coordinates are not an array")?;
    let mut it = rings.iter();
    let exterior = parse_ring(it.next().ok_or("polygon has no rings")?)?;
    let holes = it.map(parse_ring).collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Polygon { exterior, holes })
}

fn parse_feature(f: &Value) -> std::result::Result<Region, String> {
    let props = f.get("properties").ok_or("missing properties")?;
    let id = match props.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err("properties.id missing or not a string".into()),
    };
    let name = props.get("name").and_then(Value::as_str).map(str::to_string);
    let geom = f.get("geometry").ok_or("missing geometry")?;
    let coords = geom.get("coordinates").ok_or("geometry has no coordinates")?;
    let geometry = match geom.get("type").and_then(Value::as_str) {
        Some("Polygon") => Geometry::from(parse_polygon(coords)?),
        Some("MultiPolygon") => {
            let parts = coords
                .as_array()
                .ok_or("multipolygon coordinates are not an array")?
                .iter()
                .map(parse_polygon)
                .collect::<std::result::Result<Vec<_>, _>>()?;
            if parts.is_empty() {
                return Err("empty multipolygon".into());
            }
            Geometry::multi(parts)
        }
        other => return Err(format!("unsupported geometry type {other:?}")),
    };
    Region::new(id, name, geometry).map_err(|e| e.to_string())
}

fn geometry_to_geojson(g: &Geometry) -> Value {
    let poly = |p: &Polygon| -> Value {
        Value::Array(
            p.rings()
                .map(|r| Value::Array(r.0.iter().map(|c| json!([c.lon, c.lat])).collect()))
                .collect(),
        )
    };
    if g.multi || g.parts.len() > 1 {
        json!({"type": "MultiPolygon", "coordinates": g.parts.iter().map(poly).collect::<Vec<_>>()})
    } else {
        json!({"type": "Polygon", "coordinates": poly(&g.parts[0])})
    }
}

pub fn load_regions(path: &Path) -> Result<RegionDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RegionDataset::from_geojson_str(&text, &path.display().to_string())
}

pub fn write_regions(dataset: &RegionDataset, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&dataset.to_geojson()).expect("geojson serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn point_segment_dist2(p: LonLat, a: LonLat, b: LonLat) -> f64 {
    let (dx, dy) = (b.lon - a.lon, b.lat - a.lat);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.lon - a.lon) * dx + (p.lat - a.lat) * dy) / len2).clamp(0.0, 1.0)
    };
    let (x, y) = (a.lon + t * dx - p.lon, a.lat + t * dy - p.lat);
    x * x + y * y
}

fn orient(a: LonLat, b: LonLat, c: LonLat) -> f64 {
    (b.lon - a.lon) * (c.lat - a.lat) - (b.lat - a.lat) * (c.lon - a.lon)
}

fn segments_cross(a: LonLat, b: LonLat, c: LonLat, d: LonLat) -> bool {
    let (o1, o2) = (orient(a, b, c), orient(a, b, d));
    let (o3, o4) = (orient(c, d, a), orient(c, d, b));
    o1 * o2 < 0.0 && o3 * o4 < 0.0
}

fn segment_dist2(a: LonLat, b: LonLat, c: LonLat, d: LonLat) -> f64 {
    if segments_cross(a, b, c, d) {
        return 0.0;
    }
    point_segment_dist2(a, c, d)
        .min(point_segment_dist2(b, c, d))
        .min(point_segment_dist2(c, a, b))
        .min(point_segment_dist2(d, a, b))
}

/// True when the two boundaries share at least one point within `tol`.
pub fn boundaries_touch(a: &Geometry, b: &Geometry, tol: f64) -> bool {
    if !a.bbox().intersects(&b.bbox(), tol) {
        return false;
    }
    let tol2 = tol * tol;
    a.rings().flat_map(|r| r.edges()).any(|(p, q)| {
        b.rings()
            .flat_map(|r| r.edges())
            .any(|(s, t)| segment_dist2(p, q, s, t) <= tol2)
    })
}

/// Queen contiguity: any shared boundary point, corners included.
pub fn build_adjacency(mut dataset: RegionDataset) -> RegionDataset {
    let n = dataset.regions.len();
    let mut adj: BTreeMap<String, BTreeSet<String>> = dataset
        .regions
        .iter()
        .map(|r| (r.id.clone(), BTreeSet::new()))
        .collect();
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (&dataset.regions[i], &dataset.regions[j]);
            if boundaries_touch(&a.geometry, &b.geometry, ADJACENCY_TOLERANCE_DEG) {
                adj.get_mut(&a.id).unwrap().insert(b.id.clone());
                adj.get_mut(&b.id).unwrap().insert(a.id.clone());
            }
        }
    }
    dataset.adjacency = adj;
    dataset
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    Count,
    Ratio,
}

impl FromStr for UnitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "count" => Ok(UnitKind::Count),
            "ratio" => Ok(UnitKind::Ratio),
            _ => Err(Error::Argument(format!("unknown unit kind {s:?}"))),
        }
    }
}

/// One entry of the indicator vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Indicator {
    pub code: String,
    /// Phrase used inside prompts, e.g. "population".
    pub phrase: String,
    pub unit_kind: UnitKind,
}

impl Indicator {
    pub fn defaults() -> Vec<Indicator> {
        let mk = |code: &str, phrase: &str, unit_kind| Indicator {
            code: code.into(),
            phrase: phrase.into(),
            unit_kind,
        };
        vec![
            mk("POP", "population", UnitKind::Count),
            mk("ELP", "elderly population", UnitKind::Ratio),
            mk("HER", "highly educated population ratio", UnitKind::Ratio),
            mk("LPR", "labor force participation rate", UnitKind::Ratio),
            mk("GRDP", "regional GDP", UnitKind::Count),
        ]
    }

    pub fn lookup(code: &str) -> Result<Indicator> {
        Self::defaults()
            .into_iter()
            .find(|i| i.code.eq_ignore_ascii_case(code))
            .ok_or_else(|| Error::Argument(format!("unknown indicator {code:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTable {
    pub indicator: String,
    pub values: BTreeMap<String, f64>,
    pub unit_kind: UnitKind,
}

impl LabelTable {
    /// Builds a table, rescaling percent-style ratio inputs into [0, 1].
    pub fn new(indicator: impl Into<String>, mut values: BTreeMap<String, f64>, unit_kind: UnitKind) -> Result<Self> {
        let indicator = indicator.into();
        if unit_kind == UnitKind::Ratio && values.values().any(|&v| v > 1.5) {
            for v in values.values_mut() {
                *v /= 100.0;
            }
        }
        for (id, &v) in &values {
            let ok = match unit_kind {
                UnitKind::Count => v >= 0.0,
                UnitKind::Ratio => (0.0..=1.0).contains(&v),
            };
            if !v.is_finite() || !ok {
                return Err(Error::Validation(format!(
                    "label {v} for region {id} is out of range for a {unit_kind:?} indicator"
                )));
            }
        }
        Ok(LabelTable {
            indicator,
            values,
            unit_kind,
        })
    }

    pub fn check_ids(&self, dataset: &RegionDataset) -> Result<()> {
        match self.values.keys().find(|k| dataset.region(k).is_none()) {
            Some(k) => Err(Error::Validation(format!("label for unknown region {k:?}"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    region_id: String,
    indicator: String,
    value: f64,
}

/// Reads `region_id,indicator,value` rows for one indicator.
pub fn load_labels(path: &Path, indicator: &str, unit_kind: UnitKind) -> Result<LabelTable> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e))?;
    let mut values = BTreeMap::new();
    for row in rdr.deserialize::<LabelRow>() {
        let row = row.map_err(|e| Error::parse(path.display().to_string(), e))?;
        if row.indicator.eq_ignore_ascii_case(indicator) {
            values.insert(row.region_id, row.value);
        }
    }
    LabelTable::new(indicator, values, unit_kind)
}

/// Writes the table as `region_id,indicator,value` rows.
pub fn write_labels(labels: &LabelTable, path: &Path) -> Result<()> {
    let ctx = path.display().to_string();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(&ctx, e))?;
    w.write_record(["region_id", "indicator", "value"]).map_err(|e| Error::parse(&ctx, e))?;
    for (id, v) in &labels.values {
        w.write_record([id.as_str(), labels.indicator.as_str(), &v.to_string()])
            .map_err(|e| Error::parse(&ctx, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KShotSplit {
    pub labeled: Vec<(String, f64)>,
    pub unlabeled: Vec<String>,
    pub seed: u64,
}

impl KShotSplit {
    pub fn k(&self) -> usize {
        self.labeled.len()
    }
}

/// Draws `k` labeled regions uniformly without replacement.
///
/// Regions without a label are never drawn; the draw is over the labeled pool
/// in dataset order, so it is deterministic per (seed, dataset order).
pub fn split_kshot(dataset: &RegionDataset, labels: &LabelTable, k: usize, seed: u64) -> Result<KShotSplit> {
    let n = dataset.len();
    if k > n {
        return Err(Error::Argument(format!("k = {k} exceeds region count {n}")));
    }
    let mut pool: Vec<&str> = dataset.ids().filter(|id| labels.values.contains_key(*id)).collect();
    if pool.len() < k {
        return Err(Error::Argument(format!(
            "only {} labeled regions available for k = {k}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let chosen: BTreeSet<&str> = pool[..k].iter().copied().collect();
    let labeled = pool[..k]
        .iter()
        .map(|id| (id.to_string(), labels.values[*id]))
        .collect();
    let unlabeled = dataset
        .ids()
        .filter(|id| !chosen.contains(id))
        .map(str::to_string)
        .collect();
    Ok(KShotSplit {
        labeled,
        unlabeled,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetClass {
    Airport,
    Port,
}

impl TargetClass {
    pub const ALL: [TargetClass; 2] = [TargetClass::Airport, TargetClass::Port];

    pub fn as_str(&self) -> &'static str {
        match self {
            TargetClass::Airport => "airport",
            TargetClass::Port => "port",
        }
    }
}

impl fmt::Display for TargetClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Argument(format!("unknown target class {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetEntity {
    pub class: TargetClass,
    pub name: String,
    pub location: LonLat,
}

#[derive(Debug, Deserialize)]
struct TargetRow {
    class: String,
    name: String,
    lon: f64,
    lat: f64,
}

pub fn load_targets(path: &Path) -> Result<Vec<TargetEntity>> {
    let ctx = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::parse(&ctx, e))?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<TargetRow>() {
        let row = row.map_err(|e| Error::parse(&ctx, e))?;
        let location = LonLat::new(row.lon, row.lat);
        if !location.is_valid() {
            return Err(Error::Validation(format!("target {:?} has invalid coordinates", row.name)));
        }
        out.push(TargetEntity {
            class: row.class.parse()?,
            name: row.name,
            location,
        });
    }
    Ok(out)
}

pub type Gazetteer = BTreeMap<String, String>;

/// Reads `region_id,address` rows after a header line. Addresses may be
/// quoted or not; every field after the id is part of the address.
pub fn load_gazetteer(path: &Path) -> Result<Gazetteer> {
    let ctx = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::parse(&ctx, e))?;
    let mut out = Gazetteer::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::parse(&ctx, e))?;
        let id = row.get(0).ok_or_else(|| Error::parse(&ctx, "missing region_id"))?;
        if row.len() < 2 {
            return Err(Error::parse(&ctx, format!("missing address for {id}")));
        }
        let addr = row.iter().skip(1).collect::<Vec<_>>().join(",");
        out.insert(id.to_string(), addr);
    }
    Ok(out)
}

pub fn write_gazetteer(gazetteer: &Gazetteer, path: &Path) -> Result<()> {
    let ctx = path.display().to_string();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(&ctx, e))?;
    w.write_record(["region_id", "address"]).map_err(|e| Error::parse(&ctx, e))?;
    for (id, addr) in gazetteer {
        w.write_record([id, addr]).map_err(|e| Error::parse(&ctx, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(id: &str, x: f64, y: f64) -> Region {
        Region::new(id, None, Polygon::rect(x, y, x + 1.0, y + 1.0).into()).unwrap()
    }

    #[test]
    fn gazetteer_unquoted_commas() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        std::fs::write(&p, "region_id,address\nMW101,Kabwabwa, Lilongwe, Central Region, MWI\nMW102,\"Area 3, Lilongwe\"\n").unwrap();
        let g = load_gazetteer(&p).unwrap();
        assert_eq!(g["MW101"], "Kabwabwa, Lilongwe, Central Region, MWI");
        assert_eq!(g["MW102"], "Area 3, Lilongwe");
        let q = dir.path().join("h.csv");
        write_gazetteer(&g, &q).unwrap();
        assert_eq!(load_gazetteer(&q).unwrap(), g);
    }

    #[test]
    fn two_squares_centroids() {
        let ds = RegionDataset::new("X", vec![square("a", 0.0, 0.0), square("b", 1.0, 0.0)]).unwrap();
        assert_eq!(ds.len(), 2);
        assert!((ds.regions[0].centroid.lon - 0.5).abs() < 1e-9);
        assert!((ds.regions[1].centroid.lon - 1.5).abs() < 1e-9);
        assert!((ds.regions[1].centroid.lat - 0.5).abs() < 1e-9);
    }

    #[test]
    fn unclosed_ring_is_parse_error() {
        let text = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","properties":{"id":"a"},"geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,1]]]}},
            {"type":"Feature","properties":{"id":"b"},"geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,1],[0,0]]]}}]}"#;
        match RegionDataset::from_geojson_str(text, "t") {
            Err(Error::Parse { message, .. }) => assert!(message.contains("\"a\""), "{message}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = square("a", 0.0, 0.0);
        assert!(matches!(
            RegionDataset::new("X", vec![r.clone(), r]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn shared_edge_and_disjoint() {
        let ds = RegionDataset::new("X", vec![square("a", 0.0, 0.0), square("b", 1.0, 0.0), square("c", 3.0, 0.0)]).unwrap();
        let ds = build_adjacency(ds);
        assert!(ds.adjacency["a"].contains("b"));
        assert!(ds.adjacency["b"].contains("a"));
        assert!(ds.adjacency["c"].is_empty());
        ds.validate().unwrap();
    }

    #[test]
    fn jittered_edge_still_touches() {
        let a = square("a", 0.0, 0.0);
        let b = Region::new("b", None, Polygon::rect(1.0 + 5e-7, 0.0, 2.0, 1.0).into()).unwrap();
        let ds = build_adjacency(RegionDataset::new("X", vec![a, b]).unwrap());
        assert!(ds.adjacency["a"].contains("b"));
    }

    #[test]
    fn kshot_edges() {
        let regions: Vec<Region> = (0..6).map(|i| square(&format!("r{i}"), i as f64 * 2.0, 0.0)).collect();
        let ds = RegionDataset::new("X", regions).unwrap();
        let labels = LabelTable::new(
            "POP",
            ds.ids().enumerate().map(|(i, id)| (id.to_string(), i as f64)).collect(),
            UnitKind::Count,
        )
        .unwrap();
        let s0 = split_kshot(&ds, &labels, 0, 1).unwrap();
        assert!(s0.labeled.is_empty());
        assert_eq!(s0.unlabeled.len(), 6);
        let sn = split_kshot(&ds, &labels, 6, 1).unwrap();
        assert!(sn.unlabeled.is_empty());
        assert!(split_kshot(&ds, &labels, 7, 1).is_err());
        assert_eq!(split_kshot(&ds, &labels, 3, 9).unwrap(), split_kshot(&ds, &labels, 3, 9).unwrap());
    }

    #[test]
    fn kshot_skips_unlabeled_regions() {
        let regions: Vec<Region> = (0..4).map(|i| square(&format!("r{i}"), i as f64 * 2.0, 0.0)).collect();
        let ds = RegionDataset::new("X", regions).unwrap();
        let labels = LabelTable::new("POP", [("r1".to_string(), 3.0), ("r3".to_string(), 4.0)].into(), UnitKind::Count).unwrap();
        let s = split_kshot(&ds, &labels, 2, 5).unwrap();
        let ids: BTreeSet<_> = s.labeled.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, BTreeSet::from(["r1", "r3"]));
        assert!(split_kshot(&ds, &labels, 3, 5).is_err());
    }

    #[test]
    fn percent_ratios_rescaled() {
        let t = LabelTable::new("HER", [("a".to_string(), 57.3), ("b".to_string(), 12.0)].into(), UnitKind::Ratio).unwrap();
        assert!((t.values["a"] - 0.573).abs() < 1e-12);
        let t = LabelTable::new("HER", [("a".to_string(), 0.9)].into(), UnitKind::Ratio).unwrap();
        assert_eq!(t.values["a"], 0.9);
        assert!(LabelTable::new("POP", [("a".to_string(), -1.0)].into(), UnitKind::Count).is_err());
    }
}
