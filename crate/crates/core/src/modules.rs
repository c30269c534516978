//! Info modules: the registry of feature extractors run for every region.
//!
//! Each [`ModuleCall`] produces a [`ModuleResult`] carrying one or more named
//! values together with their descriptions. Descriptions are the `f_j` part of
//! a serialized sentence `"f_j is r_j."`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geo::{self, Legend, LonLat, Raster};
use crate::region::{Gazetteer, Region, RegionDataset, TargetClass, TargetEntity};

const NEIGHBOR_SUFFIX: &str = " in the neighboring region(s)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandcoverClass {
    Bareland,
    Rangeland,
    Development,
    Road,
    Tree,
    Water,
    Agricultural,
    Building,
}

impl LandcoverClass {
    /// Catalog order used in the module-selection prompt.
    pub const ALL: [LandcoverClass; 8] = [
        LandcoverClass::Bareland,
        LandcoverClass::Rangeland,
        LandcoverClass::Development,
        LandcoverClass::Road,
        LandcoverClass::Tree,
        LandcoverClass::Water,
        LandcoverClass::Agricultural,
        LandcoverClass::Building,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            LandcoverClass::Bareland => "bareland",
            LandcoverClass::Rangeland => "rangeland",
            LandcoverClass::Development => "development",
            LandcoverClass::Road => "road",
            LandcoverClass::Tree => "tree",
            LandcoverClass::Water => "water",
            LandcoverClass::Agricultural => "agricultural",
            LandcoverClass::Building => "building",
        }
    }
}

impl fmt::Display for LandcoverClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LandcoverClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Self::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Argument(format!("unknown landcover class {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Family {
    GetAddress,
    GetArea,
    GetNightLight,
    CountArea,
    GetDistanceToNearestTarget,
    GetAggregateNeighborInfo,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::GetAddress,
        Family::GetArea,
        Family::GetNightLight,
        Family::CountArea,
        Family::GetDistanceToNearestTarget,
        Family::GetAggregateNeighborInfo,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Family::GetAddress => "get_address",
            Family::GetArea => "get_area",
            Family::GetNightLight => "get_night_light",
            Family::CountArea => "count_area",
            Family::GetDistanceToNearestTarget => "get_distance_to_nearest_target",
            Family::GetAggregateNeighborInfo => "get_aggregate_neighbor_info",
        }
    }

    pub fn from_name(name: &str) -> Option<Family> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }
}

/// A selected module invocation.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModuleCall {
    Address,
    Area,
    NightLight,
    CountArea(LandcoverClass),
    DistanceToNearest(TargetClass),
    Neighbor(Box<ModuleCall>),
}

impl ModuleCall {
    /// Wraps `inner` in neighbor aggregation, rejecting non-numeric or nested inners.
    pub fn neighbor(inner: ModuleCall) -> Result<ModuleCall> {
        match inner {
            ModuleCall::Address | ModuleCall::Neighbor(_) => Err(Error::Argument(format!(
                "{inner} cannot be aggregated over neighbors"
            ))),
            other => Ok(ModuleCall::Neighbor(Box::new(other))),
        }
    }

    pub fn family(&self) -> Family {
        match self {
            ModuleCall::Address => Family::GetAddress,
            ModuleCall::Area => Family::GetArea,
            ModuleCall::NightLight => Family::GetNightLight,
            ModuleCall::CountArea(_) => Family::CountArea,
            ModuleCall::DistanceToNearest(_) => Family::GetDistanceToNearestTarget,
            ModuleCall::Neighbor(_) => Family::GetAggregateNeighborInfo,
        }
    }

    pub fn class_arg(&self) -> Option<&'static str> {
        match self {
            ModuleCall::CountArea(c) => Some(c.as_str()),
            ModuleCall::DistanceToNearest(t) => Some(t.as_str()),
            _ => None,
        }
    }

    pub fn inner(&self) -> Option<&ModuleCall> {
        match self {
            ModuleCall::Neighbor(inner) => Some(inner),
            _ => None,
        }
    }

    pub fn is_numeric(&self) -> bool {
        !matches!(self, ModuleCall::Address)
    }

    /// Every call the registry can run, neighbor variants included.
    pub fn all() -> Vec<ModuleCall> {
        let mut base = vec![ModuleCall::Address, ModuleCall::Area, ModuleCall::NightLight];
        base.extend(LandcoverClass::ALL.into_iter().map(ModuleCall::CountArea));
        base.extend(TargetClass::ALL.into_iter().map(ModuleCall::DistanceToNearest));
        let neighbors: Vec<ModuleCall> = base
            .iter()
            .filter(|c| c.is_numeric())
            .map(|c| ModuleCall::Neighbor(Box::new(c.clone())))
            .collect();
        base.extend(neighbors);
        base
    }

    /// `(value name, description, aggregation)` for each value this call yields.
    pub fn value_specs(&self) -> Vec<ValueSpec> {
        let spec = |name: &'static str, description: String, aggregation| ValueSpec {
            name,
            description,
            aggregation,
        };
        match self {
            ModuleCall::Address => vec![spec(
                "address",
                "full address of the given location".into(),
                Aggregation::Mean,
            )],
            ModuleCall::Area => vec![spec(
                "area",
                "area of region (km$^2$) of the given location".into(),
                Aggregation::Mean,
            )],
            ModuleCall::NightLight => vec![
                spec("sum", "Sum of nightlight intensity".into(), Aggregation::Total),
                spec("mean", "Average nightlight intensity".into(), Aggregation::Mean),
            ],
            ModuleCall::CountArea(c) => vec![spec(
                "ratio",
                format!("Land cover ratio of {c}"),
                Aggregation::Mean,
            )],
            ModuleCall::DistanceToNearest(t) => vec![spec(
                "distance",
                format!("distance (km) from the given location to the nearest {t}"),
                Aggregation::Mean,
            )],
            ModuleCall::Neighbor(inner) => inner
                .value_specs()
                .into_iter()
                .map(|mut s| {
                    s.description.push_str(NEIGHBOR_SUFFIX);
                    s
                })
                .collect(),
        }
    }
}

impl fmt::Display for ModuleCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModuleCall::Neighbor(inner) => write!(f, "{}({inner})", self.family().name()),
            other => match other.class_arg() {
                Some(c) => write!(f, "{}:{c}", other.family().name()),
                None => f.write_str(other.family().name()),
            },
        }
    }
}

impl FromStr for ModuleCall {
    type Err = Error;

    /// Parses the canonical form produced by `Display`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Argument(format!("invalid module call {s:?}"));
        if let Some(rest) = s.strip_prefix(Family::GetAggregateNeighborInfo.name()) {
            let inner = rest
                .strip_prefix('(')
                .and_then(|r| r.strip_suffix(')'))
                .ok_or_else(bad)?;
            return ModuleCall::neighbor(inner.parse()?);
        }
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let family = Family::from_name(name).ok_or_else(bad)?;
        match (family, arg) {
            (Family::GetAddress, None) => Ok(ModuleCall::Address),
            (Family::GetArea, None) => Ok(ModuleCall::Area),
            (Family::GetNightLight, None) => Ok(ModuleCall::NightLight),
            (Family::CountArea, Some(c)) => Ok(ModuleCall::CountArea(c.parse()?)),
            (Family::GetDistanceToNearestTarget, Some(t)) => Ok(ModuleCall::DistanceToNearest(t.parse()?)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for ModuleCall {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModuleCall {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// How a value combines across neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Total,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValueSpec {
    pub name: &'static str,
    pub description: String,
    pub aggregation: Aggregation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Number(f64),
    Text(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Number(v) => Some(*v),
            Value::Text(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedValue {
    pub name: String,
    pub description: String,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleResult {
    pub call: ModuleCall,
    /// Empty when the module could not produce a value; see `warning`.
    pub values: Vec<NamedValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl ModuleResult {
    fn numbers(call: &ModuleCall, numbers: &[f64], warning: Option<String>) -> Self {
        let values = call
            .value_specs()
            .into_iter()
            .zip(numbers)
            .map(|(spec, &v)| NamedValue {
                name: spec.name.into(),
                description: spec.description,
                value: Value::Number(v),
            })
            .collect();
        ModuleResult {
            call: call.clone(),
            values,
            warning,
        }
    }

    fn missing(call: &ModuleCall, warning: String) -> Self {
        ModuleResult {
            call: call.clone(),
            values: Vec::new(),
            warning: Some(warning),
        }
    }

    pub fn is_numeric(&self) -> bool {
        self.call.is_numeric()
    }

    /// The first value's description (`f_j`).
    pub fn description(&self) -> String {
        self.call
            .value_specs()
            .into_iter()
            .next()
            .map(|s| s.description)
            .unwrap_or_default()
    }

    pub fn number(&self, name: &str) -> Option<f64> {
        self.values
            .iter()
            .find(|v| v.name == name)
            .and_then(|v| v.value.as_f64())
    }
}

pub trait ReverseGeocoder: Send + Sync {
    fn reverse(&self, location: LonLat) -> Result<String>;
}

/// Reverse geocoder speaking the Nominatim `/reverse` JSON protocol.
pub struct HttpGeocoder {
    pub base_url: String,
    agent: ureq::Agent,
}

impl HttpGeocoder {
    pub fn new(base_url: impl Into<String>) -> Self {
        HttpGeocoder {
            base_url: base_url.into(),
            agent: ureq::Agent::new_with_defaults(),
        }
    }
}

impl ReverseGeocoder for HttpGeocoder {
    fn reverse(&self, location: LonLat) -> Result<String> {
        let url = format!(
            "{}/reverse?format=json&lat={}&lon={}",
            self.base_url.trim_end_matches('/'),
            location.lat,
            location.lon
        );
        let mut resp = self
            .agent
            .get(&url)
            .call()
            .map_err(|e| Error::Transport(format!("geocoder: {e}")))?;
        let body: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Transport(format!("geocoder body: {e}")))?;
        body.get("display_name")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::Transport("geocoder response has no display_name".into()))
    }
}

/// Gazetteer lookup with a geocoder fallback; geocoder answers are memoized.
#[derive(Default)]
pub struct AddressResolver {
    pub gazetteer: Gazetteer,
    pub geocoder: Option<Arc<dyn ReverseGeocoder>>,
    cache: Mutex<HashMap<String, String>>,
}

impl AddressResolver {
    pub fn new(gazetteer: Gazetteer, geocoder: Option<Arc<dyn ReverseGeocoder>>) -> Self {
        AddressResolver {
            gazetteer,
            geocoder,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn resolve(&self, region: &Region) -> Result<String> {
        if let Some(a) = self.gazetteer.get(&region.id) {
            return Ok(a.clone());
        }
        if let Some(a) = self.cache.lock().unwrap().get(&region.id) {
            return Ok(a.clone());
        }
        let geocoder = self
            .geocoder
            .as_ref()
            .ok_or_else(|| Error::Module {
                region: region.id.clone(),
                message: "no gazetteer entry and no geocoder configured".into(),
            })?;
        let addr = geocoder.reverse(region.centroid)?;
        self.cache.lock().unwrap().insert(region.id.clone(), addr.clone());
        Ok(addr)
    }
}

/// Landcover raster with its code legend.
#[derive(Debug, Clone)]
pub struct Landcover {
    pub raster: Raster,
    pub legend: Legend,
}

impl Landcover {
    pub fn code_for(&self, class: LandcoverClass) -> Option<i64> {
        self.legend
            .iter()
            .find(|(_, name)| name.eq_ignore_ascii_case(class.as_str()))
            .map(|(code, _)| *code)
    }
}

/// Data sources the modules read from.
#[derive(Default)]
pub struct Sources {
    pub address: AddressResolver,
    pub nightlight: Option<Raster>,
    pub landcover: Option<Landcover>,
    pub targets: Vec<TargetEntity>,
    /// Mixed into cache keys; change it whenever a source changes.
    pub version: String,
}

pub fn get_address(region: &Region, resolver: &AddressResolver) -> ModuleResult {
    let call = ModuleCall::Address;
    match resolver.resolve(region) {
        Ok(addr) => {
            let spec = call.value_specs().remove(0);
            ModuleResult {
                call,
                values: vec![NamedValue {
                    name: spec.name.into(),
                    description: spec.description,
                    value: Value::Text(addr),
                }],
                warning: None,
            }
        }
        Err(e) => {
            log::warn!("address for {}: {e}", region.id);
            ModuleResult::missing(&call, e.to_string())
        }
    }
}

pub fn get_area(region: &Region) -> Result<ModuleResult> {
    let km2 = geo::spherical_polygon_area(&region.geometry).map_err(|e| Error::Module {
        region: region.id.clone(),
        message: e.to_string(),
    })?;
    Ok(ModuleResult::numbers(&ModuleCall::Area, &[km2], None))
}

pub fn get_night_light(region: &Region, raster: &Raster) -> ModuleResult {
    let z = geo::zonal_stats(raster, &region.geometry);
    let warning = z.empty.then(|| "no valid nightlight cells inside region".to_string());
    ModuleResult::numbers(&ModuleCall::NightLight, &[z.sum, z.mean], warning)
}

pub fn count_area(region: &Region, landcover: &Landcover, class: LandcoverClass) -> ModuleResult {
    let call = ModuleCall::CountArea(class);
    let Some(code) = landcover.code_for(class) else {
        return ModuleResult::numbers(&call, &[0.0], Some(format!("legend has no code for {class}")));
    };
    let r = geo::class_ratio(&landcover.raster, &region.geometry, code);
    let warning = r.empty.then(|| "no valid landcover cells inside region".to_string());
    ModuleResult::numbers(&call, &[r.ratio], warning)
}

pub fn get_distance_to_nearest_target(region: &Region, targets: &[TargetEntity], class: TargetClass) -> ModuleResult {
    let call = ModuleCall::DistanceToNearest(class);
    let nearest = targets
        .iter()
        .filter(|t| t.class == class)
        .map(|t| geo::haversine_distance(region.centroid, t.location))
        .min_by(f64::total_cmp);
    match nearest {
        Some(d) => ModuleResult::numbers(&call, &[d], None),
        None => {
            log::warn!("no {class} targets; omitting distance for {}", region.id);
            ModuleResult::missing(&call, format!("no targets of class {class}"))
        }
    }
}

pub fn get_aggregate_neighbor_info(
    region: &Region,
    dataset: &RegionDataset,
    inner: &ModuleCall,
    sources: &Sources,
) -> Result<ModuleResult> {
    let call = ModuleCall::neighbor(inner.clone())?;
    let specs = inner.value_specs();
    let mut per_value: Vec<Vec<f64>> = vec![Vec::new(); specs.len()];
    for n in dataset.neighbors(&region.id) {
        let r = evaluate(inner, n, dataset, sources)?;
        for (slot, spec) in per_value.iter_mut().zip(&specs) {
            if let Some(v) = r.number(spec.name) {
                slot.push(v);
            }
        }
    }
    if per_value.iter().all(Vec::is_empty) {
        return Ok(ModuleResult::numbers(
            &call,
            &vec![0.0; specs.len()],
            Some("region has no neighbors with values".into()),
        ));
    }
    let aggregated: Vec<f64> = per_value
        .iter()
        .zip(&specs)
        .map(|(vals, spec)| match (spec.aggregation, vals.len()) {
            (_, 0) => 0.0,
            (Aggregation::Total, _) => vals.iter().sum(),
            (Aggregation::Mean, n) => vals.iter().sum::<f64>() / n as f64,
        })
        .collect();
    Ok(ModuleResult::numbers(&call, &aggregated, None))
}

/// Runs one call for one region.
pub fn evaluate(call: &ModuleCall, region: &Region, dataset: &RegionDataset, sources: &Sources) -> Result<ModuleResult> {
    let missing = |what: &str| Error::Module {
        region: region.id.clone(),
        message: format!("{call} needs a {what} source"),
    };
    match call {
        ModuleCall::Address => Ok(get_address(region, &sources.address)),
        ModuleCall::Area => get_area(region),
        ModuleCall::NightLight => {
            let raster = sources.nightlight.as_ref().ok_or_else(|| missing("nightlight raster"))?;
            Ok(get_night_light(region, raster))
        }
        ModuleCall::CountArea(class) => {
            let lc = sources.landcover.as_ref().ok_or_else(|| missing("landcover raster"))?;
            Ok(count_area(region, lc, *class))
        }
        ModuleCall::DistanceToNearest(class) => Ok(get_distance_to_nearest_target(region, &sources.targets, *class)),
        ModuleCall::Neighbor(inner) => get_aggregate_neighbor_info(region, dataset, inner, sources),
    }
}

/// Per-region results, one per selected call, in call order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleOutputTable {
    pub calls: Vec<ModuleCall>,
    /// Region ids in dataset order.
    pub regions: Vec<String>,
    pub results: BTreeMap<String, Vec<ModuleResult>>,
}

impl ModuleOutputTable {
    pub fn validate(&self) -> Result<()> {
        for id in &self.regions {
            let rs = self
                .results
                .get(id)
                .ok_or_else(|| Error::Validation(format!("table has no results for {id}")))?;
            if rs.len() != self.calls.len() || rs.iter().zip(&self.calls).any(|(r, c)| &r.call != c) {
                return Err(Error::Validation(format!("results for {id} do not match the call list")));
            }
        }
        Ok(())
    }

    pub fn get(&self, region_id: &str) -> Option<&[ModuleResult]> {
        self.results.get(region_id).map(Vec::as_slice)
    }

    /// Keeps only the listed calls, in their table order.
    pub fn restrict(&self, keep: &[ModuleCall]) -> ModuleOutputTable {
        let mask: Vec<bool> = self.calls.iter().map(|c| keep.contains(c)).collect();
        ModuleOutputTable {
            calls: self.calls.iter().filter(|c| keep.contains(c)).cloned().collect(),
            regions: self.regions.clone(),
            results: self
                .results
                .iter()
                .map(|(id, rs)| {
                    let kept = rs.iter().zip(&mask).filter(|(_, m)| **m).map(|(r, _)| r.clone()).collect();
                    (id.clone(), kept)
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Self = serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        t.validate()?;
        Ok(t)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Flat `region_id,call_id,value_name,value` export, regions in dataset
    /// order and calls in table order.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e))?;
        let csv_err = |e: csv::Error| Error::parse(path.display().to_string(), e);
        w.write_record(["region_id", "call_id", "value_name", "value"]).map_err(csv_err)?;
        for id in &self.regions {
            for r in self.results.get(id).into_iter().flatten() {
                let call = r.call.to_string();
                for v in &r.values {
                    let value = match &v.value {
                        Value::Number(x) => x.to_string(),
                        Value::Text(s) => s.clone(),
                    };
                    w.write_record([id.as_str(), call.as_str(), v.name.as_str(), value.as_str()])
                        .map_err(csv_err)?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// On-disk result cache: one CSV per (dataset, call) under `dir`.
pub struct ModuleCache {
    dir: PathBuf,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRow {
    key: String,
    region_id: String,
    result: String,
}

impl ModuleCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ModuleCache {
            dir: dir.into(),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    fn file_for(&self, dataset: &RegionDataset, call: &ModuleCall) -> PathBuf {
        let slug = |s: &str| -> String {
            s.chars()
                .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
                .collect()
        };
        let ds = format!("{}_{}", slug(&dataset.country), slug(&dataset.snapshot_tag));
        self.dir.join(ds).join(format!("{}.csv", slug(&call.to_string())))
    }

    fn load(&self, path: &Path) -> Result<BTreeMap<String, (String, ModuleResult)>> {
        let mut out = BTreeMap::new();
        if !path.exists() {
            return Ok(out);
        }
        let ctx = path.display().to_string();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::parse(&ctx, e))?;
        for row in rdr.deserialize::<CacheRow>() {
            let row = row.map_err(|e| Error::parse(&ctx, e))?;
            let result: ModuleResult = serde_json::from_str(&row.result).map_err(|e| Error::parse(&ctx, e))?;
            out.insert(row.key, (row.region_id, result));
        }
        Ok(out)
    }

    fn store(&self, path: &Path, entries: &BTreeMap<String, (String, ModuleResult)>) -> Result<()> {
        let parent = path.parent().expect("cache file has a parent");
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let tmp = path.with_extension("csv.tmp");
        {
            let mut w = csv::Writer::from_path(&tmp).map_err(|e| Error::parse(tmp.display().to_string(), e))?;
            for (key, (region_id, result)) in entries {
                w.serialize(CacheRow {
                    key: key.clone(),
                    region_id: region_id.clone(),
                    result: serde_json::to_string(result).expect("result serializes"),
                })
                .map_err(|e| Error::parse(tmp.display().to_string(), e))?;
            }
            w.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

/// Content hash of everything a (region, call) result depends on.
pub fn cache_key(region: &Region, dataset: &RegionDataset, call: &ModuleCall, source_version: &str) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&region.geometry).expect("geometry serializes"));
    h.update(region.id.as_bytes());
    h.update(call.to_string().as_bytes());
    h.update(source_version.as_bytes());
    if matches!(call, ModuleCall::Neighbor(_)) {
        for n in dataset.neighbors(&region.id) {
            h.update(n.id.as_bytes());
            h.update(serde_json::to_vec(&n.geometry).expect("geometry serializes"));
        }
    }
    hex::encode(h.finalize())
}

/// Applies every call to every region, in dataset order.
///
/// Soft failures (no overlap, missing address) become warnings on the result;
/// hard failures are collected per region and abort the run.
pub fn extract_all(
    dataset: &RegionDataset,
    calls: &[ModuleCall],
    sources: &Sources,
    cache: Option<&ModuleCache>,
) -> Result<ModuleOutputTable> {
    let mut results: BTreeMap<String, Vec<ModuleResult>> =
        dataset.ids().map(|id| (id.to_string(), Vec::with_capacity(calls.len()))).collect();
    let mut diagnostics = Vec::new();
    for call in calls {
        let file = cache.map(|c| c.file_for(dataset, call));
        let mut entries = match (cache, &file) {
            (Some(c), Some(f)) => c.load(f)?,
            _ => BTreeMap::new(),
        };
        let mut dirty = false;
        for region in &dataset.regions {
            let key = cache_key(region, dataset, call, &sources.version);
            let result = match entries.get(&key) {
                Some((_, r)) if cache.is_some() => {
                    cache.unwrap().hits.fetch_add(1, Ordering::Relaxed);
                    r.clone()
                }
                _ => match evaluate(call, region, dataset, sources) {
                    Ok(r) => {
                        if let Some(c) = cache {
                            c.misses.fetch_add(1, Ordering::Relaxed);
                            entries.insert(key, (region.id.clone(), r.clone()));
                            dirty = true;
                        }
                        r
                    }
                    Err(e) => {
                        diagnostics.push(format!("{} / {call}: {e}", region.id));
                        continue;
                    }
                },
            };
            results.get_mut(&region.id).unwrap().push(result);
        }
        if let (Some(c), Some(f), true) = (cache, &file, dirty) {
            c.store(f, &entries)?;
        }
    }
    if !diagnostics.is_empty() {
        return Err(Error::Extraction(diagnostics));
    }
    let table = ModuleOutputTable {
        calls: calls.to_vec(),
        regions: dataset.ids().map(str::to_string).collect(),
        results,
    };
    table.validate()?;
    Ok(table)
}
