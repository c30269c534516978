mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use common::*;
use regionscope::geo::{LonLat, Polygon, Raster, RasterKind};
use regionscope::modules::{
    count_area, evaluate, extract_all, get_address, get_aggregate_neighbor_info, get_area, get_night_light,
    AddressResolver, Landcover, LandcoverClass, ModuleCache, ModuleCall, ReverseGeocoder, Sources, Value,
};
use regionscope::prompt::{
    build_estimation_prompt, build_selection_prompt, default_catalog, format_number, serialize_region,
    PromptTemplateSet,
};
use regionscope::region::{build_adjacency, load_gazetteer, load_regions, Region, RegionDataset};

#[test]
fn selection_prompt_matches_golden() {
    let p = build_selection_prompt("population", "Malawi", &default_catalog(), &PromptTemplateSet::default()).unwrap();
    assert_eq!(p, read_fixture("golden/selection_prompt_malawi_pop.txt"));
}

#[test]
fn estimation_prompt_matches_golden() {
    let t = PromptTemplateSet::default();
    let regions = sample_regions();
    let paragraphs: Vec<String> = regions
        .iter()
        .map(|r| serialize_region(&sample_results(r), &t).unwrap())
        .collect();
    let demos: Vec<(String, f64)> = paragraphs[..3]
        .iter()
        .cloned()
        .zip(regions[..3].iter().map(|r| r.label))
        .collect();
    let p = build_estimation_prompt(&paragraphs[3], &demos, "population", &t);
    assert_eq!(p, read_fixture("golden/estimation_prompt_malawi_pop.txt"));
}

#[test]
fn kabwabwa_paragraph_opening() {
    let p = serialize_region(&sample_results(&sample_regions()[0]), &PromptTemplateSet::default()).unwrap();
    assert!(p.starts_with(
        "full address of the given location is Kabwabwa, Lilongwe, Central Region, MWI. Land cover ratio of development is 0.229."
    ));
}

#[test]
fn single_area_sentence() {
    let p = serialize_region(&[numeric(ModuleCall::Area, &[402.647])], &PromptTemplateSet::default()).unwrap();
    assert_eq!(p, "area of region (km$^2$) of the given location is 402.647.");
}

// Synthetic stand-in for the Kabwabwa district: a lon/lat box whose
// spherical area rounds to 402.647 km², with rasters aligned to it.
const LON0: f64 = 33.70;
const LAT0: f64 = -14.00;
const DLAT: f64 = 0.1448093;
const DLON: f64 = 1.6 * DLAT;

fn kabwabwa() -> RegionDataset {
    let a = Region::new("MW101", Some("Kabwabwa".into()), Polygon::rect(LON0, LAT0, LON0 + DLON, LAT0 + DLAT).into())
        .unwrap();
    let b = Region::new(
        "MW102",
        Some("East".into()),
        Polygon::rect(LON0 + DLON, LAT0, LON0 + 2.0 * DLON, LAT0 + DLAT).into(),
    )
    .unwrap();
    build_adjacency(RegionDataset::new("Malawi", vec![a, b]).unwrap())
}

fn kabwabwa_nightlight() -> Raster {
    // 64 x 40 cells over the box: 420 nodata, 2139 cells at 3.824, one at 3.408
    let mut cells = vec![3.824; 64 * 40];
    for c in cells.iter_mut().take(420) {
        *c = -1.0;
    }
    cells[1000] = 3.408;
    Raster::new(64, 40, LON0, LAT0, DLAT / 40.0, -1.0, cells, RasterKind::Intensity).unwrap()
}

fn kabwabwa_landcover() -> Landcover {
    // 80 x 25 cells: the left 40 columns cover MW101, the right 40 MW102
    let legend = [(1, "development"), (2, "building"), (3, "rangeland"), (4, "agricultural"), (5, "tree")]
        .iter()
        .map(|(k, v)| (*k as i64, v.to_string()))
        .collect();
    let mut left = Vec::new();
    left.extend(std::iter::repeat_n(1.0, 229));
    left.extend(std::iter::repeat_n(2.0, 42));
    left.extend(std::iter::repeat_n(3.0, 579));
    left.extend(std::iter::repeat_n(4.0, 14));
    left.extend(std::iter::repeat_n(5.0, 1000 - 229 - 42 - 579 - 14));
    let mut right = vec![5.0; 1000];
    for c in right.iter_mut().take(119) {
        *c = 1.0;
    }
    let mut cells = Vec::with_capacity(2000);
    for row in 0..25 {
        cells.extend_from_slice(&left[row * 40..(row + 1) * 40]);
        cells.extend_from_slice(&right[row * 40..(row + 1) * 40]);
    }
    Landcover {
        raster: Raster::new(80, 25, LON0, LAT0, DLAT / 25.0, 0.0, cells, RasterKind::Categorical).unwrap(),
        legend,
    }
}

#[test]
fn kabwabwa_module_values() {
    let ds = kabwabwa();
    let r = ds.region("MW101").unwrap();
    assert_eq!(ds.neighbors("MW101").count(), 1);

    let area = get_area(r).unwrap();
    assert_eq!(format_number(area.number("area").unwrap()), "402.647");

    let nl = get_night_light(r, &kabwabwa_nightlight());
    assert_eq!(format_number(nl.number("sum").unwrap()), "8182.944");
    assert_eq!(format_number(nl.number("mean").unwrap()), "3.824");

    let lc = kabwabwa_landcover();
    let ratio = |c| count_area(r, &lc, c).number("ratio").unwrap();
    assert_eq!(format_number(ratio(LandcoverClass::Development)), "0.229");
    assert_eq!(format_number(ratio(LandcoverClass::Building)), "0.042");
    assert_eq!(format_number(ratio(LandcoverClass::Rangeland)), "0.579");
    assert_eq!(format_number(ratio(LandcoverClass::Agricultural)), "0.014");

    let sources = Sources {
        landcover: Some(lc),
        ..Default::default()
    };
    let n = get_aggregate_neighbor_info(r, &ds, &ca(LandcoverClass::Development), &sources).unwrap();
    assert_eq!(format_number(n.number("ratio").unwrap()), "0.119");
    assert_eq!(n.description(), "Land cover ratio of development in the neighboring region(s)");
}

#[test]
fn kabwabwa_address_from_gazetteer() {
    let g = load_gazetteer(&fixture("gazetteer_kabwabwa.csv")).unwrap();
    let ds = kabwabwa();
    let res = get_address(ds.region("MW101").unwrap(), &AddressResolver::new(g, None));
    assert_eq!(res.values[0].value, Value::Text("Kabwabwa, Lilongwe, Central Region, MWI".into()));
    // no entry and no geocoder: empty result with a warning, no error
    let miss = get_address(ds.region("MW102").unwrap(), &AddressResolver::new(Default::default(), None));
    assert!(miss.values.is_empty() && miss.warning.is_some());
}

struct CountingGeocoder(AtomicUsize);

impl ReverseGeocoder for CountingGeocoder {
    fn reverse(&self, _: LonLat) -> regionscope::Result<String> {
        self.0.fetch_add(1, Ordering::SeqCst);
        Ok("X".into())
    }
}

#[test]
fn geocoder_fallback_is_cached() {
    let ds = kabwabwa();
    let g = Arc::new(CountingGeocoder(AtomicUsize::new(0)));
    let resolver = AddressResolver::new(Default::default(), Some(g.clone()));
    let r = ds.region("MW102").unwrap();
    for _ in 0..3 {
        assert_eq!(get_address(r, &resolver).values[0].value, Value::Text("X".into()));
    }
    assert_eq!(g.0.load(Ordering::SeqCst), 1);
}

fn malawi_sources() -> Sources {
    use regionscope::geo::read_legend;
    Sources {
        address: AddressResolver::new(load_gazetteer(&fixture("malawi_gazetteer.csv")).unwrap(), None),
        nightlight: Some(Raster::read_asc(&fixture("malawi_nightlight.asc"), RasterKind::Intensity).unwrap()),
        landcover: Some(Landcover {
            raster: Raster::read_asc(&fixture("malawi_landcover.asc"), RasterKind::Categorical).unwrap(),
            legend: read_legend(&fixture("legend.json")).unwrap(),
        }),
        targets: regionscope::region::load_targets(&fixture("malawi_targets.csv")).unwrap(),
        version: "fixture".into(),
    }
}

#[test]
fn malawi_twelve_modules_per_region() {
    let ds = build_adjacency(load_regions(&fixture("malawi_districts.geojson")).unwrap());
    let text = read_fixture("malawi_districts.geojson");
    let features = text.matches("\"Feature\"").count();
    assert_eq!(ds.len(), features);
    assert_eq!(ds.len(), 28);
    let calls = malawi_pop_calls();
    let dir = tempfile::tempdir().unwrap();
    let cache = ModuleCache::new(dir.path());
    let sources = malawi_sources();
    let table = extract_all(&ds, &calls, &sources, Some(&cache)).unwrap();
    for id in &table.regions {
        assert_eq!(table.get(id).unwrap().len(), 12);
    }
    let computed = cache.misses();
    assert_eq!(computed, 28 * 12);
    let again = extract_all(&ds, &calls, &sources, Some(&cache)).unwrap();
    assert_eq!(cache.misses(), computed);
    assert_eq!(cache.hits(), 28 * 12);
    assert_eq!(again.to_json(), table.to_json());
    // every paragraph renders
    let t = PromptTemplateSet::default();
    for id in &table.regions {
        let p = serialize_region(table.get(id).unwrap(), &t).unwrap();
        assert!(p.starts_with("full address of the given location is "), "{p}");
    }
}

#[test]
fn distance_one_degree_north() {
    let ds = kabwabwa();
    let r = ds.region("MW101").unwrap();
    let c = r.centroid;
    let sources = Sources {
        targets: vec![regionscope::region::TargetEntity {
            class: regionscope::region::TargetClass::Airport,
            name: "north".into(),
            location: LonLat::new(c.lon, c.lat + 1.0),
        }],
        ..Default::default()
    };
    let d = evaluate(
        &ModuleCall::DistanceToNearest(regionscope::region::TargetClass::Airport),
        r,
        &ds,
        &sources,
    )
    .unwrap();
    let expected = 6371.0072 * 1f64.to_radians();
    assert!((d.number("distance").unwrap() - expected).abs() < 1e-6);
    assert!((expected - 111.19).abs() < 0.01);
}
