#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use regionscope::geo::{Polygon, Raster, RasterKind};
use regionscope::modules::{LandcoverClass, ModuleCall, ModuleOutputTable, ModuleResult, NamedValue, Value};
use regionscope::region::{build_adjacency, Region, RegionDataset};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn read_fixture(name: &str) -> String {
    std::fs::read_to_string(fixture(name)).unwrap()
}

/// A numeric result carrying the registry descriptions for `call`.
pub fn numeric(call: ModuleCall, values: &[f64]) -> ModuleResult {
    let specs = call.value_specs();
    assert_eq!(specs.len(), values.len(), "{call}");
    ModuleResult {
        values: specs
            .iter()
            .zip(values)
            .map(|(s, v)| NamedValue {
                name: s.name.into(),
                description: s.description.clone(),
                value: Value::Number(*v),
            })
            .collect(),
        call,
        warning: None,
    }
}

pub fn address(text: &str) -> ModuleResult {
    let spec = &ModuleCall::Address.value_specs()[0];
    ModuleResult {
        call: ModuleCall::Address,
        values: vec![NamedValue {
            name: spec.name.into(),
            description: spec.description.clone(),
            value: Value::Text(text.into()),
        }],
        warning: None,
    }
}

pub fn ca(c: LandcoverClass) -> ModuleCall {
    ModuleCall::CountArea(c)
}

pub fn nb(inner: ModuleCall) -> ModuleCall {
    ModuleCall::neighbor(inner).unwrap()
}

/// The twelve calls selected for Malawi population, in paragraph order.
pub fn malawi_pop_calls() -> Vec<ModuleCall> {
    use LandcoverClass::*;
    vec![
        ModuleCall::Address,
        ca(Development),
        ca(Building),
        ca(Rangeland),
        ca(Agricultural),
        ModuleCall::NightLight,
        ModuleCall::Area,
        nb(ca(Development)),
        nb(ca(Building)),
        nb(ModuleCall::NightLight),
        nb(ca(Rangeland)),
        nb(ca(Agricultural)),
    ]
}

/// Values for one region in `malawi_pop_calls` order, address excluded;
/// nightlight contributes sum then mean.
pub struct SampleRegion {
    pub address: &'static str,
    pub values: [f64; 13],
    pub label: f64,
}

pub fn sample_regions() -> [SampleRegion; 4] {
    [
        SampleRegion {
            address: "Kabwabwa, Lilongwe, Central Region, MWI",
            values: [0.229, 0.042, 0.579, 0.014, 8182.944, 3.824, 402.647, 0.119, 0.003, 2651.147, 0.046, 0.717, 0.009],
            label: 1177613.0,
        },
        SampleRegion {
            address: "Mzimba, Northern Region, MWI",
            values: [0.096, 0.003, 0.706, 0.013, 780.235, 0.020, 10437.523, 0.045, 0.005, 3375.725, 0.031, 0.427, 0.006],
            label: 1030892.0,
        },
        SampleRegion {
            address: "Machinga, Southern Region, MWI",
            values: [0.087, 0.008, 0.677, 0.005, 347.965, 0.029, 3910.786, 0.066, 0.004, 2267.136, 0.041, 0.526, 0.004],
            label: 885670.0,
        },
        SampleRegion {
            address: "Dedza, Central Region, MWI",
            values: [0.114, 0.004, 0.664, 0.007, 456.095, 0.016, 4008.478, 0.084, 0.004, 4359.157, 0.040, 0.550, 0.004],
            label: f64::NAN,
        },
    ]
}

pub fn sample_results(r: &SampleRegion) -> Vec<ModuleResult> {
    let mut v = r.values.iter().copied();
    let mut out = Vec::new();
    for call in malawi_pop_calls() {
        if call == ModuleCall::Address {
            out.push(address(r.address));
            continue;
        }
        let n = call.value_specs().len();
        let vals: Vec<f64> = (0..n).map(|_| v.next().unwrap()).collect();
        out.push(numeric(call, &vals));
    }
    assert!(v.next().is_none());
    out
}

/// `cols × rows` grid of 1°×1° boxes starting at (`lon0`, `lat0`), ids
/// `R00`, `R01`, ... in row-major order.
pub fn grid_dataset(cols: usize, rows: usize, lon0: f64, lat0: f64) -> RegionDataset {
    let mut regions = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let x = lon0 + c as f64;
            let y = lat0 + r as f64;
            let id = format!("R{:02}", r * cols + c);
            regions.push(Region::new(id, None, Polygon::rect(x, y, x + 1.0, y + 1.0).into()).unwrap());
        }
    }
    build_adjacency(RegionDataset::new("Synthetica", regions).unwrap())
}

/// Raster covering the grid with `per_degree` cells per degree.
pub fn grid_raster(
    cols: usize,
    rows: usize,
    lon0: f64,
    lat0: f64,
    per_degree: usize,
    kind: RasterKind,
    mut cell: impl FnMut(usize, usize) -> f64,
) -> Raster {
    let nc = cols * per_degree;
    let nr = rows * per_degree;
    let mut cells = Vec::with_capacity(nc * nr);
    for r in 0..nr {
        for c in 0..nc {
            cells.push(cell(r, c));
        }
    }
    Raster::new(nc, nr, lon0, lat0, 1.0 / per_degree as f64, -9999.0, cells, kind).unwrap()
}

/// A module output table built straight from numbers: one call per column.
pub fn numeric_table(calls: &[ModuleCall], rows: &[(String, Vec<f64>)]) -> ModuleOutputTable {
    let mut results = BTreeMap::new();
    for (id, vals) in rows {
        let mut it = vals.iter().copied();
        let rs = calls
            .iter()
            .map(|c| {
                let n = c.value_specs().len();
                let v: Vec<f64> = (0..n).map(|_| it.next().unwrap()).collect();
                numeric(c.clone(), &v)
            })
            .collect();
        results.insert(id.clone(), rs);
    }
    ModuleOutputTable {
        calls: calls.to_vec(),
        regions: rows.iter().map(|(id, _)| id.clone()).collect(),
        results,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Paragraphs and feature space for a module table with default templates.
pub fn estimation_inputs(table: &ModuleOutputTable, phrase: &str) -> regionscope::estimator::EstimationInputs {
    let templates = regionscope::prompt::PromptTemplateSet::default();
    regionscope::estimator::EstimationInputs {
        paragraphs: regionscope::prompt::serialize_table(table, &templates).unwrap(),
        space: regionscope::features::build_feature_vectors(table).unwrap(),
        indicator_phrase: phrase.into(),
        templates,
    }
}
