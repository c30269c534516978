//! The ingested data directory: canonical copies of every input plus a
//! manifest, so later pipeline steps only need the directory path.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geo::{read_legend, Raster, RasterKind};
use crate::modules::{AddressResolver, Landcover, ReverseGeocoder, Sources};
use crate::region::{
    build_adjacency, load_gazetteer, load_labels, load_regions, load_targets, write_gazetteer, write_labels,
    write_regions, Indicator, LabelTable, RegionDataset, UnitKind,
};

pub const MANIFEST: &str = "dataset.json";
const REGIONS: &str = "regions.geojson";
const LABELS: &str = "labels.csv";
const GAZETTEER: &str = "gazetteer.csv";
const TARGETS: &str = "targets.csv";
const NIGHTLIGHT: &str = "nightlight.asc";
const LANDCOVER: &str = "landcover.asc";
const LEGEND: &str = "legend.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub country: String,
    pub snapshot: String,
    pub indicator: Indicator,
    pub regions: usize,
    pub labeled: usize,
    pub gazetteer: bool,
    pub targets: bool,
    pub nightlight: bool,
    pub landcover: bool,
    /// Hash of the raster, target and gazetteer inputs.
    pub source_version: String,
}

/// Paths handed to [`DataDir::ingest`].
#[derive(Debug, Clone, Default)]
pub struct IngestInputs {
    pub regions: PathBuf,
    pub labels: PathBuf,
    pub indicator: Option<Indicator>,
    pub gazetteer: Option<PathBuf>,
    pub targets: Option<PathBuf>,
    pub nightlight: Option<PathBuf>,
    pub landcover: Option<PathBuf>,
    pub legend: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct DataDir {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub dataset: RegionDataset,
    pub labels: LabelTable,
}

fn copy(from: &Path, to: &Path) -> Result<()> {
    std::fs::copy(from, to).map(|_| ()).map_err(|e| Error::io(from, e))
}

impl DataDir {
    /// Validates every input, builds adjacency, and writes canonical copies
    /// under `out`.
    pub fn ingest(inputs: &IngestInputs, out: &Path) -> Result<DataDir> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let dataset = build_adjacency(load_regions(&inputs.regions)?);
        dataset.validate()?;
        let indicator = match &inputs.indicator {
            Some(i) => i.clone(),
            None => Indicator::lookup("POP")?,
        };
        let labels = load_labels(&inputs.labels, &indicator.code, indicator.unit_kind)?;
        labels.check_ids(&dataset)?;
        let mut hasher = Sha256::new();
        if let Some(p) = &inputs.gazetteer {
            let g = load_gazetteer(p)?;
            write_gazetteer(&g, &out.join(GAZETTEER))?;
        }
        if let Some(p) = &inputs.targets {
            load_targets(p)?;
            copy(p, &out.join(TARGETS))?;
        }
        if let Some(p) = &inputs.nightlight {
            Raster::read_asc(p, RasterKind::Intensity)?;
            copy(p, &out.join(NIGHTLIGHT))?;
        }
        match (&inputs.landcover, &inputs.legend) {
            (Some(lc), Some(lg)) => {
                Raster::read_asc(lc, RasterKind::Categorical)?;
                read_legend(lg)?;
                copy(lc, &out.join(LANDCOVER))?;
                copy(lg, &out.join(LEGEND))?;
            }
            (None, None) => {}
            _ => return Err(Error::Argument("landcover and legend must be given together".into())),
        }
        for name in [GAZETTEER, TARGETS, NIGHTLIGHT, LANDCOVER, LEGEND] {
            let p = out.join(name);
            if p.exists() {
                hasher.update(name.as_bytes());
                hasher.update(std::fs::read(&p).map_err(|e| Error::io(&p, e))?);
            }
        }
        write_regions(&dataset, &out.join(REGIONS))?;
        write_labels(&labels, &out.join(LABELS))?;
        let manifest = Manifest {
            country: dataset.country.clone(),
            snapshot: dataset.snapshot_tag.clone(),
            indicator,
            regions: dataset.len(),
            labeled: labels.values.len(),
            gazetteer: inputs.gazetteer.is_some(),
            targets: inputs.targets.is_some(),
            nightlight: inputs.nightlight.is_some(),
            landcover: inputs.landcover.is_some(),
            source_version: hex::encode(&hasher.finalize()[..8]),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let mp = out.join(MANIFEST);
        std::fs::write(&mp, text).map_err(|e| Error::io(&mp, e))?;
        Ok(DataDir {
            root: out.to_path_buf(),
            manifest,
            dataset,
            labels,
        })
    }

    pub fn open(root: &Path) -> Result<DataDir> {
        let mp = root.join(MANIFEST);
        let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::parse(mp.display().to_string(), e))?;
        let dataset = build_adjacency(load_regions(&root.join(REGIONS))?);
        let labels = load_labels(&root.join(LABELS), &manifest.indicator.code, manifest.indicator.unit_kind)?;
        Ok(DataDir {
            root: root.to_path_buf(),
            manifest,
            dataset,
            labels,
        })
    }

    pub fn unit_kind(&self) -> UnitKind {
        self.manifest.indicator.unit_kind
    }

    pub fn nightlight(&self) -> Result<Option<Raster>> {
        let p = self.root.join(NIGHTLIGHT);
        if !p.exists() {
            return Ok(None);
        }
        Raster::read_asc(&p, RasterKind::Intensity).map(Some)
    }

    /// Loads every data source present in the directory.
    pub fn sources(&self, geocoder: Option<Arc<dyn ReverseGeocoder>>) -> Result<Sources> {
        let gp = self.root.join(GAZETTEER);
        let gazetteer = if gp.exists() { load_gazetteer(&gp)? } else { Default::default() };
        let tp = self.root.join(TARGETS);
        let lp = self.root.join(LANDCOVER);
        let landcover = if lp.exists() {
            Some(Landcover {
                raster: Raster::read_asc(&lp, RasterKind::Categorical)?,
                legend: read_legend(&self.root.join(LEGEND))?,
            })
        } else {
            None
        };
        Ok(Sources {
            address: AddressResolver::new(gazetteer, geocoder),
            nightlight: self.nightlight()?,
            landcover,
            targets: if tp.exists() { load_targets(&tp)? } else { Vec::new() },
            version: self.manifest.source_version.clone(),
        })
    }
}
