//! Numeric feature matrices and z-scored feature vectors built from module
//! outputs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modules::{ModuleOutputTable, Value};

/// Raw numeric module outputs, one row per region. Missing values (a module
/// that produced nothing for a region) are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMatrix {
    pub dim_names: Vec<String>,
    pub region_ids: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl RawMatrix {
    /// Concatenates every numeric value in table order. Text results are
    /// skipped.
    pub fn from_table(table: &ModuleOutputTable) -> Self {
        let mut dim_names = Vec::new();
        for call in &table.calls {
            if !call.is_numeric() {
                continue;
            }
            for spec in call.value_specs() {
                dim_names.push(format!("{call}/{}", spec.name));
            }
        }
        let mut rows = Vec::with_capacity(table.regions.len());
        for id in &table.regions {
            let mut row = Vec::with_capacity(dim_names.len());
            for r in table.get(id).unwrap_or_default() {
                if !r.call.is_numeric() {
                    continue;
                }
                for spec in r.call.value_specs() {
                    let v = r.values.iter().find(|v| v.name == spec.name).and_then(|v| match v.value {
                        Value::Number(x) if x.is_finite() => Some(x),
                        _ => None,
                    });
                    row.push(v);
                }
            }
            rows.push(row);
        }
        RawMatrix {
            dim_names,
            region_ids: table.regions.clone(),
            rows,
        }
    }

    /// Keeps the named columns, in the given order.
    pub fn select(&self, names: &[String]) -> Result<RawMatrix> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.dim_names
                    .iter()
                    .position(|d| d == n)
                    .ok_or_else(|| Error::Validation(format!("no feature dimension {n}")))
            })
            .collect::<Result<_>>()?;
        Ok(RawMatrix {
            dim_names: names.to_vec(),
            region_ids: self.region_ids.clone(),
            rows: self.rows.iter().map(|r| idx.iter().map(|&i| r[i]).collect()).collect(),
        })
    }

    /// Stacks two matrices with identical columns.
    pub fn stack(&self, other: &RawMatrix) -> Result<RawMatrix> {
        if self.dim_names != other.dim_names {
            return Err(Error::Validation("cannot stack matrices with different columns".into()));
        }
        let mut out = self.clone();
        out.region_ids.extend(other.region_ids.iter().cloned());
        out.rows.extend(other.rows.iter().cloned());
        Ok(out)
    }
}

/// Column-wise z-scoring with population σ. Missing entries take the column
/// mean (z = 0). Columns with σ = 0 or no values are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardized {
    pub dim_names: Vec<String>,
    pub region_ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub dropped: Vec<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

pub fn standardize(m: &RawMatrix) -> Result<Standardized> {
    if m.rows.len() < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 regions to normalize features, got {}",
            m.rows.len()
        )));
    }
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    let (mut means, mut stds) = (Vec::new(), Vec::new());
    for (j, name) in m.dim_names.iter().enumerate() {
        let col: Vec<f64> = m.rows.iter().filter_map(|r| r[j]).collect();
        if col.is_empty() {
            dropped.push(name.clone());
            continue;
        }
        let n = m.rows.len() as f64;
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        // imputed entries sit at the mean and add nothing to the variance
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd <= 1e-12 * mean.abs().max(1.0) {
            log::warn!("dropping zero-variance feature {name}");
            dropped.push(name.clone());
            continue;
        }
        keep.push(j);
        means.push(mean);
        stds.push(sd);
    }
    let rows = m
        .rows
        .iter()
        .map(|r| {
            keep.iter()
                .enumerate()
                .map(|(k, &j)| r[j].map_or(0.0, |x| (x - means[k]) / stds[k]))
                .collect()
        })
        .collect();
    Ok(Standardized {
        dim_names: keep.iter().map(|&j| m.dim_names[j].clone()).collect(),
        region_ids: m.region_ids.clone(),
        rows,
        dropped,
        means,
        stds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub region_id: String,
    pub values: Vec<f64>,
}

/// Normalized vectors for every region over a shared dimension order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub dim_names: Vec<String>,
    pub vectors: BTreeMap<String, FeatureVector>,
    pub dropped: Vec<String>,
}

impl FeatureSpace {
    pub fn get(&self, region_id: &str) -> Option<&FeatureVector> {
        self.vectors.get(region_id)
    }

    pub fn from_standardized(s: Standardized) -> Self {
        let vectors = s
            .region_ids
            .into_iter()
            .zip(s.rows)
            .map(|(id, values)| {
                (
                    id.clone(),
                    FeatureVector {
                        region_id: id,
                        values,
                    },
                )
            })
            .collect();
        FeatureSpace {
            dim_names: s.dim_names,
            vectors,
            dropped: s.dropped,
        }
    }

    /// Source and target normalized together over their shared dimensions.
    /// Source ids are prefixed with `source_prefix` to keep the two apart.
    pub fn joint(source: &RawMatrix, target: &RawMatrix, source_prefix: &str) -> Result<Self> {
        let shared: Vec<String> = target
            .dim_names
            .iter()
            .filter(|d| source.dim_names.contains(d))
            .cloned()
            .collect();
        if shared.is_empty() {
            return Err(Error::Validation("source and target share no feature dimensions".into()));
        }
        let mut src = source.select(&shared)?;
        src.region_ids = src.region_ids.iter().map(|id| format!("{source_prefix}{id}")).collect();
        let tgt = target.select(&shared)?;
        Ok(Self::from_standardized(standardize(&src.stack(&tgt)?)?))
    }
}

/// Builds z-scored feature vectors from a complete module output table.
/// The address result is excluded.
pub fn build_feature_vectors(table: &ModuleOutputTable) -> Result<FeatureSpace> {
    table.validate()?;
    let s = standardize(&RawMatrix::from_table(table))?;
    Ok(FeatureSpace::from_standardized(s))
}

/// Negative squared Euclidean distance.
pub fn similarity(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    if a.values.len() != b.values.len() {
        return Err(Error::Validation(format!(
            "dimension mismatch: {} has {}, {} has {}",
            a.region_id,
            a.values.len(),
            b.region_id,
            b.values.len()
        )));
    }
    Ok(-a.values.iter().zip(&b.values).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
}
