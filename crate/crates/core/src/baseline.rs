//! Non-LLM baselines: nightlight proxy, least-squares regression on module
//! outputs, and the first principal component.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{standardize, RawMatrix};
use crate::geo::{zonal_stats, Raster};
use crate::region::{RegionDataset, UnitKind};

/// Zonal mean for ratio indicators, zonal sum for counts.
pub fn nightlight_feature(dataset: &RegionDataset, raster: &Raster, unit_kind: UnitKind) -> Vec<(String, f64)> {
    dataset
        .regions
        .iter()
        .map(|r| {
            let z = zonal_stats(raster, &r.geometry);
            let v = match unit_kind {
                UnitKind::Ratio => z.mean,
                UnitKind::Count => z.sum,
            };
            (r.id.clone(), v)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// True when the feature was constant over the training labels and the
    /// fit fell back to the label mean.
    pub degenerate: bool,
}

/// Univariate least squares of `y` on `x`.
pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Argument(format!("cannot fit {} features to {} labels", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx <= 1e-12 * mx.abs().max(1.0).powi(2) * n {
        return Ok(LineFit {
            slope: 0.0,
            intercept: my,
            degenerate: true,
        });
    }
    let slope = sxy / sxx;
    Ok(LineFit {
        slope,
        intercept: my - slope * mx,
        degenerate: false,
    })
}

/// Nightlight baseline. With no labels the feature itself is the score;
/// with labels a line is fit on them and applied to every region.
pub fn baseline_nightlight(feature: &[(String, f64)], labeled: &[(String, f64)]) -> Result<Vec<(String, f64)>> {
    if labeled.is_empty() {
        return Ok(feature.to_vec());
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (id, y) in labeled {
        let x = feature
            .iter()
            .find(|(r, _)| r == id)
            .ok_or_else(|| Error::Validation(format!("no nightlight value for labeled region {id}")))?;
        xs.push(x.1);
        ys.push(*y);
    }
    let fit = fit_line(&xs, &ys)?;
    if fit.degenerate {
        log::warn!("nightlight feature is constant over the labels; predicting the label mean");
    }
    Ok(feature.iter().map(|(id, x)| (id.clone(), fit.slope * x + fit.intercept)).collect())
}

/// Minimum-norm least squares via the SVD pseudoinverse.
pub fn min_norm_lstsq(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = smax * (x.nrows().max(x.ncols()) as f64) * f64::EPSILON;
    let pinv = svd.pseudo_inverse(eps).map_err(|e| Error::Estimation(e.to_string()))?;
    Ok(pinv * y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsModel {
    pub dim_names: Vec<String>,
    /// Intercept first, then one coefficient per standardized feature.
    pub coefficients: Vec<f64>,
    pub predictions: Vec<(String, f64)>,
}

/// Least squares on z-scored module outputs plus an intercept, fit on the
/// labeled regions and applied to all.
pub fn baseline_ols(matrix: &RawMatrix, labeled: &[(String, f64)]) -> Result<OlsModel> {
    if labeled.is_empty() {
        return Err(Error::Argument("regression needs at least one labeled region".into()));
    }
    let z = standardize(matrix)?;
    let d = z.dim_names.len() + 1;
    let design = |row: &[f64]| std::iter::once(1.0).chain(row.iter().copied()).collect::<Vec<f64>>();
    let mut train = Vec::with_capacity(labeled.len() * d);
    let mut ys = Vec::with_capacity(labeled.len());
    for (id, y) in labeled {
        let i = z
            .region_ids
            .iter()
            .position(|r| r == id)
            .ok_or_else(|| Error::Validation(format!("labeled region {id} has no module outputs")))?;
        train.extend(design(&z.rows[i]));
        ys.push(*y);
    }
    let x = DMatrix::from_row_slice(labeled.len(), d, &train);
    let beta = min_norm_lstsq(&x, &DVector::from_vec(ys))?;
    let predictions = z
        .region_ids
        .iter()
        .zip(&z.rows)
        .map(|(id, row)| {
            let p: f64 = design(row).iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            (id.clone(), p)
        })
        .collect();
    Ok(OlsModel {
        dim_names: z.dim_names,
        coefficients: beta.iter().copied().collect(),
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub dim_names: Vec<String>,
    pub eigenvalue: f64,
    /// Unit-length loading vector. Sign is arbitrary.
    pub component: Vec<f64>,
    pub iterations: usize,
    pub scores: Vec<(String, f64)>,
}

pub const PCA_TOLERANCE: f64 = 1e-9;
const PCA_MAX_ITERATIONS: usize = 100_000;

/// Leading eigenpair of a symmetric positive semi-definite matrix by power
/// iteration, stopping when the Rayleigh quotient changes by at most
/// `tol` relative and the unit vector moves by at most `tol`.
pub fn power_iteration(c: &DMatrix<f64>, tol: f64) -> (f64, DVector<f64>, usize) {
    let n = c.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut v = DVector::from_fn(n, |_, _| rng.random::<f64>() + 0.5);
    v.normalize_mut();
    let mut lambda = v.dot(&(c * &v));
    for it in 1..=PCA_MAX_ITERATIONS {
        let w = c * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return (0.0, v, it);
        }
        let w = w / norm;
        let step = (&w - &v).norm();
        v = w;
        let next = v.dot(&(c * &v));
        if (next - lambda).abs() <= tol * next.abs() && step <= tol {
            return (next, v, it);
        }
        lambda = next;
    }
    log::warn!("power iteration hit the iteration cap");
    (lambda, v, PCA_MAX_ITERATIONS)
}

/// First principal component scores of the z-scored module matrix.
pub fn baseline_pca(matrix: &RawMatrix) -> Result<PcaModel> {
    let z = standardize(matrix)?;
    if z.dim_names.is_empty() {
        return Err(Error::Validation("no varying numeric features for PCA".into()));
    }
    let n = z.rows.len();
    let d = z.dim_names.len();
    let x = DMatrix::from_row_iterator(n, d, z.rows.iter().flatten().copied());
    let cov = x.transpose() * &x / n as f64;
    let (eigenvalue, v, iterations) = power_iteration(&cov, PCA_TOLERANCE);
    let s = &x * &v;
    Ok(PcaModel {
        dim_names: z.dim_names,
        eigenvalue,
        component: v.iter().copied().collect(),
        iterations,
        scores: z.region_ids.into_iter().zip(s.iter().copied()).collect(),
    })
}
