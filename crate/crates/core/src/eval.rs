//! Correlation metrics and multi-seed evaluation reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::estimator::{Prediction, Provenance};

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Argument(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Argument("correlation needs at least 2 points".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Argument("non-finite value in correlation input".into()));
    }
    Ok(())
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|x| *x == v[0])
}

/// Product-moment correlation. Constant input is `Error::Degenerate`.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    if is_constant(x) || is_constant(y) {
        return Err(Error::Degenerate("constant input".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Average (fractional) ranks, 1-based.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Setting {
    Unsupervised,
    Kshot { k: usize },
    Transfer { source: String },
}

impl Setting {
    pub fn absolute(&self) -> bool {
        matches!(self, Setting::Unsupervised)
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Setting::Unsupervised => f.write_str("unsupervised"),
            Setting::Kshot { k } => write!(f, "kshot:{k}"),
            Setting::Transfer { source } => write!(f, "transfer:{source}"),
        }
    }
}

impl FromStr for Setting {
    type Err = Error;

    /// `unsupervised`, `kshot:K` and `transfer:SOURCE`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "unsupervised" {
            return Ok(Setting::Unsupervised);
        }
        if let Some(k) = s.strip_prefix("kshot:") {
            let k = k
                .parse()
                .map_err(|_| Error::Argument(format!("bad shot count in {s:?}")))?;
            return Ok(Setting::Kshot { k });
        }
        if let Some(src) = s.strip_prefix("transfer:") {
            if !src.is_empty() {
                return Ok(Setting::Transfer { source: src.into() });
            }
        }
        Err(Error::Argument(format!(
            "unknown setting {s:?}; expected unsupervised, kshot:K or transfer:SOURCE"
        )))
    }
}

fn na_or_number<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_str("N/A"),
    }
}

mod na {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(match Raw::deserialize(d)? {
            Raw::Num(x) => Some(x),
            Raw::Text(t) if t == "N/A" => None,
            Raw::Text(t) => return Err(D::Error::custom(format!("expected a number or \"N/A\", got {t:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    #[serde(serialize_with = "na_or_number", deserialize_with = "na::deserialize")]
    pub pearson: Option<f64>,
    #[serde(serialize_with = "na_or_number", deserialize_with = "na::deserialize")]
    pub spearman: Option<f64>,
    pub n: usize,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub country: String,
    pub indicator: String,
    pub setting: Setting,
    pub per_seed: Vec<SeedResult>,
    #[serde(serialize_with = "na_or_number", deserialize_with = "na::deserialize")]
    pub mean_pearson: Option<f64>,
    #[serde(serialize_with = "na_or_number", deserialize_with = "na::deserialize")]
    pub std_pearson: Option<f64>,
    #[serde(serialize_with = "na_or_number", deserialize_with = "na::deserialize")]
    pub mean_spearman: Option<f64>,
    #[serde(serialize_with = "na_or_number", deserialize_with = "na::deserialize")]
    pub std_spearman: Option<f64>,
    /// Correlations are reported as absolute values.
    pub absolute: bool,
    /// Every seed was degenerate; the means are N/A.
    pub degenerate: bool,
}

impl EvalReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    Some((m, var.sqrt()))
}

/// One seed's predictions aligned with ground truth. Ground-truth rows (the
/// few-shot labels themselves) are left out; every other labeled region
/// must have a prediction.
pub fn score_seed(seed: u64, predictions: &[Prediction], labels: &BTreeMap<String, f64>, absolute: bool) -> Result<SeedResult> {
    let by_id: BTreeMap<&str, &Prediction> = predictions.iter().map(|p| (p.region_id.as_str(), p)).collect();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (id, y) in labels {
        match by_id.get(id.as_str()) {
            Some(p) if p.provenance == Provenance::GroundTruth => {}
            Some(p) => {
                xs.push(p.prediction);
                ys.push(*y);
            }
            None => return Err(Error::Validation(format!("seed {seed}: no prediction for labeled region {id}"))),
        }
    }
    let pair = pearson(&xs, &ys).and_then(|p| Ok((p, spearman(&xs, &ys)?)));
    match pair {
        Ok((p, s)) => {
            let f = |v: f64| if absolute { v.abs() } else { v };
            Ok(SeedResult {
                seed,
                pearson: Some(f(p)),
                spearman: Some(f(s)),
                n: xs.len(),
                degenerate: false,
            })
        }
        Err(Error::Degenerate(_)) => Ok(SeedResult {
            seed,
            pearson: None,
            spearman: None,
            n: xs.len(),
            degenerate: true,
        }),
        Err(e) => Err(e),
    }
}

/// Aggregates per-seed runs; degenerate seeds are excluded from the means.
pub fn evaluate(
    country: &str,
    indicator: &str,
    setting: Setting,
    runs: &[(u64, Vec<Prediction>)],
    labels: &BTreeMap<String, f64>,
) -> Result<EvalReport> {
    let absolute = setting.absolute();
    let per_seed = runs
        .iter()
        .map(|(seed, preds)| score_seed(*seed, preds, labels, absolute))
        .collect::<Result<Vec<_>>>()?;
    let ok: Vec<&SeedResult> = per_seed.iter().filter(|s| !s.degenerate).collect();
    let ps: Vec<f64> = ok.iter().filter_map(|s| s.pearson).collect();
    let ss: Vec<f64> = ok.iter().filter_map(|s| s.spearman).collect();
    let (mp, sp) = mean_std(&ps).unzip();
    let (ms, sss) = mean_std(&ss).unzip();
    Ok(EvalReport {
        country: country.into(),
        indicator: indicator.into(),
        setting,
        degenerate: ok.is_empty(),
        per_seed,
        mean_pearson: mp,
        std_pearson: sp,
        mean_spearman: ms,
        std_spearman: sss,
        absolute,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preds(vals: &[(&str, f64)]) -> Vec<Prediction> {
        vals.iter()
            .map(|(id, v)| Prediction {
                region_id: id.to_string(),
                indicator: "POP".into(),
                prediction: *v,
                provenance: Provenance::Loop,
            })
            .collect()
    }

    #[test]
    fn affine_and_reversed() {
        let x = [1.0, 2.0, 3.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let n: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &n).unwrap() + 1.0).abs() < 1e-12);
        let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        assert!((spearman(&x, &e).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_is_degenerate() {
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::Degenerate(_))));
        assert!(matches!(pearson(&[1.0], &[1.0]), Err(Error::Argument(_))));
    }

    #[test]
    fn tied_ranks() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn settings_parse() {
        assert_eq!("kshot:5".parse::<Setting>().unwrap(), Setting::Kshot { k: 5 });
        assert_eq!("unsupervised".parse::<Setting>().unwrap(), Setting::Unsupervised);
        assert!("transfer:".parse::<Setting>().is_err());
        assert_eq!(Setting::Transfer { source: "KOR".into() }.to_string(), "transfer:KOR");
    }

    #[test]
    fn absolute_and_na() {
        let labels: BTreeMap<String, f64> = [("a", 1.0), ("b", 2.0), ("c", 3.0)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        let neg = preds(&[("a", 3.0), ("b", 2.0), ("c", 1.0)]);
        let flat = preds(&[("a", 1.0), ("b", 1.0), ("c", 1.0)]);
        let r = evaluate("X", "POP", Setting::Unsupervised, &[(1, neg.clone()), (2, flat.clone())], &labels).unwrap();
        assert!((r.mean_pearson.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.std_pearson, Some(0.0));
        assert!(r.per_seed[1].degenerate);
        let r = evaluate("X", "POP", Setting::Kshot { k: 0 }, &[(1, neg)], &labels).unwrap();
        assert!((r.mean_pearson.unwrap() + 1.0).abs() < 1e-12);
        let r = evaluate("X", "POP", Setting::Unsupervised, &[(1, flat)], &labels).unwrap();
        assert!(r.degenerate && r.mean_pearson.is_none());
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"mean_pearson\":\"N/A\""));
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), r);
    }

    #[test]
    fn missing_prediction_is_error() {
        let labels: BTreeMap<String, f64> = [("a".to_string(), 1.0), ("z".to_string(), 2.0)].into();
        let p = preds(&[("a", 1.0)]);
        assert!(evaluate("X", "POP", Setting::Unsupervised, &[(1, p)], &labels).is_err());
    }
}
