//! Landmark evaluation: normalized mean error, failure rate and the area
//! under the cumulative error distribution (CED).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default threshold for failure rate and AUC.
pub const DEFAULT_THRESHOLD: f64 = 0.1;

/// Five-point order: nose, left mouth corner, right mouth corner, left eye, right eye.
pub const FIVE_POINT_LEFT_EYE: usize = 3;
pub const FIVE_POINT_RIGHT_EYE: usize = 4;
/// Outer eye corners in the 98-point WFLW annotation.
pub const WFLW_LEFT_OUTER_EYE: usize = 60;
pub const WFLW_RIGHT_OUTER_EYE: usize = 72;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkScheme {
    FivePoint,
    Wflw98,
}

impl LandmarkScheme {
    pub fn landmark_count(self) -> usize {
        match self {
            LandmarkScheme::FivePoint => 5,
            LandmarkScheme::Wflw98 => 98,
        }
    }

    pub fn from_len(k: usize) -> Result<Self> {
        match k {
            5 => Ok(LandmarkScheme::FivePoint),
            98 => Ok(LandmarkScheme::Wflw98),
            _ => Err(Error::Metric(format!(
                "{k} landmarks match neither the 5-point nor the 98-point scheme"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Distance between the WFLW outer eye corners.
    InterOcular,
    /// Distance between the two annotated eye points of the 5-point scheme.
    InterPupil,
}

impl FromStr for Normalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inter_ocular" => Ok(Normalization::InterOcular),
            "inter_pupil" => Ok(Normalization::InterPupil),
            other => Err(Error::Parameter(format!(
                "unknown normalization `{other}` (expected inter_ocular or inter_pupil)"
            ))),
        }
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::InterOcular => "inter_ocular",
            Normalization::InterPupil => "inter_pupil",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
    scheme: LandmarkScheme,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        let scheme = LandmarkScheme::from_len(points.len())?;
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Metric("landmark coordinates must be finite".into()));
        }
        Ok(Self { points, scheme })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn scheme(&self) -> LandmarkScheme {
        self.scheme
    }

    /// Normalizing distance of this (ground-truth) set.
    pub fn norm_distance(&self, norm: Normalization) -> Result<f64> {
        let (a, b) = match (norm, self.scheme) {
            (Normalization::InterPupil, LandmarkScheme::FivePoint) => {
                (FIVE_POINT_LEFT_EYE, FIVE_POINT_RIGHT_EYE)
            }
            (Normalization::InterOcular, LandmarkScheme::Wflw98) => {
                (WFLW_LEFT_OUTER_EYE, WFLW_RIGHT_OUTER_EYE)
            }
            (norm, scheme) => {
                return Err(Error::Metric(format!(
                    "{norm} normalization is undefined for the {scheme:?} scheme"
                )))
            }
        };
        let d = distance(self.points[a], self.points[b]);
        if d > 0.0 {
            Ok(d)
        } else {
            Err(Error::Metric("normalization distance is zero".into()))
        }
    }
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Normalized mean error in percent; the normalizing distance comes from `gt`.
pub fn nme(pred: &LandmarkSet, gt: &LandmarkSet, norm: Normalization) -> Result<f64> {
    if pred.scheme != gt.scheme {
        return Err(Error::Metric(format!(
            "scheme mismatch: prediction {:?}, ground truth {:?}",
            pred.scheme, gt.scheme
        )));
    }
    let d = gt.norm_distance(norm)?;
    let total: f64 = pred
        .points
        .iter()
        .zip(&gt.points)
        .map(|(&p, &g)| distance(p, g))
        .sum();
    Ok(100.0 * total / (pred.points.len() as f64 * d))
}

fn check_nmes(nmes: &[f64]) -> Result<()> {
    if nmes.is_empty() {
        return Err(Error::Metric("no per-image errors given".into()));
    }
    if nmes.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Metric(
            "per-image errors must be finite and non-negative".into(),
        ));
    }
    Ok(())
}

/// Percentage of images whose error (as a fraction) is strictly above `threshold`.
pub fn failure_rate(nmes: &[f64], threshold: f64) -> Result<f64> {
    check_nmes(nmes)?;
    let failures = nmes.iter().filter(|&&e| e > threshold).count();
    Ok(100.0 * failures as f64 / nmes.len() as f64)
}

/// Exact area under the empirical CED on `[0, threshold]`, divided by the
/// threshold. An image with error `e <= threshold` contributes the length
/// `threshold - e` of the interval on which it counts as a success.
pub fn auc(nmes: &[f64], threshold: f64) -> Result<f64> {
    check_nmes(nmes)?;
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::Parameter(format!(
            "AUC threshold must be positive, got {threshold}"
        )));
    }
    let area: f64 = nmes.iter().map(|&e| (threshold - e).max(0.0)).sum();
    Ok(area / (nmes.len() as f64 * threshold))
}

/// Fraction of images with error at or below `e`.
pub fn ced(nmes: &[f64], e: f64) -> f64 {
    nmes.iter().filter(|&&v| v <= e).count() as f64 / nmes.len() as f64
}

/// CED sampled at `steps + 1` evenly spaced errors in `[0, threshold]`.
pub fn ced_curve(nmes: &[f64], threshold: f64, steps: usize) -> Result<Vec<(f64, f64)>> {
    check_nmes(nmes)?;
    let steps = steps.max(1);
    Ok((0..=steps)
        .map(|i| {
            let e = threshold * i as f64 / steps as f64;
            (e, ced(nmes, e))
        })
        .collect())
}

/// One record of a landmark JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkRecord {
    pub image_id: String,
    pub points: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
}

pub fn load_landmarks(path: impl AsRef<Path>) -> Result<Vec<LandmarkRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::parse(
            format!("{}:{}:{}", path.display(), e.line(), e.column()),
            e.to_string(),
        )
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageError {
    pub image_id: String,
    pub nme_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub normalization: Normalization,
    pub threshold: f64,
    pub images: usize,
    pub nme_percent: f64,
    pub fr10_percent: f64,
    pub auc10: f64,
    pub per_image: Vec<ImageError>,
}

impl MetricReport {
    /// Per-image errors as fractions.
    pub fn fractions(&self) -> Vec<f64> {
        self.per_image
            .iter()
            .map(|r| r.nme_percent / 100.0)
            .collect()
    }
}

/// Scores predictions against ground truth, matching records by image id.
/// The report follows ground-truth order.
pub fn evaluate(
    pred: &[LandmarkRecord],
    gt: &[LandmarkRecord],
    norm: Normalization,
    threshold: f64,
) -> Result<MetricReport> {
    let mut by_id: HashMap<&str, &LandmarkRecord> = HashMap::with_capacity(pred.len());
    for r in pred {
        if by_id.insert(r.image_id.as_str(), r).is_some() {
            return Err(Error::Metric(format!(
                "duplicate prediction id `{}`",
                r.image_id
            )));
        }
    }
    let mut seen = BTreeMap::new();
    for r in gt {
        if seen.insert(r.image_id.as_str(), ()).is_some() {
            return Err(Error::Metric(format!(
                "duplicate ground-truth id `{}`",
                r.image_id
            )));
        }
    }
    let missing_pred: Vec<&str> = gt
        .iter()
        .map(|r| r.image_id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    let missing_gt: Vec<&str> = pred
        .iter()
        .map(|r| r.image_id.as_str())
        .filter(|id| !seen.contains_key(id))
        .collect();
    if !missing_pred.is_empty() || !missing_gt.is_empty() {
        return Err(Error::Metric(format!(
            "image ids do not align; missing predictions: {missing_pred:?}; missing ground truth: {missing_gt:?}"
        )));
    }

    let mut per_image = Vec::with_capacity(gt.len());
    for g in gt {
        let p = by_id[g.image_id.as_str()];
        let gs = LandmarkSet::new(g.points.clone())
            .map_err(|e| Error::Metric(format!("ground truth `{}`: {e}", g.image_id)))?;
        let ps = LandmarkSet::new(p.points.clone())
            .map_err(|e| Error::Metric(format!("prediction `{}`: {e}", p.image_id)))?;
        let value = nme(&ps, &gs, norm)
            .map_err(|e| Error::Metric(format!("image `{}`: {e}", g.image_id)))?;
        per_image.push(ImageError {
            image_id: g.image_id.clone(),
            nme_percent: value,
        });
    }
    let fractions: Vec<f64> = per_image.iter().map(|r| r.nme_percent / 100.0).collect();
    let mean = per_image.iter().map(|r| r.nme_percent).sum::<f64>() / per_image.len().max(1) as f64;
    Ok(MetricReport {
        normalization: norm,
        threshold,
        images: per_image.len(),
        nme_percent: mean,
        fr10_percent: failure_rate(&fractions, threshold)?,
        auc10: auc(&fractions, threshold)?,
        per_image,
    })
}
