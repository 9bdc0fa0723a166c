//! Keypoint similarity (OKS), OKS/ACC and MPJPE.
//!
//! The same [`EvalSample`] type serves 3D and 2D evaluation: 2D samples keep
//! pixel coordinates in `x`/`y` and zero `z` (see [`project_predictions`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project, CameraModel, Point3};
use crate::keypoints::{Keypoint, Visibility, NUM_KEYPOINTS};
use crate::par::*;

pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OksConfig {
    /// Per-keypoint constants k_i.
    pub kappas: [f64; NUM_KEYPOINTS],
    pub epsilon: f64,
    pub thresholds: Vec<f64>,
}

/// Thresholds 0.50, 0.55, ..., 0.95, each the nearest double to its decimal.
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// COCO constants: k_i = 2 sigma_i.
pub fn coco_kappas() -> [f64; NUM_KEYPOINTS] {
    Keypoint::ALL.map(|k| 2.0 * k.coco_sigma())
}

impl Default for OksConfig {
    fn default() -> Self {
        OksConfig {
            kappas: coco_kappas(),
            epsilon: DEFAULT_EPSILON,
            thresholds: default_thresholds(),
        }
    }
}

impl OksConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kappas.iter().any(|&k| !(k > 0.0 && k.is_finite())) {
            return Err(Error::config("every OKS kappa must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("OKS epsilon must be positive"));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::config("OKS thresholds must lie in (0, 1]"));
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("OKS thresholds must be strictly increasing"));
        }
        Ok(())
    }
}

/// One prediction/ground-truth pair with its object scale `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub pred: [Point3; NUM_KEYPOINTS],
    pub gt: [Point3; NUM_KEYPOINTS],
    pub visibility: Visibility,
    pub scale: f64,
}

impl EvalSample {
    pub fn new(
        pred: [Point3; NUM_KEYPOINTS],
        gt: [Point3; NUM_KEYPOINTS],
        visibility: Visibility,
        scale: f64,
    ) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::config(format!(
                "object scale must be positive, got {scale}"
            )));
        }
        Ok(EvalSample {
            pred,
            gt,
            visibility,
            scale,
        })
    }

    pub fn distance(&self, k: usize) -> f64 {
        self.pred[k].distance(self.gt[k])
    }

    fn similarity(&self, k: usize, config: &OksConfig) -> f64 {
        let d = self.distance(k);
        let (s, kappa) = (self.scale, config.kappas[k]);
        (-(d * d) / (2.0 * s * s * kappa * kappa)).exp()
    }
}

pub fn per_keypoint_oks(sample: &EvalSample, k: usize, config: &OksConfig) -> f64 {
    if sample.visibility[k] {
        sample.similarity(k, config) / (1.0 + config.epsilon)
    } else {
        0.0
    }
}

/// Mean similarity over visible keypoints.
pub fn object_oks(sample: &EvalSample, config: &OksConfig) -> Result<f64> {
    let (sum, n) = (0..NUM_KEYPOINTS)
        .filter(|&k| sample.visibility[k])
        .fold((0.0, 0usize), |(s, n), k| {
            (s + sample.similarity(k, config), n + 1)
        });
    if n == 0 {
        return Err(Error::NoVisibleKeypoints);
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OksAcc {
    pub acc: f64,
    pub per_threshold: Vec<f64>,
}

/// Fraction of samples with object OKS at or above each threshold, and
/// the mean of those fractions.
pub fn oks_acc(samples: &[EvalSample], config: &OksConfig) -> Result<OksAcc> {
    if samples.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let scores = samples
        .par_iter()
        .map(|s| object_oks(s, config))
        .collect::<Result<Vec<f64>>>()?;
    Ok(acc_from_scores(&scores, &config.thresholds))
}

pub fn acc_from_scores(scores: &[f64], thresholds: &[f64]) -> OksAcc {
    let n = scores.len() as f64;
    let per_threshold: Vec<f64> = thresholds
        .iter()
        .map(|&t| scores.iter().filter(|&&o| o >= t).count() as f64 / n)
        .collect();
    let acc = per_threshold.iter().sum::<f64>() / per_threshold.len() as f64;
    OksAcc { acc, per_threshold }
}

/// Mean per-keypoint OKS of each type over the samples where it is visible.
pub fn per_keypoint_table(
    samples: &[EvalSample],
    config: &OksConfig,
) -> [Option<f64>; NUM_KEYPOINTS] {
    std::array::from_fn(|k| {
        let (sum, n) = samples
            .iter()
            .filter(|s| s.visibility[k])
            .fold((0.0, 0usize), |(sum, n), s| {
                (sum + per_keypoint_oks(s, k, config), n + 1)
            });
        (n > 0).then(|| sum / n as f64)
    })
}

/// Mean Euclidean error over all visible (sample, keypoint) pairs.
pub fn mpjpe(samples: &[EvalSample]) -> Result<f64> {
    let (sum, n) = samples.iter().fold((0.0, 0usize), |acc, s| {
        (0..NUM_KEYPOINTS)
            .filter(|&k| s.visibility[k])
            .fold(acc, |(sum, n), k| (sum + s.distance(k), n + 1))
    });
    if n == 0 {
        return Err(Error::NoVisibleKeypoints);
    }
    Ok(sum / n as f64)
}

/// Projects both predictions and ground truth into the image. Only visible
/// keypoints are projected; the others are left at the origin.
pub fn project_predictions(
    sample: &EvalSample,
    camera: &CameraModel,
    scale_2d: f64,
) -> Result<EvalSample> {
    let mut pred = [Point3::ZERO; NUM_KEYPOINTS];
    let mut gt = [Point3::ZERO; NUM_KEYPOINTS];
    for k in (0..NUM_KEYPOINTS).filter(|&k| sample.visibility[k]) {
        let flat = |p: Point3| {
            project(camera, p)
                .map(|q| Point3::new(q.pixel.u, q.pixel.v, 0.0))
                .map_err(|e| match e {
                    Error::NonPositiveDepth { depth, .. } => {
                        Error::NonPositiveDepth { index: k, depth }
                    }
                    other => other,
                })
        };
        pred[k] = flat(sample.pred[k])?;
        gt[k] = flat(sample.gt[k])?;
    }
    EvalSample::new(pred, gt, sample.visibility, scale_2d)
}

/// Square root of the product of the two largest extents of the axis-aligned
/// box around the visible points, never below `floor`. For 2D points (z = 0)
/// this is the square root of the box area.
pub fn object_scale(points: &[Point3; NUM_KEYPOINTS], visibility: &Visibility, floor: f64) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for k in (0..NUM_KEYPOINTS).filter(|&k| visibility[k]) {
        for (a, v) in points[k].to_array().into_iter().enumerate() {
            lo[a] = lo[a].min(v);
            hi[a] = hi[a].max(v);
        }
    }
    if lo[0] > hi[0] {
        return floor;
    }
    let mut ext = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    ext.sort_by(|a, b| b.total_cmp(a));
    (ext[0] * ext[1]).sqrt().max(floor)
}
