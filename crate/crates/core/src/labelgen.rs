//! Pseudo 3D keypoint labels from 2D annotations.
//!
//! For each visible keypoint the 3D label is a softmax-weighted average of
//! all cloud points, weighted by the negative squared pixel distance of each
//! point's projection to the 2D annotation. The label's reliability decays
//! exponentially with the squared distance to the nearest projected point.
//! Pointwise segmentation labels mark every point whose projection lies
//! within a fixed pixel radius of a visible keypoint; a point may be
//! positive for several keypoints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::io::{rle_decode, rle_encode, Rle};
use crate::keypoints::{Keypoint, Visibility, NUM_KEYPOINTS};
use crate::scene::Scene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelGenConfig {
    /// Softmax sharpness, 1/px².
    pub temperature: f64,
    /// Reliability decay, 1/px².
    pub reliability_temperature: f64,
    /// Pointwise positive radius, px (inclusive).
    pub positive_radius: f64,
    /// Keypoints whose nearest projected point is farther than this are
    /// flagged in quality reports.
    pub min_neighbor_px: f64,
}

impl Default for LabelGenConfig {
    fn default() -> Self {
        LabelGenConfig {
            temperature: 0.05,
            reliability_temperature: 0.01,
            positive_radius: 5.0,
            min_neighbor_px: 10.0,
        }
    }
}

impl LabelGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature T must be positive"));
        }
        if !(self.reliability_temperature > 0.0 && self.reliability_temperature.is_finite()) {
            return Err(Error::config(
                "reliability temperature T_r must be positive",
            ));
        }
        if !(self.positive_radius > 0.0 && self.positive_radius.is_finite()) {
            return Err(Error::config("positive radius r must be positive"));
        }
        if !(self.min_neighbor_px >= 0.0) {
            return Err(Error::config("min_neighbor_px must be non-negative"));
        }
        Ok(())
    }
}

/// N x 13 binary matrix stored as one bitmask per point.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PointwiseLabels {
    rows: Vec<u16>,
}

impl PointwiseLabels {
    pub fn zeros(n: usize) -> Self {
        PointwiseLabels { rows: vec![0; n] }
    }

    pub fn n_points(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, point: usize, keypoint: usize) -> bool {
        self.rows[point] >> keypoint & 1 == 1
    }

    pub fn set(&mut self, point: usize, keypoint: usize, value: bool) {
        if value {
            self.rows[point] |= 1 << keypoint;
        } else {
            self.rows[point] &= !(1 << keypoint);
        }
    }

    pub fn row_mask(&self, point: usize) -> u16 {
        self.rows[point]
    }

    pub fn positives(&self, keypoint: usize) -> usize {
        self.rows
            .iter()
            .filter(|&&m| m >> keypoint & 1 == 1)
            .count()
    }

    /// Rows picked by `indices` (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> PointwiseLabels {
        PointwiseLabels {
            rows: indices.iter().map(|&i| self.rows[i]).collect(),
        }
    }

    /// Row-major bits, point by point.
    pub fn bits(&self) -> impl Iterator<Item = bool> + '_ {
        self.rows
            .iter()
            .flat_map(|&m| (0..NUM_KEYPOINTS).map(move |k| m >> k & 1 == 1))
    }
}

/// Generated training targets for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LabelRecord", into = "LabelRecord")]
pub struct PseudoLabels {
    /// Pseudo 3D keypoints; zero for invisible keypoints.
    pub y_tilde: [Point3; NUM_KEYPOINTS],
    /// Reliabilities in (0, 1]; zero for invisible keypoints.
    pub reliability: [f64; NUM_KEYPOINTS],
    pub pointwise: PointwiseLabels,
    pub visibility: Visibility,
}

/// Softmax of `-temperature * d²` over all entries, stabilized by
/// subtracting the largest logit.
pub fn softmax_weights(sq_distances: &[f64], temperature: f64) -> Vec<f64> {
    let min_d2 = sq_distances.iter().copied().fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> = sq_distances
        .iter()
        .map(|&d2| (-temperature * (d2 - min_d2)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x /= total;
    }
    w
}

fn sq_distances(scene: &Scene, k: usize) -> Vec<f64> {
    let target = scene.keypoints_2d[k].pixel;
    scene.pixels().map(|p| p.distance_sq(target)).collect()
}

/// Weights α_ik of every point for keypoint `k`.
pub fn keypoint_weights(scene: &Scene, k: usize, temperature: f64) -> Vec<f64> {
    softmax_weights(&sq_distances(scene, k), temperature)
}

fn check_inputs(scene: &Scene) -> Result<()> {
    if scene.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if !scene.keypoints_2d.iter().any(|k| k.visible) {
        return Err(Error::AllInvisible);
    }
    Ok(())
}

/// Pseudo 3D keypoints, reliabilities and pointwise labels for a scene,
/// computed on the full cloud.
pub fn pseudo_3d_labels(scene: &Scene, config: &LabelGenConfig) -> Result<PseudoLabels> {
    config.validate()?;
    check_inputs(scene)?;
    let mut y_tilde = [Point3::ZERO; NUM_KEYPOINTS];
    let mut reliability = [0.0; NUM_KEYPOINTS];
    let visibility = scene.visibility();
    for k in (0..NUM_KEYPOINTS).filter(|&k| visibility[k]) {
        let d2 = sq_distances(scene, k);
        let min_d2 = d2.iter().copied().fold(f64::INFINITY, f64::min);
        let alpha = softmax_weights(&d2, config.temperature);
        let mut acc = [0.0f64; 3];
        for (a, p) in alpha.iter().zip(scene.positions()) {
            acc[0] += a * p.x;
            acc[1] += a * p.y;
            acc[2] += a * p.z;
        }
        y_tilde[k] = Point3::from_array(acc);
        reliability[k] = (-config.reliability_temperature * min_d2).exp();
    }
    let pointwise = pointwise_labels(scene, config)?;
    Ok(PseudoLabels {
        y_tilde,
        reliability,
        pointwise,
        visibility,
    })
}

/// `l_ik = 1` iff keypoint `k` is visible and point `i` projects within
/// `positive_radius` pixels of it (boundary inclusive).
pub fn pointwise_labels(scene: &Scene, config: &LabelGenConfig) -> Result<PointwiseLabels> {
    if scene.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let r2 = config.positive_radius * config.positive_radius;
    let mut labels = PointwiseLabels::zeros(scene.len());
    for (k, kp) in scene
        .keypoints_2d
        .iter()
        .enumerate()
        .filter(|(_, kp)| kp.visible)
    {
        for (i, px) in scene.pixels().enumerate() {
            if px.distance_sq(kp.pixel) <= r2 {
                labels.set(i, k, true);
            }
        }
    }
    Ok(labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointQuality {
    pub keypoint: Keypoint,
    pub visible: bool,
    /// ‖ỹ_k − y_k‖ in meters (visible keypoints only).
    pub error_m: Option<f64>,
    pub min_neighbor_px: Option<f64>,
    pub reliability: f64,
    pub positive_points: usize,
    /// Nearest projected point is farther than `min_neighbor_px`.
    pub sparse_neighborhood: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub scene_id: String,
    pub keypoints: Vec<KeypointQuality>,
    pub mean_error_m: Option<f64>,
    pub max_error_m: Option<f64>,
    pub n_visible: usize,
    pub n_sparse: usize,
}

/// Compares pseudo labels against the scene's ground-truth joints.
pub fn label_quality_report(
    scene: &Scene,
    labels: &PseudoLabels,
    config: &LabelGenConfig,
) -> Result<QualityReport> {
    let gt = scene.keypoints_3d_gt.ok_or(Error::MissingGroundTruth)?;
    let mut keypoints = Vec::with_capacity(NUM_KEYPOINTS);
    let mut errors = Vec::new();
    let mut n_sparse = 0;
    for kp in Keypoint::ALL {
        let k = kp.index();
        let visible = labels.visibility[k];
        let min_px = (!scene.is_empty() && visible).then(|| {
            scene
                .pixels()
                .map(|p| p.distance(scene.keypoints_2d[k].pixel))
                .fold(f64::INFINITY, f64::min)
        });
        let error_m = visible.then(|| labels.y_tilde[k].distance(gt[k]));
        let sparse = min_px.is_some_and(|d| d > config.min_neighbor_px);
        n_sparse += usize::from(sparse);
        errors.extend(error_m);
        keypoints.push(KeypointQuality {
            keypoint: kp,
            visible,
            error_m,
            min_neighbor_px: min_px,
            reliability: labels.reliability[k],
            positive_points: labels.pointwise.positives(k),
            sparse_neighborhood: sparse,
        });
    }
    let mean_error_m =
        (!errors.is_empty()).then(|| errors.iter().sum::<f64>() / errors.len() as f64);
    let max_error_m = errors.iter().copied().reduce(f64::max);
    Ok(QualityReport {
        scene_id: scene.scene_id.clone(),
        keypoints,
        mean_error_m,
        max_error_m,
        n_visible: errors.len(),
        n_sparse,
    })
}

/// Quality aggregated over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetQuality {
    pub n_scenes: usize,
    pub n_skipped: usize,
    pub n_labelled_keypoints: usize,
    pub mean_error_m: Option<f64>,
    pub max_error_m: Option<f64>,
    /// Mean error per keypoint type, in channel order.
    pub per_keypoint_mean_error_m: Vec<Option<f64>>,
    pub n_sparse: usize,
}

pub fn aggregate_quality(reports: &[QualityReport], n_skipped: usize) -> DatasetQuality {
    let mut sum = [0.0; NUM_KEYPOINTS];
    let mut count = [0usize; NUM_KEYPOINTS];
    let mut max: Option<f64> = None;
    for r in reports {
        for q in &r.keypoints {
            if let Some(e) = q.error_m {
                sum[q.keypoint.index()] += e;
                count[q.keypoint.index()] += 1;
                max = Some(max.map_or(e, |m| m.max(e)));
            }
        }
    }
    let total: usize = count.iter().sum();
    DatasetQuality {
        n_scenes: reports.len(),
        n_skipped,
        n_labelled_keypoints: total,
        mean_error_m: (total > 0).then(|| sum.iter().sum::<f64>() / total as f64),
        max_error_m: max,
        per_keypoint_mean_error_m: (0..NUM_KEYPOINTS)
            .map(|k| (count[k] > 0).then(|| sum[k] / count[k] as f64))
            .collect(),
        n_sparse: reports.iter().map(|r| r.n_sparse).sum(),
    }
}

/// On-disk layout of a label file.
#[derive(Serialize, Deserialize)]
struct LabelRecord {
    y_tilde: Vec<[f64; 3]>,
    reliability: Vec<f64>,
    visibility: Vec<u8>,
    pointwise: Rle,
}

impl From<PseudoLabels> for LabelRecord {
    fn from(l: PseudoLabels) -> Self {
        LabelRecord {
            y_tilde: l.y_tilde.iter().map(|p| p.to_array()).collect(),
            reliability: l.reliability.to_vec(),
            visibility: l.visibility.iter().map(|&v| u8::from(v)).collect(),
            pointwise: rle_encode(l.pointwise.n_points(), NUM_KEYPOINTS, l.pointwise.bits()),
        }
    }
}

impl TryFrom<LabelRecord> for PseudoLabels {
    type Error = Error;
    fn try_from(r: LabelRecord) -> Result<Self> {
        if r.y_tilde.len() != NUM_KEYPOINTS
            || r.reliability.len() != NUM_KEYPOINTS
            || r.visibility.len() != NUM_KEYPOINTS
        {
            return Err(Error::Format(format!(
                "label arrays must have {NUM_KEYPOINTS} entries"
            )));
        }
        if r.pointwise.cols != NUM_KEYPOINTS {
            return Err(Error::Format(format!(
                "pointwise labels must have {NUM_KEYPOINTS} columns"
            )));
        }
        let bits = rle_decode(&r.pointwise)?;
        let mut pointwise = PointwiseLabels::zeros(r.pointwise.rows);
        for (idx, bit) in bits.into_iter().enumerate() {
            if bit {
                pointwise.set(idx / NUM_KEYPOINTS, idx % NUM_KEYPOINTS, true);
            }
        }
        let mut y_tilde = [Point3::ZERO; NUM_KEYPOINTS];
        let mut reliability = [0.0; NUM_KEYPOINTS];
        let mut visibility = [false; NUM_KEYPOINTS];
        for k in 0..NUM_KEYPOINTS {
            y_tilde[k] = Point3::from_array(r.y_tilde[k]);
            reliability[k] = r.reliability[k];
            visibility[k] = match r.visibility[k] {
                0 => false,
                1 => true,
                v => {
                    return Err(Error::Format(format!(
                        "visibility must be 0 or 1, found {v}"
                    )))
                }
            };
        }
        Ok(PseudoLabels {
            y_tilde,
            reliability,
            pointwise,
            visibility,
        })
    }
}
