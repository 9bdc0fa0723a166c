use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::data::{augment_rotation, network_input, subsample_indices, Example};
use super::{backward, forward, Architecture, PointNetParams};
use crate::error::{Error, Result};
use crate::fusion::{camera_heatmap, sample_camera_features, FusedCloud, HeatmapOracleConfig};
use crate::geometry::Point3;
use crate::keypoints::NUM_KEYPOINTS;
use crate::labelgen::{pseudo_3d_labels, LabelGenConfig, PseudoLabels};
use crate::losses::{combined_loss, regression_loss, segmentation_loss, LossConfig};
use crate::par::*;
use crate::rng;
use crate::scene::Scene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Points per training cloud after subsampling.
    pub n_points: usize,
    pub batch_size: usize,
    /// Initial learning rate; decays to zero along a half cosine.
    pub learning_rate: f64,
    pub total_steps: usize,
    pub rng_seed: u64,
    /// Random rotation about the vertical axis through the cloud centroid.
    pub augment: bool,
    /// Feed camera heatmap features; when false those columns are zero.
    pub use_camera: bool,
    /// Subtract the cloud centroid from coordinates and targets.
    pub center: bool,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_points: 256,
            batch_size: 16,
            learning_rate: 0.02,
            total_steps: 2000,
            rng_seed: 0,
            augment: true,
            use_camera: true,
            center: true,
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_points < 1 || self.batch_size < 1 || self.total_steps < 1 {
            return Err(Error::config(
                "n_points, batch_size and total_steps must be at least 1",
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        self.architecture.validate()
    }
}

/// `lr0 * (1 + cos(π t / T)) / 2`.
pub fn learning_rate(config: &TrainConfig, step: usize) -> f64 {
    0.5 * config.learning_rate * (1.0 + (PI * step as f64 / config.total_steps as f64).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub l_reg: f64,
    pub l_seg: f64,
    pub l: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
}

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,L_reg,L_seg,L\n");
        for r in &self.records {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{:e}",
                r.step, r.lr, r.l_reg, r.l_seg, r.l
            )
            .expect("string write");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("step,lr,L_reg,L_seg,L") {
            return Err(Error::Format("run log header mismatch".into()));
        }
        let records = lines
            .filter(|l| !l.is_empty())
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                let num = |i: usize| -> Result<f64> {
                    f.get(i)
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::Format(format!("bad run log line: {line}")))
                };
                Ok(StepRecord {
                    step: num(0)? as usize,
                    lr: num(1)?,
                    l_reg: num(2)?,
                    l_seg: num(3)?,
                    l: num(4)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(RunLog { records })
    }

    /// Mean combined loss over the first `n` steps.
    pub fn initial_mean(&self, n: usize) -> f64 {
        mean(self.records.iter().take(n).map(|r| r.l))
    }

    /// Mean combined loss over the last `n` steps.
    pub fn final_mean(&self, n: usize) -> f64 {
        mean(self.records.iter().rev().take(n).map(|r| r.l))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = it.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if c == 0 {
        f64::NAN
    } else {
        s / c as f64
    }
}

/// Seed for the camera heatmap oracle of one scene.
fn heatmap_seed(base: u64, scene: &Scene) -> u64 {
    rng::derive_seed(base, "heatmap", rng::fnv1a(scene.scene_id.as_bytes()))
}

/// Camera features for one scene; all camera columns are zero when the
/// camera is off. The heatmap corruption is fixed per
/// `(heatmap_seed_base, scene_id)`, standing in for a frozen camera network.
pub fn fused_features(
    scene: &Scene,
    fusion: &HeatmapOracleConfig,
    heatmap_seed_base: u64,
    use_camera: bool,
) -> Result<FusedCloud> {
    if !use_camera {
        let mut fused = sample_camera_features(&crate::fusion::Heatmap::zeros(1, 1), scene);
        fused.zero_camera_features();
        return Ok(fused);
    }
    let h = camera_heatmap(scene, fusion, heatmap_seed(heatmap_seed_base, scene))?;
    Ok(sample_camera_features(&h, scene))
}

/// Pseudo labels, oracle heatmaps and fused features for every scene.
pub fn prepare_examples(
    scenes: &[Scene],
    labelgen: &LabelGenConfig,
    fusion: &HeatmapOracleConfig,
    heatmap_seed_base: u64,
    use_camera: bool,
) -> Result<Vec<Example>> {
    scenes
        .par_iter()
        .map(|scene| {
            let labels = pseudo_3d_labels(scene, labelgen)?;
            let fused = fused_features(scene, fusion, heatmap_seed_base, use_camera)?;
            Ok(Example {
                scene: scene.clone(),
                labels,
                fused,
            })
        })
        .collect::<Vec<Result<Example>>>()
        .into_iter()
        .collect()
}

/// Like [`prepare_examples`] with labels supplied by the caller.
pub fn examples_from_labels(
    scenes: &[Scene],
    labels: &[PseudoLabels],
    fusion: &HeatmapOracleConfig,
    heatmap_seed_base: u64,
    use_camera: bool,
) -> Result<Vec<Example>> {
    if scenes.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scenes but {} label sets",
            scenes.len(),
            labels.len()
        )));
    }
    scenes
        .par_iter()
        .zip(labels.par_iter())
        .map(|(scene, labels)| {
            if labels.pointwise.n_points() != scene.len() {
                return Err(Error::ShapeMismatch(format!(
                    "scene {} has {} points but its labels cover {}",
                    scene.scene_id,
                    scene.len(),
                    labels.pointwise.n_points()
                )));
            }
            let fused = fused_features(scene, fusion, heatmap_seed_base, use_camera)?;
            Ok(Example {
                scene: scene.clone(),
                labels: labels.clone(),
                fused,
            })
        })
        .collect::<Vec<Result<Example>>>()
        .into_iter()
        .collect()
}

struct SampleResult {
    grad: Vec<f64>,
    l_reg: f64,
    l_seg: f64,
}

fn sample_step(
    params: &PointNetParams,
    examples: &[Example],
    config: &TrainConfig,
    loss: &LossConfig,
    draw: u64,
) -> Result<SampleResult> {
    let mut rng = rng::stream(config.rng_seed, "batch", draw);
    let ex = &examples[rng.random_range(0..examples.len())];
    let sub = ex.select(&subsample_indices(
        ex.scene.len(),
        config.n_points,
        &mut rng,
    ));
    let (scene, labels) = if config.augment {
        let angle = rng.random_range(0.0..TAU);
        augment_rotation(&sub.scene, &sub.labels, angle)
    } else {
        (sub.scene, sub.labels)
    };
    let origin = if config.center {
        scene.centroid().expect("subsample is non-empty")
    } else {
        Point3::ZERO
    };
    let x = network_input(&scene, &sub.fused, origin);
    let mut target = labels;
    for y in &mut target.y_tilde {
        *y = y.sub(origin);
    }
    let out = forward(params, x.view())?;
    let (l_reg, grad_kp) = regression_loss(&out.keypoints, &target, loss);
    let (l_seg, mut grad_seg) = segmentation_loss(
        out.seg_scores.view(),
        &target.pointwise,
        &target.visibility,
        loss,
    )?;
    grad_seg *= loss.lambda;
    let grad = backward(params, x.view(), &out.cache, &grad_kp, grad_seg.view())?;
    Ok(SampleResult { grad, l_reg, l_seg })
}

/// Plain SGD on prepared examples. Batch elements run in parallel and are
/// reduced in batch order, so results do not depend on the thread count.
pub fn train_on_examples(
    examples: &[Example],
    config: &TrainConfig,
    loss: &LossConfig,
) -> Result<(PointNetParams, RunLog)> {
    config.validate()?;
    loss.validate()?;
    if examples.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if let Some(bad) = examples.iter().find(|e| e.scene.is_empty()) {
        return Err(Error::DegenerateScene {
            surviving: bad.scene.len(),
            required: 1,
        });
    }
    let mut params = PointNetParams::glorot(config.architecture.clone(), config.rng_seed)?;
    let mut log = RunLog::default();
    let b = config.batch_size;
    for step in 0..config.total_steps {
        let lr = learning_rate(config, step);
        let results = (0..b)
            .into_par_iter()
            .map(|j| sample_step(&params, examples, config, loss, (step * b + j) as u64))
            .collect::<Vec<Result<SampleResult>>>();
        let mut grad = vec![0.0; params.len()];
        let (mut l_reg, mut l_seg) = (0.0, 0.0);
        for r in results {
            let r = r?;
            for (g, v) in grad.iter_mut().zip(&r.grad) {
                *g += v;
            }
            l_reg += r.l_reg;
            l_seg += r.l_seg;
        }
        let scale = 1.0 / b as f64;
        l_reg *= scale;
        l_seg *= scale;
        let l = combined_loss(l_reg, l_seg, loss.lambda);
        if !l.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::DivergenceDetected { step });
        }
        grad.iter_mut().for_each(|g| *g *= scale);
        params.sgd_step(&grad, lr);
        if params.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::DivergenceDetected { step });
        }
        log.records.push(StepRecord {
            step,
            lr,
            l_reg,
            l_seg,
            l,
        });
    }
    Ok((params, log))
}

/// Prepares labels and camera features for `scenes`, then trains.
pub fn train(
    scenes: &[Scene],
    config: &TrainConfig,
    loss: &LossConfig,
    labelgen: &LabelGenConfig,
    fusion: &HeatmapOracleConfig,
) -> Result<(PointNetParams, RunLog)> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let examples = prepare_examples(scenes, labelgen, fusion, config.rng_seed, config.use_camera)?;
    train_on_examples(&examples, config, loss)
}

/// 3D keypoints for a scene in its own frame: subsample with a seed derived
/// from the scene id, center, run the network, undo the centering.
pub fn predict_keypoints(
    params: &PointNetParams,
    scene: &Scene,
    fused: &FusedCloud,
    n_points: usize,
    center: bool,
    seed: u64,
) -> Result<[Point3; NUM_KEYPOINTS]> {
    if scene.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if fused.n_points() != scene.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} points but {} feature rows",
            scene.len(),
            fused.n_points()
        )));
    }
    let mut rng = rng::stream(seed, "predict", rng::fnv1a(scene.scene_id.as_bytes()));
    let idx = subsample_indices(scene.len(), n_points, &mut rng);
    let (scene, fused) = (scene.select(&idx), fused.select(&idx));
    let origin = if center {
        scene.centroid().expect("non-empty")
    } else {
        Point3::ZERO
    };
    let x = network_input(&scene, &fused, origin);
    let out = forward(params, x.view())?;
    Ok(out.keypoints.map(|k| k.add(origin)))
}
