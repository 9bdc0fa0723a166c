//! Glue shared by the CLI and the acceptance suite: ablation settings,
//! evaluation of a trained network, and the four-row ablation table.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusedCloud, HeatmapOracleConfig};
use crate::keypoints::{Keypoint, NUM_KEYPOINTS};
use crate::labelgen::{LabelGenConfig, PseudoLabels};
use crate::losses::LossConfig;
use crate::metrics::{self, EvalSample, OksConfig};
use crate::par::*;
use crate::pointnet::{
    examples_from_labels, fused_features, predict_keypoints, prepare_examples, train_on_examples,
    Example, PointNetParams, RunLog, TrainConfig,
};
use crate::scene::Scene;

/// The four model variants, in table order: regression only, plus
/// segmentation, plus camera features, plus both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    LidarOnly,
    LidarSeg,
    Fusion,
    FusionSeg,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::LidarOnly,
        Ablation::LidarSeg,
        Ablation::Fusion,
        Ablation::FusionSeg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::LidarOnly => "lidar_only",
            Ablation::LidarSeg => "lidar_seg",
            Ablation::Fusion => "fusion",
            Ablation::FusionSeg => "fusion_seg",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::LidarOnly => "Reg",
            Ablation::LidarSeg => "Reg+Seg",
            Ablation::Fusion => "Reg+Cam",
            Ablation::FusionSeg => "Reg+Seg+Cam",
        }
    }

    pub fn uses_camera(self) -> bool {
        matches!(self, Ablation::Fusion | Ablation::FusionSeg)
    }

    pub fn uses_segmentation(self) -> bool {
        matches!(self, Ablation::LidarSeg | Ablation::FusionSeg)
    }

    /// Camera columns are zeroed (not removed) when the camera is off, and
    /// lambda is set to 0 when segmentation is off.
    pub fn apply(self, train: &TrainConfig, loss: &LossConfig) -> (TrainConfig, LossConfig) {
        let mut t = train.clone();
        t.use_camera = self.uses_camera();
        let mut l = loss.clone();
        if !self.uses_segmentation() {
            l.lambda = 0.0;
        }
        (t, l)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub oks: OksConfig,
    /// Points fed to the network per scene at evaluation time.
    pub n_points: usize,
    /// Seed for evaluation-time subsampling.
    pub seed: u64,
    /// Lower bounds on the object scale (meters for 3D, pixels for 2D).
    pub min_scale_3d: f64,
    pub min_scale_2d: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            oks: OksConfig::default(),
            n_points: 256,
            seed: 0,
            min_scale_3d: 0.1,
            min_scale_2d: 1.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.oks.validate()?;
        if self.n_points == 0 {
            return Err(Error::config("evaluation n_points must be at least 1"));
        }
        if !(self.min_scale_3d > 0.0 && self.min_scale_2d > 0.0) {
            return Err(Error::config("minimum object scales must be positive"));
        }
        Ok(())
    }
}

/// Every tunable of the pipeline in one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub labelgen: LabelGenConfig,
    pub fusion: HeatmapOracleConfig,
    pub eval: EvalConfig,
    /// Seed of the per-scene heatmap corruption, shared by training and
    /// evaluation so both see the same "camera network".
    pub heatmap_seed: u64,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.loss.validate()?;
        self.labelgen.validate()?;
        self.fusion.validate()?;
        self.eval.validate()
    }

    /// Labels and features for `scenes` under `ablation`.
    pub fn examples(&self, scenes: &[Scene], ablation: Ablation) -> Result<Vec<Example>> {
        prepare_examples(
            scenes,
            &self.labelgen,
            &self.fusion,
            self.heatmap_seed,
            ablation.uses_camera(),
        )
    }

    /// Features for `scenes` with labels read from disk.
    pub fn examples_with_labels(
        &self,
        scenes: &[Scene],
        labels: &[PseudoLabels],
        ablation: Ablation,
    ) -> Result<Vec<Example>> {
        examples_from_labels(
            scenes,
            labels,
            &self.fusion,
            self.heatmap_seed,
            ablation.uses_camera(),
        )
    }

    /// Trains on prepared examples with the ablation's camera and lambda settings.
    pub fn train_examples(
        &self,
        examples: &[Example],
        ablation: Ablation,
    ) -> Result<(PointNetParams, RunLog)> {
        self.validate()?;
        let (train, loss) = ablation.apply(&self.train, &self.loss);
        train_on_examples(examples, &train, &loss)
    }

    pub fn train(&self, scenes: &[Scene], ablation: Ablation) -> Result<(PointNetParams, RunLog)> {
        self.validate()?;
        if scenes.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        self.train_examples(&self.examples(scenes, ablation)?, ablation)
    }

    pub fn evaluate(
        &self,
        params: &PointNetParams,
        scenes: &[Scene],
        ablation: Ablation,
    ) -> Result<EvalReport> {
        self.validate()?;
        let inputs = scenes
            .par_iter()
            .filter(|s| !s.is_empty())
            .map(|s| {
                Ok((
                    s,
                    fused_features(s, &self.fusion, self.heatmap_seed, ablation.uses_camera())?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut report = evaluate(params, &inputs, self.train.center, &self.eval)?;
        report.n_skipped += scenes.len() - inputs.len();
        report.n_scenes = scenes.len();
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overall {
    pub oks_acc: f64,
    pub per_threshold: Vec<f64>,
    pub mpjpe_m: f64,
    pub oks_acc_2d: f64,
    pub per_threshold_2d: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointRow {
    pub keypoint: Keypoint,
    pub oks_3d: Option<f64>,
    pub oks_2d: Option<f64>,
    pub n_visible: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_scenes: usize,
    pub n_evaluated: usize,
    /// Scenes without ground truth, without points or without visible
    /// keypoints.
    pub n_skipped: usize,
    /// Evaluated scenes left out of the 2D metrics because a prediction
    /// fell behind the camera.
    pub n_skipped_2d: usize,
    pub thresholds: Vec<f64>,
    pub overall: Overall,
    pub per_keypoint: Vec<KeypointRow>,
}

/// 3D and projected 2D samples for one example, `None` when the scene cannot
/// be scored.
fn score_scene(
    params: &PointNetParams,
    scene: &Scene,
    fused: &FusedCloud,
    center: bool,
    config: &EvalConfig,
) -> Result<Option<(EvalSample, Option<EvalSample>)>> {
    let Some(gt) = scene.keypoints_3d_gt else {
        return Ok(None);
    };
    let vis = scene.visibility();
    if !vis.iter().any(|&v| v) {
        return Ok(None);
    }
    let pred = predict_keypoints(params, scene, fused, config.n_points, center, config.seed)?;
    let s3 = EvalSample::new(
        pred,
        gt,
        vis,
        metrics::object_scale(&gt, &vis, config.min_scale_3d),
    )?;
    let s2 = match metrics::project_predictions(&s3, &scene.camera, 1.0) {
        Ok(mut s2) => {
            s2.scale = metrics::object_scale(&s2.gt, &vis, config.min_scale_2d);
            Some(s2)
        }
        Err(Error::NonPositiveDepth { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(Some((s3, s2)))
}

/// Scores a trained network on scenes paired with their camera features.
pub fn evaluate(
    params: &PointNetParams,
    inputs: &[(&Scene, FusedCloud)],
    center: bool,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let scored = inputs
        .par_iter()
        .map(|(scene, fused)| score_scene(params, scene, fused, center, config))
        .collect::<Result<Vec<_>>>()?;
    let mut s3 = Vec::new();
    let mut s2 = Vec::new();
    for (a, b) in scored.into_iter().flatten() {
        s3.push(a);
        s2.extend(b);
    }
    if s3.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let acc3 = metrics::oks_acc(&s3, &config.oks)?;
    let acc2 = if s2.is_empty() {
        metrics::OksAcc {
            acc: 0.0,
            per_threshold: vec![0.0; config.oks.thresholds.len()],
        }
    } else {
        metrics::oks_acc(&s2, &config.oks)?
    };
    let t3 = metrics::per_keypoint_table(&s3, &config.oks);
    let t2 = metrics::per_keypoint_table(&s2, &config.oks);
    let per_keypoint = Keypoint::ALL
        .into_iter()
        .map(|k| KeypointRow {
            keypoint: k,
            oks_3d: t3[k.index()],
            oks_2d: t2[k.index()],
            n_visible: s3.iter().filter(|s| s.visibility[k.index()]).count(),
        })
        .collect();
    Ok(EvalReport {
        n_scenes: inputs.len(),
        n_evaluated: s3.len(),
        n_skipped: inputs.len() - s3.len(),
        n_skipped_2d: s3.len() - s2.len(),
        thresholds: config.oks.thresholds.clone(),
        overall: Overall {
            oks_acc: acc3.acc,
            per_threshold: acc3.per_threshold,
            mpjpe_m: metrics::mpjpe(&s3)?,
            oks_acc_2d: acc2.acc,
            per_threshold_2d: acc2.per_threshold,
        },
        per_keypoint,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: Ablation,
    pub label: String,
    pub oks_3d: Option<f64>,
    pub mpjpe_m: Option<f64>,
    pub oks_2d: Option<f64>,
    pub error: Option<String>,
}

impl AblationRow {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Trains one variant on `train` and scores it on `test`.
pub fn run_ablation(
    config: &PipelineConfig,
    train: &[Scene],
    test: &[Scene],
    ablation: Ablation,
) -> Result<EvalReport> {
    let (params, _) = config.train(train, ablation)?;
    config.evaluate(&params, test, ablation)
}

impl AblationRow {
    pub fn new(ablation: Ablation, outcome: &Result<EvalReport>) -> Self {
        let (ok, error) = match outcome {
            Ok(r) => (Some(&r.overall), None),
            Err(e) => (None, Some(e.to_string())),
        };
        AblationRow {
            config: ablation,
            label: ablation.label().to_string(),
            oks_3d: ok.map(|o| o.oks_acc),
            mpjpe_m: ok.map(|o| o.mpjpe_m),
            oks_2d: ok.map(|o| o.oks_acc_2d),
            error,
        }
    }
}

/// Trains and scores all four variants with the same seeds. A failing row
/// carries its error instead of metrics.
pub fn ablation_matrix(
    config: &PipelineConfig,
    train: &[Scene],
    test: &[Scene],
) -> Vec<AblationRow> {
    Ablation::ALL
        .into_iter()
        .map(|a| AblationRow::new(a, &run_ablation(config, train, test, a)))
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from("config,label,oks_3d,mpjpe_m,oks_2d,error\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.config,
            r.label,
            cell(r.oks_3d),
            cell(r.mpjpe_m),
            cell(r.oks_2d),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], " ")
        ));
    }
    out
}

/// Deterministic split: the last `ceil(fraction * n)` scenes (by id) are
/// held out, keeping at least one scene on each side when `n >= 2`.
pub fn holdout_split(mut scenes: Vec<Scene>, fraction: f64) -> (Vec<Scene>, Vec<Scene>) {
    scenes.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    let n = scenes.len();
    let mut k = (fraction * n as f64).ceil() as usize;
    if n >= 2 {
        k = k.clamp(1, n - 1);
    }
    let test = scenes.split_off(n - k.min(n));
    (scenes, test)
}

pub fn keypoint_names() -> [&'static str; NUM_KEYPOINTS] {
    Keypoint::ALL.map(Keypoint::name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointnet::Architecture;
    use crate::synth::{generate_dataset, DatasetSpec};

    fn scenes(n: usize, seed: u64) -> Vec<Scene> {
        let spec = DatasetSpec {
            n_scenes: n,
            seed,
            ..DatasetSpec::default()
        };
        generate_dataset(&spec)
            .unwrap()
            .into_iter()
            .filter_map(|s| s.ok())
            .collect()
    }

    fn tiny() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.train.total_steps = 5;
        c.train.batch_size = 2;
        c.train.n_points = 32;
        c.train.architecture = Architecture {
            input_dim: 16,
            encoder: vec![8, 8],
            seg_hidden: vec![8],
            reg_hidden: vec![8],
        };
        c.eval.n_points = 32;
        c
    }

    #[test]
    fn ablation_flags() {
        let (t, l) = Ablation::LidarOnly.apply(&TrainConfig::default(), &LossConfig::default());
        assert!(!t.use_camera);
        assert_eq!(l.lambda, 0.0);
        let (t, l) = Ablation::FusionSeg.apply(&TrainConfig::default(), &LossConfig::default());
        assert!(t.use_camera);
        assert_eq!(l.lambda, 0.1);
        assert_eq!(
            Ablation::ALL.map(Ablation::label),
            ["Reg", "Reg+Seg", "Reg+Cam", "Reg+Seg+Cam"]
        );
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("camera".parse::<Ablation>().is_err());
    }

    #[test]
    fn lidar_only_examples_have_no_camera_signal() {
        let c = tiny();
        let ex = c.examples(&scenes(3, 1), Ablation::LidarSeg).unwrap();
        for e in &ex {
            assert!(e
                .fused
                .matrix()
                .slice(ndarray::s![.., 3..])
                .iter()
                .all(|&v| v == 0.0));
        }
        let ex = c.examples(&scenes(3, 1), Ablation::Fusion).unwrap();
        assert!(ex.iter().any(|e| e
            .fused
            .matrix()
            .slice(ndarray::s![.., 3..])
            .iter()
            .any(|&v| v > 0.0)));
    }

    #[test]
    fn exact_network_scores_perfectly() {
        // An evaluator fed the ground truth as prediction: build samples directly.
        let data = scenes(4, 2);
        let cfg = EvalConfig::default();
        let samples: Vec<EvalSample> = data
            .iter()
            .map(|s| {
                let gt = s.keypoints_3d_gt.unwrap();
                EvalSample::new(
                    gt,
                    gt,
                    s.visibility(),
                    metrics::object_scale(&gt, &s.visibility(), 0.1),
                )
                .unwrap()
            })
            .collect();
        assert_eq!(metrics::oks_acc(&samples, &cfg.oks).unwrap().acc, 1.0);
        assert_eq!(metrics::mpjpe(&samples).unwrap(), 0.0);
    }

    #[test]
    fn evaluation_report_shape() {
        let c = tiny();
        let data = scenes(4, 3);
        let (p, _) = c.train(&data, Ablation::FusionSeg).unwrap();
        let r = c.evaluate(&p, &data, Ablation::FusionSeg).unwrap();
        assert_eq!(r.n_scenes, 4);
        assert_eq!(r.n_evaluated + r.n_skipped, 4);
        assert_eq!(r.per_keypoint.len(), NUM_KEYPOINTS);
        assert_eq!(r.overall.per_threshold.len(), 10);
        assert!(r.overall.mpjpe_m > 0.0);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), r);
    }

    #[test]
    fn matrix_has_four_rows_in_order() {
        let c = tiny();
        let data = scenes(4, 4);
        let rows = ablation_matrix(&c, &data[..3], &data[3..]);
        assert_eq!(
            rows.iter().map(|r| r.config).collect::<Vec<_>>(),
            Ablation::ALL.to_vec()
        );
        assert!(rows.iter().all(AblationRow::is_ok));
        assert_eq!(ablation_csv(&rows).lines().count(), 5);

        let broken = ablation_matrix(&c, &[], &data);
        assert_eq!(broken.len(), 4);
        assert!(broken.iter().all(|r| !r.is_ok() && r.mpjpe_m.is_none()));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let data = scenes(10, 5);
        let mut shuffled = data.clone();
        shuffled.reverse();
        let (a, b) = holdout_split(data, 0.2);
        let (c, d) = holdout_split(shuffled, 0.2);
        assert_eq!((a.len(), b.len()), (8, 2));
        assert_eq!((a, b), (c, d));
        assert_eq!(holdout_split(scenes(1, 0), 0.5).1.len(), 1);
    }

    #[test]
    fn config_round_trips() {
        let c = PipelineConfig::default();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&json).unwrap(), c);
        assert_eq!(serde_json::from_str::<PipelineConfig>("{}").unwrap(), c);
    }
}
