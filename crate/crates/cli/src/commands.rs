use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use weaksup_pose::fusion::{camera_heatmap, HeatmapOracleConfig};
use weaksup_pose::io::{self, write_json};
use weaksup_pose::labelgen::{
    aggregate_quality, label_quality_report, pseudo_3d_labels, DatasetQuality, LabelGenConfig,
    PseudoLabels, QualityReport,
};
use weaksup_pose::pipeline::{self, Ablation, AblationRow, PipelineConfig};
use weaksup_pose::pointnet::PointNetParams;
use weaksup_pose::synth::{generate_dataset, DatasetSpec, SynthConfig};
use weaksup_pose::{Error, Keypoint, Scene, NUM_KEYPOINTS};

use crate::manifest::{RunManifest, MANIFEST};
use crate::{plot, AblationArgs, EvalArgs, HeatmapArgs, LabelgenArgs, SynthArgs, TrainArgs};

pub const EXIT_IO: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Config(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::Io(_) | Error::Json(_) | Error::Format(_)) => EXIT_IO,
            CliError::Core(Error::DivergenceDetected { .. }) => EXIT_DIVERGED,
            CliError::Core(_) | CliError::Config(_) => EXIT_CONFIG,
            CliError::Io { .. } | CliError::Input(_) => EXIT_IO,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("WEAKSUP_POSE_THREADS") else {
        return Ok(());
    };
    let n = v
        .trim()
        .parse::<usize>()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            CliError::Config(format!(
                "WEAKSUP_POSE_THREADS must be a positive integer, got {v:?}"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load_or_default<T: DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T> {
    path.map(|p| load(p))
        .transpose()
        .map(Option::unwrap_or_default)
}

fn save<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value).map_err(|e| match e {
        Error::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other.into(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// `scene_*.json` files in `dir`, sorted by name.
fn scene_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|source| CliError::Io {
                path: dir.to_path_buf(),
                source,
            })?
            .path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("scene_") && name.ends_with(".json") && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn load_scenes(dir: &Path) -> Result<Vec<(PathBuf, Scene)>> {
    scene_files(dir)?
        .into_par_iter()
        .map(|p| load(&p).map(|s| (p, s)))
        .collect()
}

fn file_name(path: &Path) -> &str {
    path.file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let family = match a.pose_family.as_str() {
        "mixed" => None,
        other => Some(other.parse()?),
    };
    let base: SynthConfig = load_or_default(a.config.as_ref())?;
    let spec = DatasetSpec {
        base,
        n_scenes: a.n_scenes,
        family,
        occlusion_rate: a.occlusion_rate,
        seed: a.seed,
    };
    spec.validate()?;
    create_dir(&a.out)?;
    let start = Instant::now();
    let mut manifest = RunManifest::new("synth", a.seed, &spec);
    let (mut written, mut rejected) = (0, 0);
    for (i, result) in generate_dataset(&spec)?.into_iter().enumerate() {
        match result {
            Ok(scene) => {
                let name = format!("{}.json", scene.scene_id);
                save(&a.out.join(&name), &scene)?;
                manifest.artifact(name);
                written += 1;
            }
            Err(e @ Error::DegenerateScene { .. }) => {
                eprintln!("scene {i} rejected: {e}");
                rejected += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
    if rejected > 0 {
        eprintln!("{rejected} of {} scenes rejected as degenerate", a.n_scenes);
    }
    manifest.count("scenes_written", written);
    manifest.count("scenes_rejected", rejected);
    manifest.time("total", start);
    manifest.write(&a.out)?;
    Ok(())
}

enum LabelOutcome {
    Labelled {
        labels: PseudoLabels,
        quality: Option<QualityReport>,
    },
    Skipped(String),
}

#[derive(Serialize)]
struct SkippedScene {
    scene: String,
    reason: String,
}

#[derive(Serialize)]
struct LabelReport<'a> {
    config: &'a LabelGenConfig,
    n_scenes: usize,
    n_labelled: usize,
    n_without_ground_truth: usize,
    quality: DatasetQuality,
    skipped: Vec<SkippedScene>,
}

pub fn labelgen(a: LabelgenArgs) -> Result<()> {
    let mut config: LabelGenConfig = load_or_default(a.config.as_ref())?;
    if let Some(t) = a.temperature {
        config.temperature = t;
    }
    if let Some(t) = a.reliability_temperature {
        config.reliability_temperature = t;
    }
    if let Some(r) = a.radius {
        config.positive_radius = r;
    }
    config.validate()?;
    let start = Instant::now();
    let files = scene_files(&a.scenes)?;
    create_dir(&a.out)?;
    let outcomes = files
        .par_iter()
        .map(|path| {
            let scene: Scene = load(path)?;
            let labels = match pseudo_3d_labels(&scene, &config) {
                Ok(l) => l,
                Err(e @ (Error::EmptyCloud | Error::AllInvisible)) => {
                    return Ok(LabelOutcome::Skipped(e.to_string()))
                }
                Err(e) => return Err(e.into()),
            };
            let quality = match label_quality_report(&scene, &labels, &config) {
                Ok(q) => Some(q),
                Err(Error::MissingGroundTruth) => None,
                Err(e) => return Err(e.into()),
            };
            Ok(LabelOutcome::Labelled { labels, quality })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut manifest = RunManifest::new("labelgen", 0, &config);
    manifest.input("scenes", &a.scenes);
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    let mut n_without_gt = 0;
    for (path, outcome) in files.iter().zip(outcomes) {
        let name = file_name(path).to_string();
        match outcome {
            LabelOutcome::Labelled { labels, quality } => {
                save(&a.out.join(&name), &labels)?;
                manifest.artifact(name);
                match quality {
                    Some(q) => reports.push(q),
                    None => n_without_gt += 1,
                }
            }
            LabelOutcome::Skipped(reason) => {
                eprintln!("{name} skipped: {reason}");
                skipped.push(SkippedScene {
                    scene: name,
                    reason,
                });
            }
        }
    }
    if !skipped.is_empty() {
        eprintln!("{} scenes skipped", skipped.len());
    }
    let report = LabelReport {
        config: &config,
        n_scenes: files.len(),
        n_labelled: files.len() - skipped.len(),
        n_without_ground_truth: n_without_gt,
        quality: aggregate_quality(&reports, skipped.len()),
        skipped,
    };
    save(&a.out.join("quality_report.json"), &report)?;
    manifest.artifact("quality_report.json");
    manifest.count("scenes_labelled", report.n_labelled);
    manifest.count("scenes_skipped", report.skipped.len());
    manifest.time("total", start);
    manifest.write(&a.out)?;
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let config: PipelineConfig = load_or_default(a.config.as_ref())?;
    let ablation: Ablation = a.ablation.parse()?;
    config.validate()?;
    let start = Instant::now();
    let mut scenes = Vec::new();
    let mut labels = Vec::new();
    let mut n_empty = 0;
    for (path, scene) in load_scenes(&a.scenes)? {
        if scene.is_empty() {
            n_empty += 1;
            continue;
        }
        let label_path = a.labels.join(file_name(&path));
        if !label_path.is_file() {
            return Err(CliError::Input(format!(
                "missing labels for {}: {}",
                scene.scene_id,
                label_path.display()
            )));
        }
        labels.push(load::<PseudoLabels>(&label_path)?);
        scenes.push(scene);
    }
    let examples = config.examples_with_labels(&scenes, &labels, ablation)?;
    create_dir(&a.out)?;
    let mut manifest = RunManifest::new("train", config.train.rng_seed, &config);
    manifest.ablation = Some(ablation);
    manifest.input("scenes", &a.scenes);
    manifest.input("labels", &a.labels);
    if a.dump_camera_features {
        let mut csv = String::from("scene_id,n_points,camera_abs_sum\n");
        for ex in &examples {
            let sum: f64 = (0..ex.fused.n_points())
                .map(|i| {
                    ex.fused
                        .camera_features(i)
                        .iter()
                        .map(|v| v.abs())
                        .sum::<f64>()
                })
                .sum();
            let _ = writeln!(
                csv,
                "{},{},{:e}",
                ex.scene.scene_id,
                ex.fused.n_points(),
                sum
            );
        }
        write_text(&a.out.join("camera_features.csv"), &csv)?;
        manifest.artifact("camera_features.csv");
    }
    manifest.time("prepare", start);
    let t = Instant::now();
    let (params, log) = config
        .train_examples(&examples, ablation)
        .inspect_err(|e| {
            if let Error::DivergenceDetected { step } = e {
                eprintln!("training diverged at step {step}");
            }
        })?;
    manifest.time("train", t);
    params.save(&a.out.join("params.bin"))?;
    log.write_csv(&a.out.join("runlog.csv"))?;
    manifest.artifact("params.bin");
    manifest.artifact("runlog.csv");
    manifest.count("scenes", scenes.len());
    manifest.count("scenes_empty", n_empty);
    manifest.count("steps", log.records.len());
    manifest.count("parameters", params.len());
    manifest.time("total", start);
    manifest.write(&a.out)?;
    Ok(())
}

/// Config and ablation recorded by `train` next to a params file.
fn training_manifest(params: &Path) -> Option<RunManifest> {
    let path = params.parent()?.join(MANIFEST);
    let m: RunManifest = load(&path).ok()?;
    (m.command == "train").then_some(m)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let recorded = training_manifest(&a.params);
    let config: PipelineConfig = match (&a.config, &recorded) {
        (Some(p), _) => load(p)?,
        (None, Some(m)) => serde_json::from_value(m.config.clone())
            .map_err(|e| CliError::Input(format!("training manifest config: {e}")))?,
        (None, None) => PipelineConfig::default(),
    };
    let ablation = match (&a.ablation, recorded.and_then(|m| m.ablation)) {
        (Some(s), _) => s.parse()?,
        (None, Some(rec)) => rec,
        (None, None) => Ablation::FusionSeg,
    };
    config.validate()?;
    let params = PointNetParams::load(&a.params)?;
    let scenes: Vec<Scene> = load_scenes(&a.scenes)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    let report = config.evaluate(&params, &scenes, ablation)?;
    if report.n_skipped > 0 {
        eprintln!(
            "{} scenes skipped (no ground truth, no points or no visible keypoints)",
            report.n_skipped
        );
    }
    save(&a.report, &report)?;
    if let Some(p) = &a.plot {
        write_text(p, &plot::per_keypoint_svg(&report))?;
    }
    if let Some(p) = &a.csv {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut csv = String::from("keypoint,oks_3d,oks_2d,n_visible\n");
        for r in &report.per_keypoint {
            let _ = writeln!(
                csv,
                "{},{},{},{}",
                r.keypoint.name(),
                cell(r.oks_3d),
                cell(r.oks_2d),
                r.n_visible
            );
        }
        write_text(p, &csv)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationTable<'a> {
    n_train: usize,
    n_test: usize,
    rows: &'a [AblationRow],
}

pub fn ablation_matrix(a: AblationArgs) -> Result<()> {
    let config: PipelineConfig = load_or_default(a.config.as_ref())?;
    config.validate()?;
    if !(a.holdout > 0.0 && a.holdout < 1.0) {
        return Err(CliError::Config(format!(
            "--holdout must lie in (0, 1), got {}",
            a.holdout
        )));
    }
    let start = Instant::now();
    let scenes: Vec<Scene> = load_scenes(&a.scenes)?
        .into_iter()
        .map(|(_, s)| s)
        .filter(|s| !s.is_empty())
        .collect();
    let (train, test) = pipeline::holdout_split(scenes, a.holdout);
    create_dir(&a.out)?;
    let mut manifest = RunManifest::new("ablation-matrix", config.train.rng_seed, &config);
    manifest.input("scenes", &a.scenes);
    let mut rows = Vec::new();
    let mut failure = None;
    for ablation in Ablation::ALL {
        let t = Instant::now();
        let outcome = pipeline::run_ablation(&config, &train, &test, ablation);
        manifest.time(ablation.name(), t);
        rows.push(AblationRow::new(ablation, &outcome));
        if let Err(e) = outcome {
            eprintln!("{ablation}: {e}");
            failure.get_or_insert(e);
        }
    }
    let table = AblationTable {
        n_train: train.len(),
        n_test: test.len(),
        rows: &rows,
    };
    save(&a.out.join("ablation.json"), &table)?;
    write_text(&a.out.join("ablation.csv"), &pipeline::ablation_csv(&rows))?;
    manifest.artifact("ablation.json");
    manifest.artifact("ablation.csv");
    manifest.count("scenes_train", train.len());
    manifest.count("scenes_test", test.len());
    manifest.count("rows_failed", rows.iter().filter(|r| !r.is_ok()).count());
    manifest.time("total", start);
    manifest.write(&a.out)?;
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

pub fn heatmap(a: HeatmapArgs) -> Result<()> {
    let config: HeatmapOracleConfig = load_or_default(a.config.as_ref())?;
    let scene: Scene = load(&a.scene)?;
    let channel = match &a.keypoint {
        None => None,
        Some(name) => Some(
            Keypoint::ALL
                .into_iter()
                .find(|k| k.name() == name)
                .ok_or_else(|| CliError::Config(format!("unknown keypoint {name:?}")))?,
        ),
    };
    let h = camera_heatmap(&scene, &config, a.seed)?;
    let cells = h.height() * h.width();
    let values: Vec<f64> = match channel {
        Some(k) => h.channel(k.index()).to_vec(),
        None => (0..cells)
            .map(|i| {
                (0..NUM_KEYPOINTS)
                    .map(|k| h.channel(k)[i])
                    .fold(0.0, f64::max)
            })
            .collect(),
    };
    let peak = values.iter().copied().fold(0.0, f64::max);
    let scaled: Vec<f64> = values
        .iter()
        .map(|v| if peak > 0.0 { v / peak } else { 0.0 })
        .collect();
    io::write_pgm16(&a.out, h.width(), h.height(), &scaled)?;
    Ok(())
}
