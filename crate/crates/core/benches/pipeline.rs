//! One worker thread against the full rayon pool on the data-parallel stages.
//! Build with `--no-default-features` to measure the sequential fallback,
//! where both variants run on the calling thread.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rayon::ThreadPoolBuilder;

use weaksup_pose::labelgen::{pseudo_3d_labels, LabelGenConfig};
use weaksup_pose::pipeline::{Ablation, PipelineConfig};
use weaksup_pose::pointnet::{prepare_examples, train_on_examples, PointNetParams};
use weaksup_pose::synth::{generate_dataset, DatasetSpec};
use weaksup_pose::Scene;

fn scenes(n: usize) -> Vec<Scene> {
    let spec = DatasetSpec {
        n_scenes: n,
        seed: 11,
        ..DatasetSpec::default()
    };
    generate_dataset(&spec)
        .unwrap()
        .into_iter()
        .filter_map(Result::ok)
        .collect()
}

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let full = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut out = vec![(
        "1-thread".to_string(),
        ThreadPoolBuilder::new().num_threads(1).build().unwrap(),
    )];
    out.push((
        format!("{full}-threads"),
        ThreadPoolBuilder::new().num_threads(full).build().unwrap(),
    ));
    out
}

fn bench(c: &mut Criterion) {
    let data = scenes(32);
    let config = PipelineConfig::default();
    let mut train_cfg = config.train.clone();
    train_cfg.total_steps = 5;
    let examples = prepare_examples(&data, &config.labelgen, &config.fusion, 0, true).unwrap();
    let params = PointNetParams::glorot(config.train.architecture.clone(), 0).unwrap();

    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("labelgen_32_scenes", &name), |b| {
            b.iter(|| {
                pool.install(|| {
                    use rayon::prelude::*;
                    data.par_iter()
                        .map(|s| pseudo_3d_labels(s, &LabelGenConfig::default()).unwrap())
                        .count()
                })
            })
        });
        group.bench_function(BenchmarkId::new("prepare_examples", &name), |b| {
            b.iter(|| {
                pool.install(|| {
                    prepare_examples(&data, &config.labelgen, &config.fusion, 0, true).unwrap()
                })
            })
        });
        group.bench_function(BenchmarkId::new("train_5_steps", &name), |b| {
            b.iter(|| {
                pool.install(|| train_on_examples(&examples, &train_cfg, &config.loss).unwrap())
            })
        });
        group.bench_function(BenchmarkId::new("evaluate_32_scenes", &name), |b| {
            b.iter(|| {
                pool.install(|| {
                    config
                        .evaluate(&params, &data, Ablation::FusionSeg)
                        .unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
