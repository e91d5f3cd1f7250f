use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use socs::category::{BinCodec, LabelSpace};
use socs::geom::{AnisoSimilarity, Point3};
use socs::model::{Model, ModelConfig};
use socs::pipeline::{model_config_for, train_data, views};
use socs::posefit::{fit_aniso, fit_robust, RansacConfig};
use socs::sampling::{SamplingKind, SamplingStrategy};
use socs::synth::{build_dataset, render_partial, view_pose, DatasetConfig, Split, ViewSpec};
use socs::tps::fit_tps;
use socs::train::{prepare_sample, TrainConfig};
use socs_bench::{correspondences, keypoint_pair, lamp};

fn tps(c: &mut Criterion) {
    let mut g = c.benchmark_group("tps_fit");
    for m in [8, 16, 32, 64] {
        let (src, dst) = keypoint_pair(m);
        g.bench_with_input(BenchmarkId::from_parameter(m), &m, |b, _| b.iter(|| fit_tps(black_box(&src), black_box(&dst), 0.0).unwrap()));
    }
    g.finish();
}

fn posefit(c: &mut Criterion) {
    let (set, _) = correspondences(1000);
    c.bench_function("fit_aniso/1000", |b| b.iter(|| fit_aniso(black_box(&set), None).unwrap()));
    let mut noisy = set.clone();
    for (i, p) in noisy.camera.iter_mut().enumerate().filter(|(i, _)| i % 3 == 0) {
        *p += nalgebra::Vector3::new((i as f64).sin(), 0.3, -0.2);
    }
    let cfg = RansacConfig::for_diagonal(0.5, 7);
    c.bench_function("fit_robust/1000", |b| b.iter(|| fit_robust(black_box(&noisy), &cfg).unwrap()));
}

fn render(c: &mut Criterion) {
    let shape = lamp(3, 6000, 16).shape;
    let view = ViewSpec { camera: view_pose(0.4, 0.5, 2.5), resolution: (160, 160), output_points: 1024, ..ViewSpec::default() };
    c.bench_function("render_partial/6000", |b| {
        b.iter(|| render_partial(black_box(&shape), &view, &AnisoSimilarity::identity()).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let ds = build_dataset(&DatasetConfig {
        train_instances: 2,
        test_instances: 0,
        train_views_per_instance: 2,
        surface_points: 3000,
        input_points: 256,
        resolution: [120, 120],
        ..DatasetConfig::default()
    })
    .unwrap();
    let base = ModelConfig { width: 32, block_points: vec![256, 128, 64, 32], neighbors: 8, bins: 128, ..ModelConfig::default() };
    let model = Model::new(model_config_for(&ds, &base)).unwrap();
    let codec = BinCodec::new(128);
    let tr = views(&ds, LabelSpace::Socs, Split::Train).unwrap();
    let cloud = tr[0].cloud.points.clone();
    let queries: Vec<Point3> = cloud.iter().step_by(2).copied().collect();
    c.bench_function("model/predict_128q", |b| b.iter(|| model.predict(black_box(&cloud), &queries).unwrap()));

    let data = train_data(&model, &tr, &ds.template, codec).unwrap();
    let mut group = c.benchmark_group("model/gradients");
    for cons in [0.0, 0.1] {
        let mut cfg = TrainConfig { sampling: SamplingStrategy::new(SamplingKind::SurfaceIndependent, 128), ..TrainConfig::default() };
        cfg.loss_weights.consistency = cons;
        let prepared: Vec<_> = data.items.iter().take(2).map(|it| prepare_sample(&model, &data, it, &cfg, 0).unwrap()).collect();
        let examples: Vec<_> = prepared
            .iter()
            .map(|p| {
                let item = data.items.iter().find(|it| it.id == p.id).unwrap();
                socs::model::TrainExample {
                    id: p.id,
                    geometry: &item.geometry,
                    queries: &p.queries,
                    labels: &p.labels,
                    twin_rotation: Some(p.rotation),
                }
            })
            .collect();
        let name = if cons > 0.0 { "batch2_with_twin" } else { "batch2" };
        group.bench_function(name, |b| b.iter(|| model.gradients(black_box(&examples), &cfg.loss_weights).unwrap()));
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = tps, posefit, render, model
}
criterion_main!(benches);
