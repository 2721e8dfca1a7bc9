use std::hint::black_box;

use aerocap::body_model::{self, BodyParams};
use aerocap::bundle::ModelBundle;
use aerocap::estimator::{self, EstimatorConfig, FrameInput, RefinerKind};
use aerocap::fusion::codec::{self, StageMessage};
use aerocap::fusion::timing::{self, Schedule, TimingModel};
use aerocap::losses::{self, LossWeights, RobustConfig};
use aerocap::sequence_refine as seqref;
use aerocap::synthgen::{self, Dataset, NoiseConfig, SceneConfig};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

fn dataset(frames: usize) -> Dataset {
    let scene = SceneConfig {
        frames,
        seed: 7,
        ..Default::default()
    };
    synthgen::generate_sequence(&scene, &NoiseConfig::noiseless(2), ModelBundle::builtin()).unwrap()
}

fn body(c: &mut Criterion) {
    let m = ModelBundle::builtin();
    let p = BodyParams::default();
    c.bench_function("joints", |b| b.iter(|| body_model::joints(black_box(&p), &m.template).unwrap()));
    c.bench_function("vertices", |b| b.iter(|| body_model::vertices(black_box(&p), &m.template).unwrap()));
}

fn codec(c: &mut Criterion) {
    let msg = StageMessage::zero(42, 1);
    let bytes = codec::encode_message(&msg).unwrap();
    c.bench_function("encode_message", |b| b.iter(|| codec::encode_message(black_box(&msg)).unwrap()));
    c.bench_function("decode_message", |b| b.iter(|| codec::decode_message(black_box(&bytes)).unwrap()));
}

fn estimator(c: &mut Criterion) {
    let m = ModelBundle::builtin();
    let d = dataset(1);
    let rec = &d.frames[0];
    let mut g = c.benchmark_group("run_pair");
    g.sample_size(10);
    for refiner in [RefinerKind::Oracle, RefinerKind::Gradient] {
        let cfg = EstimatorConfig {
            refiner,
            ..Default::default()
        };
        let oracle = refiner == RefinerKind::Oracle;
        g.bench_function(format!("{refiner:?}").to_lowercase(), |b| {
            b.iter_batched(
                || {
                    [
                        FrameInput::from_record(rec, 0, oracle).unwrap(),
                        FrameInput::from_record(rec, 1, oracle).unwrap(),
                    ]
                },
                |frames| estimator::run_pair(&m.template, &m.prior, frames, &cfg).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

fn sequence(c: &mut Criterion) {
    let m = ModelBundle::builtin();
    let d = dataset(10);
    let est: Vec<_> = d
        .frames
        .iter()
        .map(|rec| seqref::FrameEstimate {
            frame_id: rec.frame_id,
            cameras: (0..2).map(|k| rec.camera_ground_truth_params(k)).collect(),
        })
        .collect();
    let seq = seqref::init_from_airpose(&est, &m.prior).unwrap();
    let obs = seqref::dataset_observations(&d);
    let w = LossWeights::eq8_airpose_plus();
    let r = RobustConfig::default();
    c.bench_function("airpose_plus_gradient_t10", |b| {
        b.iter(|| losses::grad_airpose_plus(&m.template, &m.prior, black_box(&seq), &obs, &w, &r).unwrap())
    });
}

fn timing(c: &mut Criterion) {
    let model = TimingModel::calibrated();
    c.bench_function("drop_rate_1000_windows", |b| {
        b.iter(|| timing::drop_rate(&model, Schedule::Blocking, black_box(1000), 3))
    });
}

criterion_group!(benches, body, codec, estimator, sequence, timing);
criterion_main!(benches);
