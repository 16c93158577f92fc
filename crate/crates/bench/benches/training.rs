use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use geossl::contrastive::pretrain_step;
use geossl::optim::Adam;
use geossl::{ImageEncoderKind, ModelConfig, SeriesEncoderKind};
use geossl_bench::{desk_records, model_and_batch};

const PAIRS: [(ImageEncoderKind, SeriesEncoderKind); 3] = [
    (ImageEncoderKind::Vit, SeriesEncoderKind::Transformer),
    (ImageEncoderKind::Vit, SeriesEncoderKind::Lstm),
    (ImageEncoderKind::Cnn, SeriesEncoderKind::Transformer),
];

fn steps(c: &mut Criterion) {
    let records = desk_records(1, 16, 0);
    let mut pretrain = c.benchmark_group("pretrain_step_batch16");
    pretrain.sample_size(10);
    for (img, ser) in PAIRS {
        let cfg = ModelConfig::desk().with_encoders(img, ser);
        let (model, batch) = model_and_batch(&cfg, &records, 16);
        pretrain.bench_function(BenchmarkId::from_parameter(cfg.encoder_tag()), |b| {
            let mut m = model.clone();
            let mut opt = Adam::new(&m.params);
            let mut seed = 0;
            b.iter(|| {
                seed += 1;
                pretrain_step(&mut m, &mut opt, &batch, 1e-4, seed).unwrap()
            })
        });
    }
    pretrain.finish();

    let mut predict = c.benchmark_group("predict_batch16");
    predict.sample_size(20);
    for (img, ser) in PAIRS {
        let cfg = ModelConfig::desk().with_encoders(img, ser);
        let (model, batch) = model_and_batch(&cfg, &records, 16);
        predict.bench_function(BenchmarkId::from_parameter(cfg.encoder_tag()), |b| b.iter(|| model.predict(&batch).unwrap()));
    }
    predict.finish();
}

criterion_group!(benches, steps);
criterion_main!(benches);
