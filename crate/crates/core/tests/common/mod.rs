#![allow(dead_code)]

use geossl::contrastive::contrastive_loss;
use geossl::data::{gen_synthetic_world, Dataset, DatasetMode, NormStats, SampleRecord, SynthParams};
use geossl::finetune::rmsle_var;
use geossl::model::Batch;
use geossl::nn::{grad_check_params, sample_coords, GradCheck};
use geossl::{ImageEncoderKind, ModelConfig, SeriesEncoderKind, SoilNet};

pub const ENCODER_PAIRS: [(ImageEncoderKind, SeriesEncoderKind); 3] = [
    (ImageEncoderKind::Vit, SeriesEncoderKind::Transformer),
    (ImageEncoderKind::Vit, SeriesEncoderKind::Lstm),
    (ImageEncoderKind::Cnn, SeriesEncoderKind::Transformer),
];

/// A 64-pixel world with 8-pixel patches and 12 months, imputed.
pub fn small_dataset(seed: u64, mode: DatasetMode, labeled: usize, unlabeled: usize) -> Dataset {
    let params = SynthParams {
        world_size: 64,
        patch_size: 8,
        series_len: 12,
        ..SynthParams::desk(mode, labeled, unlabeled)
    };
    let mut ds = gen_synthetic_world(seed, &params).unwrap().dataset;
    ds.impute(3).unwrap();
    ds
}

/// Desk-size world and records, imputed.
pub fn desk_dataset(seed: u64, labeled: usize, unlabeled: usize) -> Dataset {
    let mut ds = gen_synthetic_world(seed, &SynthParams::desk(DatasetMode::LucasLike, labeled, unlabeled))
        .unwrap()
        .dataset;
    ds.impute(3).unwrap();
    ds
}

/// A model small enough for exhaustive checks on [`small_dataset`] records.
pub fn tiny_config(image: ImageEncoderKind, series: SeriesEncoderKind) -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        depth: 1,
        heads: 2,
        patch_size: 4,
        mlp_ratio: 2,
        image_size: 8,
        series_len: 12,
        proj_dim: 8,
        cnn_width: 2,
        ..ModelConfig::desk()
    }
    .with_encoders(image, series)
}

/// Adds a small deterministic offset to every parameter so that no ReLU
/// input sits exactly on its kink (zero biases meeting zero inputs).
pub fn jitter(model: &mut SoilNet) {
    let mut k = 0usize;
    for t in model.params.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.05 * ((k as f64) * 2.17 + 0.6).sin();
            k += 1;
        }
    }
}

pub fn batch_of(records: &[SampleRecord], cfg: &ModelConfig) -> (Batch, NormStats) {
    let norm = NormStats::fit(records).unwrap();
    let refs: Vec<&SampleRecord> = records.iter().collect();
    (Batch::from_records(&refs, &norm, cfg).unwrap(), norm)
}

/// Gradient checks of the contrastive and the regression loss over sampled
/// parameter coordinates.
pub fn end_to_end_grad_checks(model: &SoilNet, batch: &Batch, per_tensor: usize) -> (GradCheck, GradCheck) {
    let coords = sample_coords(&model.params, per_tensor, 17);
    let contrastive = grad_check_params(&model.params, &coords, 1e-5, |ctx| contrastive_loss(model, ctx, batch)).unwrap();
    let labels = batch.labels.clone().expect("labelled batch");
    let regression = grad_check_params(&model.params, &coords, 1e-5, |ctx| {
        let pred = model.predict_var(ctx, batch)?;
        rmsle_var(&mut ctx.tape, pred, &labels)
    })
    .unwrap();
    (contrastive, regression)
}

/// Passes when every compared coordinate is within `tol` and at most a tenth
/// of the coordinates straddled a ReLU kink.
pub fn grad_check_ok(c: &GradCheck, tol: f64) -> bool {
    c.max_error < tol && c.straddled * 10 <= c.checked + c.straddled && c.checked > 0
}
