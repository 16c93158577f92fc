mod common;

use geossl::contrastive::contrastive_loss;
use geossl::data::DatasetMode;
use geossl::model::{Checkpoint, HEAD_PREFIX};
use geossl::nn::Ctx;
use geossl::{FeatureToggles, ImageEncoderKind, ModelConfig, SeriesEncoderKind, SoilNet};

use common::*;

const ALL_PAIRS: [(ImageEncoderKind, SeriesEncoderKind); 4] = [
    (ImageEncoderKind::Vit, SeriesEncoderKind::Transformer),
    (ImageEncoderKind::Vit, SeriesEncoderKind::Lstm),
    (ImageEncoderKind::Cnn, SeriesEncoderKind::Transformer),
    (ImageEncoderKind::Cnn, SeriesEncoderKind::Lstm),
];

#[test]
fn every_encoder_pair_runs_forward_and_backward() {
    let ds = small_dataset(2, DatasetMode::LucasLike, 6, 0);
    for (img, ser) in ALL_PAIRS {
        let cfg = tiny_config(img, ser);
        let model = SoilNet::new(&cfg, 1).unwrap();
        let (batch, _) = batch_of(&ds.records[..4], &cfg);
        let mut ctx = Ctx::new(&model.params, true, 9);
        let loss = contrastive_loss(&model, &mut ctx, &batch).unwrap();
        let grads = ctx.backward(loss).unwrap();
        assert_eq!(grads.len(), model.params.len());
        assert!(grads.iter().all(|g| g.is_finite()), "{}", cfg.encoder_tag());
        let preds = model.predict(&batch).unwrap();
        assert_eq!(preds.len(), 4);
        assert!(preds.iter().all(|p| p.is_finite() && *p >= 0.0));
    }
}

#[test]
fn parameter_counts_match_closed_form() {
    for (img, ser) in ALL_PAIRS {
        for toggles in ["1111", "1011", "1110", "1100", "0111"] {
            let cfg = tiny_config(img, ser).with_toggles(toggles.parse().unwrap());
            let model = SoilNet::new(&cfg, 0).unwrap();
            assert_eq!(model.params.numel(), SoilNet::param_count(&cfg), "{} {toggles}", cfg.encoder_tag());
        }
    }
    for cfg in [ModelConfig::desk(), ModelConfig::paper()] {
        assert_eq!(SoilNet::new(&cfg, 0).unwrap().params.numel(), SoilNet::param_count(&cfg));
    }
}

#[test]
fn climate_free_models_have_no_series_branch() {
    let ds = small_dataset(2, DatasetMode::LucasLike, 6, 0);
    let cfg = tiny_config(ImageEncoderKind::Vit, SeriesEncoderKind::Transformer).with_toggles(FeatureToggles {
        prim_clim: false,
        sec_clim: false,
        ..FeatureToggles::ALL
    });
    let model = SoilNet::new(&cfg, 1).unwrap();
    assert!(model.series.is_none());
    let (batch, _) = batch_of(&ds.records[..3], &cfg);
    assert_eq!(model.predict(&batch).unwrap().len(), 3);
}

#[test]
fn dropout_only_acts_in_training_mode() {
    let ds = small_dataset(2, DatasetMode::LucasLike, 6, 0);
    let cfg = ModelConfig {
        dropout: 0.3,
        ..tiny_config(ImageEncoderKind::Vit, SeriesEncoderKind::Transformer)
    };
    let model = SoilNet::new(&cfg, 1).unwrap();
    let (batch, _) = batch_of(&ds.records[..4], &cfg);
    let run = |train: bool, seed: u64| {
        let mut ctx = Ctx::new(&model.params, train, seed);
        let y = model.predict_var(&mut ctx, &batch).unwrap();
        ctx.tape.value(y).data().to_vec()
    };
    assert_eq!(run(false, 1), run(false, 2));
    assert_eq!(run(false, 1), model.predict(&batch).unwrap());
    assert_eq!(run(true, 1), run(true, 1));
    assert_ne!(run(true, 1), run(true, 2));
}

#[test]
fn pretrained_loading_copies_everything_but_the_head() {
    let cfg = tiny_config(ImageEncoderKind::Cnn, SeriesEncoderKind::Lstm);
    let source = SoilNet::new(&cfg, 1).unwrap();
    let mut target = SoilNet::new(&cfg, 2).unwrap();
    let head_before = target.params.checksum_with_prefix(HEAD_PREFIX);
    let copied = target.load_pretrained(&source).unwrap();
    assert_eq!(copied, source.params.len() - 4);
    assert_eq!(target.params.checksum_with_prefix(HEAD_PREFIX), head_before);
    for (name, (a, b)) in source.params.names().iter().zip(source.params.tensors().iter().zip(target.params.tensors())) {
        if !name.starts_with(HEAD_PREFIX) {
            assert_eq!(a, b, "{name}");
        }
    }
    let other = SoilNet::new(&tiny_config(ImageEncoderKind::Vit, SeriesEncoderKind::Lstm), 1).unwrap();
    assert!(target.load_pretrained(&other).is_err());
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let ds = small_dataset(4, DatasetMode::RacaLike, 6, 0);
    let cfg = tiny_config(ImageEncoderKind::Vit, SeriesEncoderKind::Lstm);
    let mut model = SoilNet::new(&cfg, 7).unwrap();
    model.output_scale = 3.5;
    model.set_output_bias(20.0);
    let (batch, norm) = batch_of(&ds.records, &cfg);
    let dir = tempfile::tempdir().unwrap();
    Checkpoint { model: model.clone(), norm, meta: Default::default() }.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path(), Some(&cfg)).unwrap();
    assert_eq!(back.model.predict(&batch).unwrap(), model.predict(&batch).unwrap());
    let wrong = tiny_config(ImageEncoderKind::Cnn, SeriesEncoderKind::Lstm);
    assert!(Checkpoint::load(dir.path(), Some(&wrong)).is_err());
}
