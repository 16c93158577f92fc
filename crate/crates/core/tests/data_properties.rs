mod common;

use geossl::data::{
    band, compute_indices, gen_synthetic_world, knn_impute, landcover_filter, normalize, read_dataset, write_dataset, DatasetMode, LandCover,
    NormStats, SynthParams, MINERAL_SOIL_CAP,
};
use geossl::encoders::SeriesInput;
use geossl::metrics::r2;
use proptest::prelude::*;

use common::*;

fn small_params(mode: DatasetMode) -> SynthParams {
    SynthParams {
        world_size: 64,
        patch_size: 8,
        series_len: 24,
        ..SynthParams::desk(mode, 30, 30)
    }
}

fn skewness(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let m2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m3 = v.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}

fn nd(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        (a - b) / (a + b)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn index_planes_match_per_pixel_formulas(bands in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 25), 7)) {
        let idx = compute_indices(&bands).unwrap();
        for i in 0..25 {
            let b = |k: usize| bands[k][i];
            let want = [
                nd(b(band::SWIR1), b(band::SWIR2)),
                nd(b(band::NIR), b(band::SWIR1)),
                nd(b(band::RED), b(band::GREEN)),
                nd(b(band::SWIR1), b(band::GREEN)),
                nd(b(band::NIR), b(band::RED)),
            ];
            for (plane, w) in idx.planes.iter().zip(want) {
                prop_assert!((plane[i] - w).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&plane[i]));
            }
        }
    }

    #[test]
    fn imputation_stays_within_observed_range(
        values in prop::collection::vec(-50.0f32..50.0, 36),
        mask in prop::collection::vec(prop::bool::weighted(0.3), 36),
        k in 1usize..4,
    ) {
        // 12 months by 3 variables; keep at least k observations per variable
        let mut missing = mask;
        for v in 0..3 {
            for t in 0..k {
                missing[t * 3 + v] = false;
            }
        }
        let s = SeriesInput { len: 12, vars: 3, values: values.clone(), missing: missing.clone() };
        let out = knn_impute(&s, k).unwrap();
        prop_assert!(!out.has_missing());
        for v in 0..3 {
            let seen: Vec<f32> = (0..12).filter(|&t| !missing[t * 3 + v]).map(|t| values[t * 3 + v]).collect();
            let lo = seen.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = seen.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            for t in 0..12 {
                let x = out.at(t, v);
                if missing[t * 3 + v] {
                    prop_assert!(x >= lo - 1e-4 && x <= hi + 1e-4);
                } else {
                    prop_assert_eq!(x, values[t * 3 + v]);
                }
            }
        }
        let complete = SeriesInput::complete(12, 3, values);
        prop_assert_eq!(knn_impute(&complete, k).unwrap(), complete);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn synthetic_records_respect_filters_and_label_ranges(seed in any::<u64>(), raca in any::<bool>()) {
        let mode = if raca { DatasetMode::RacaLike } else { DatasetMode::LucasLike };
        let w = gen_synthetic_world(seed, &small_params(mode)).unwrap();
        let half = 4;
        for r in &w.dataset.records {
            let (row, col) = (r.row as usize, r.col as usize);
            let mut classes = vec![];
            for dr in 0..8 {
                for dc in 0..8 {
                    classes.push(w.raster.landcover[(row - half + dr) * 64 + col - half + dc]);
                }
            }
            prop_assert!(landcover_filter(&classes, &LandCover::IRRELEVANT));
            prop_assert!(classes.iter().any(|c| *c != LandCover::Water));
            // the record's patch is the window centred on its location
            let patch = w.raster.extract_patch(row, col, 8).unwrap();
            prop_assert_eq!(&patch, &r.image);
            if let Some(l) = r.label {
                prop_assert!(l >= 0.0);
                if mode == DatasetMode::LucasLike {
                    prop_assert!(f64::from(l) < MINERAL_SOIL_CAP);
                }
            }
        }
    }
}

#[test]
fn all_water_patches_are_dropped() {
    assert!(!landcover_filter(&[LandCover::Water; 64], &LandCover::IRRELEVANT));
    assert!(landcover_filter(&[LandCover::Cropland; 64], &LandCover::IRRELEVANT));
    let mut mixed = vec![LandCover::BuiltUp; 60];
    mixed.extend([LandCover::Cropland; 40]);
    assert!(!landcover_filter(&mixed, &LandCover::IRRELEVANT));
}

#[test]
fn label_skewness_follows_the_mode() {
    let labels = |mode| {
        let w = gen_synthetic_world(11, &SynthParams::desk(mode, 5000, 0)).unwrap();
        w.dataset.records.iter().map(|r| f64::from(r.label.unwrap())).collect::<Vec<_>>()
    };
    let lucas = skewness(&labels(DatasetMode::LucasLike));
    let raca = skewness(&labels(DatasetMode::RacaLike));
    assert!(lucas.abs() < 1.0, "lucas-like skewness {lucas}");
    assert!(raca > 1.0, "raca-like skewness {raca}");
}

#[test]
fn noise_free_labels_are_a_function_of_the_latent_field() {
    let params = SynthParams {
        label_noise: 0.0,
        ..SynthParams::desk(DatasetMode::LucasLike, 2000, 0)
    };
    let w = gen_synthetic_world(4, &params).unwrap();
    let pts: Vec<(f64, f64)> = w.dataset.records.iter().map(|r| (f64::from(r.latent.unwrap()), f64::from(r.label.unwrap()))).collect();
    let (train, test) = pts.split_at(1500);
    let pred: Vec<f64> = test
        .iter()
        .map(|&(z, _)| train.iter().min_by(|a, b| (a.0 - z).abs().total_cmp(&(b.0 - z).abs())).unwrap().1)
        .collect();
    let y: Vec<f64> = test.iter().map(|p| p.1).collect();
    let score = r2(&y, &pred).unwrap();
    assert!(score > 0.99, "1-NN latent R2 {score}");
}

#[test]
fn normalisation_standardises_training_channels() {
    let ds = small_dataset(2, DatasetMode::LucasLike, 40, 20);
    let (train, val) = ds.records.split_at(40);
    let (out, stats) = normalize(train, None).unwrap();
    let hw = 64;
    for c in 0..14 {
        if stats.constant.contains(&format!("image:{c}")) {
            continue;
        }
        let vals: Vec<f64> = out.iter().flat_map(|r| r.image[c * hw..(c + 1) * hw].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let s = (vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9, "channel {c}: mean {m} std {s}");
    }
    for v in 0..11 {
        let vals: Vec<f64> = out.iter().flat_map(|r| r.series.iter().skip(v).step_by(11).copied().collect::<Vec<_>>()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-9, "variable {v}: mean {m}");
    }

    // held-out records use the training statistics and are not centred
    let (held, _) = normalize(val, Some(&stats)).unwrap();
    let m0 = held.iter().map(|r| r.image[..hw].iter().sum::<f64>()).sum::<f64>() / (held.len() * hw) as f64;
    assert!(m0.abs() > 1e-6);

    // a second application moves the values again
    let mut again = train.to_vec();
    for (r, n) in again.iter_mut().zip(&out) {
        r.image.values = n.image.iter().map(|&x| x as f32).collect();
    }
    let (twice, _) = normalize(&again, Some(&stats)).unwrap();
    assert_ne!(twice[0].image, out[0].image);
    assert_eq!(NormStats::fit(train).unwrap(), stats);
}

#[test]
fn dataset_directory_round_trip_is_byte_exact() {
    let ds = small_dataset(12, DatasetMode::RacaLike, 60, 40);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(&ds, a.path()).unwrap();
    let back = read_dataset(a.path()).unwrap();
    assert_eq!(back, ds);
    write_dataset(&back, b.path()).unwrap();
    let mut names: Vec<_> = walk(a.path());
    names.sort();
    assert!(!names.is_empty());
    for rel in names {
        assert_eq!(std::fs::read(a.path().join(&rel)).unwrap(), std::fs::read(b.path().join(&rel)).unwrap(), "{rel:?}");
    }
}

fn walk(root: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = vec![];
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out
}
