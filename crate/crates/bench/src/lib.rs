//! Shared fixtures for the benchmarks.

use geossl::data::{gen_synthetic_world, DatasetMode, NormStats, SampleRecord, SynthParams};
use geossl::model::Batch;
use geossl::{ModelConfig, SoilNet};

/// Imputed desk-preset records: `labeled` with labels, then `unlabeled`.
pub fn desk_records(seed: u64, labeled: usize, unlabeled: usize) -> Vec<SampleRecord> {
    let mut ds = gen_synthetic_world(seed, &SynthParams::desk(DatasetMode::LucasLike, labeled, unlabeled))
        .expect("desk world")
        .dataset;
    ds.impute(3).expect("imputable");
    ds.records
}

/// A freshly initialised model and one normalised batch of the first `n` records.
pub fn model_and_batch(cfg: &ModelConfig, records: &[SampleRecord], n: usize) -> (SoilNet, Batch) {
    let norm = NormStats::fit(records).expect("statistics");
    let refs: Vec<&SampleRecord> = records[..n].iter().collect();
    let batch = Batch::from_records(&refs, &norm, cfg).expect("batch");
    (SoilNet::new(cfg, 0).expect("model"), batch)
}
