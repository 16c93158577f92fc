//! Supervised fine-tuning: RMSLE loss, splits, cross-validation and
//! best-validation model selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Preset};
use crate::contrastive::epoch_batches;
use crate::data::{NormStats, SampleRecord};
use crate::error::{Error, Result};
use crate::metrics::{rmse, MetricsReport};
use crate::model::{Batch, Checkpoint, SoilNet, HEAD_PREFIX, PROJ_PREFIX};
use crate::nn::Ctx;
use crate::optim::{cosine_lr, Adam};
use crate::tensor::{Tape, Tensor, Var};

/// Root mean squared error of `ln(1 + ·)`; inputs must be non-negative.
pub fn rmsle(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.iter().chain(yhat).any(|&v| !(v >= 0.0)) {
        return Err(Error::Domain("rmsle needs non-negative values".into()));
    }
    let a: Vec<f64> = y.iter().map(|v| v.ln_1p()).collect();
    let b: Vec<f64> = yhat.iter().map(|v| v.ln_1p()).collect();
    rmse(&a, &b)
}

/// Differentiable RMSLE of predictions `[B, 1]` or `[B]` against labels.
pub fn rmsle_var(tape: &mut Tape, pred: Var, labels: &[f64]) -> Result<Var> {
    let b = labels.len();
    if tape.value(pred).len() != b || b == 0 {
        return Err(Error::shape("rmsle", tape.shape(pred), &[b]));
    }
    if labels.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::Domain("rmsle needs non-negative labels".into()));
    }
    let pred = tape.reshape(pred, &[b])?;
    let shifted = tape.add_scalar(pred, 1.0);
    let log_pred = tape.log(shifted)?;
    let log_y = tape.constant(Tensor::vector(labels.iter().map(|v| v.ln_1p()).collect()));
    let diff = tape.sub(log_pred, log_y)?;
    let sq = tape.mul(diff, diff)?;
    let mse = tape.mean(sq);
    tape.sqrt(mse)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub seed: u64,
    /// Cross-validation folds over the train and validation pool; 1 trains
    /// once on the fixed train/validation split.
    pub folds: usize,
    pub fractions: [f64; 3],
    pub freeze_encoders: bool,
    /// Learning-rate multiplier for pretrained encoder parameters. Encoders
    /// trained from scratch and the head use the full rate.
    pub encoder_lr_scale: f64,
    /// Labels at or above this value are dropped before splitting.
    pub label_cap: Option<f64>,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            epochs: 50,
            batch_size: 16,
            lr: 1e-4,
            lr_min: 1e-6,
            seed: 0,
            folds: 5,
            fractions: [0.6, 0.2, 0.2],
            freeze_encoders: false,
            encoder_lr_scale: 1.0,
            label_cap: None,
        }
    }
}

impl TrainPlan {
    /// Desk runs take few optimisation steps, so they use a larger step, and
    /// under a third of it for pretrained encoders.
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => TrainPlan::default(),
            Preset::Desk => TrainPlan {
                epochs: 30,
                lr: 1e-3,
                folds: 1,
                encoder_lr_scale: 0.3,
                ..TrainPlan::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.fractions.iter().any(|&f| !(f >= 0.0)) {
            return Err(Error::Config(format!("split fractions {:?} must be non-negative and sum to 1", self.fractions)));
        }
        if self.folds == 0 || self.batch_size == 0 {
            return Err(Error::Config("folds and batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_min >= 0.0) || !(self.encoder_lr_scale > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Index sets of one train/validation/test partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded partition of `0..n`; the first two parts get rounded sizes and
/// the test part takes the remainder.
pub fn split(n: usize, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if n < 5 {
        return Err(Error::Data(format!("cannot split {n} samples (need at least 5)")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    Ok(Split {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    })
}

/// `k` (train, validation) pairs over `pool`; every element validates once.
pub fn kfold(pool: &[usize], k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 || k > pool.len() {
        return Err(Error::Config(format!("cannot make {k} folds from {} samples", pool.len())));
    }
    let mut order = pool.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    order.shuffle(&mut rng);
    let (base, extra) = (order.len() / k, order.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let val = order[start..start + size].to_vec();
        let train = order[..start].iter().chain(&order[start + size..]).copied().collect();
        folds.push((train, val));
        start += size;
    }
    Ok(folds)
}

/// Keeps the snapshot with the lowest validation score; ties keep the earlier one.
#[derive(Debug, Clone)]
pub struct BestTracker<T> {
    best: Option<(usize, f64, T)>,
}

impl<T> Default for BestTracker<T> {
    fn default() -> Self {
        BestTracker { best: None }
    }
}

impl<T> BestTracker<T> {
    pub fn observe(&mut self, epoch: usize, score: f64, snapshot: impl FnOnce() -> T) {
        if self.best.as_ref().is_none_or(|(_, s, _)| score < *s) {
            self.best = Some((epoch, score, snapshot()));
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.as_ref().map(|b| b.0)
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best.as_ref().map(|b| b.1)
    }

    pub fn into_best(self) -> Option<(usize, f64, T)> {
        self.best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: SoilNet,
    pub norm: NormStats,
    /// Validation report of each fold's restored model.
    pub fold_reports: Vec<MetricsReport>,
    pub selected_fold: usize,
    pub test_report: MetricsReport,
    /// `(location_id, observed, predicted)` for the test split.
    pub predictions: Vec<(u32, f64, f64)>,
    pub history: Vec<EpochRow>,
    /// `ssl` when started from a checkpoint, else `supervised`.
    pub approach: &'static str,
}

/// Predictions for `records` in evaluation mode, in chunks.
pub fn predict_records(model: &SoilNet, norm: &NormStats, records: &[&SampleRecord]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(64) {
        let batch = Batch::from_records(chunk, norm, &model.config)?;
        out.extend(model.predict(&batch)?);
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("non-finite prediction".into()));
    }
    Ok(out)
}

/// Labelled records below `label_cap`, in input order. Every model and
/// baseline splits this list, so all of them share one test set.
pub fn eligible<'a>(records: &[&'a SampleRecord], label_cap: Option<f64>) -> Result<Vec<&'a SampleRecord>> {
    if records.iter().any(|r| r.label.is_none()) {
        return Err(Error::Data("supervised training needs labels on every record".into()));
    }
    Ok(records
        .iter()
        .copied()
        .filter(|r| label_cap.is_none_or(|cap| r.label.is_some_and(|y| f64::from(y) < cap)))
        .collect())
}

pub fn labels_of(records: &[&SampleRecord]) -> Vec<f64> {
    records.iter().map(|r| r.label.map(f64::from).unwrap_or(f64::NAN)).collect()
}

/// Trains one model and returns the best-validation snapshot, its score,
/// and the per-epoch history. Epoch 0 is the untrained model.
pub fn train_model(
    mut model: SoilNet,
    norm: &NormStats,
    train: &[&SampleRecord],
    val: &[&SampleRecord],
    plan: &TrainPlan,
    fold: usize,
) -> Result<(SoilNet, f64, Vec<EpochRow>)> {
    let y_val = labels_of(val);
    let frozen = |name: &str| plan.freeze_encoders && !name.starts_with(HEAD_PREFIX) && !name.starts_with(PROJ_PREFIX);
    let mut opt = Adam::new(&model.params);
    opt.freeze(&model.params, frozen);
    opt.scale_lr(&model.params, |n| !n.starts_with(HEAD_PREFIX), plan.encoder_lr_scale);
    let mut tracker = BestTracker::default();
    let mut history = Vec::with_capacity(plan.epochs + 1);
    let initial = rmse(&y_val, &predict_records(&model, norm, val)?)?;
    tracker.observe(0, initial, || model.params.clone());
    history.push(EpochRow { fold, epoch: 0, train_loss: f64::NAN, val_rmse: initial });

    let steps_per_epoch = train.len().div_ceil(plan.batch_size);
    let total = plan.epochs * steps_per_epoch;
    let mut step = 0;
    let fold_seed = plan.seed.wrapping_add(1_000_003 * fold as u64);
    for epoch in 1..=plan.epochs {
        let mut sum = 0.0;
        let batches = epoch_batches(train.len(), plan.batch_size, fold_seed, epoch);
        let count = batches.len();
        for idx in batches {
            let recs: Vec<&SampleRecord> = idx.iter().map(|&i| train[i]).collect();
            let batch = Batch::from_records(&recs, norm, &model.config)?;
            let labels = batch.labels.clone().ok_or_else(|| Error::Data("training batch has unlabeled records".into()))?;
            let lr = cosine_lr(plan.lr, plan.lr_min, step, total);
            let grads = {
                let mut ctx = Ctx::new(&model.params, true, fold_seed ^ (step as u64).wrapping_mul(0x9E37_79B9));
                ctx.freeze(frozen);
                let pred = model.predict_var(&mut ctx, &batch)?;
                let loss = rmsle_var(&mut ctx.tape, pred, &labels)?;
                let value = ctx.tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("fine-tuning loss is {value} at epoch {epoch}")));
                }
                sum += value;
                ctx.backward(loss)?
            };
            opt.step(&mut model.params, &grads, lr)?;
            step += 1;
        }
        let val_rmse = rmse(&y_val, &predict_records(&model, norm, val)?)?;
        tracker.observe(epoch, val_rmse, || model.params.clone());
        history.push(EpochRow {
            fold,
            epoch,
            train_loss: sum / count as f64,
            val_rmse,
        });
    }
    let (_, best, params) = tracker.into_best().expect("epoch 0 observed");
    model.params = params;
    Ok((model, best, history))
}

/// Splits labelled records, trains one model per fold (or once on the fixed
/// split), restores each fold's best-validation parameters, and evaluates the
/// fold with the lowest validation RMSE on the held-out test split.
pub fn finetune(records: &[&SampleRecord], config: &ModelConfig, plan: &TrainPlan, init: Option<&Checkpoint>) -> Result<FinetuneOutcome> {
    plan.validate()?;
    config.validate()?;
    if let Some(ck) = init {
        let diff = ck.model.config.diff(config);
        if !diff.is_empty() {
            return Err(Error::ConfigMismatch(diff));
        }
    }
    let records = eligible(records, plan.label_cap)?;
    let parts = split(records.len(), plan.fractions, plan.seed)?;
    let pick = |idx: &[usize]| -> Vec<&SampleRecord> { idx.iter().map(|&i| records[i]).collect() };
    let folds: Vec<(Vec<usize>, Vec<usize>)> = if plan.folds == 1 {
        vec![(parts.train.clone(), parts.val.clone())]
    } else {
        let pool: Vec<usize> = parts.train.iter().chain(&parts.val).copied().collect();
        kfold(&pool, plan.folds, plan.seed)?
    };
    if parts.test.len() < 4 || folds.iter().any(|(t, v)| t.is_empty() || v.len() < 2) {
        return Err(Error::Data(format!("{} labelled records are too few for this split", records.len())));
    }

    let scratch_plan;
    let plan = if init.is_some() {
        plan
    } else {
        scratch_plan = TrainPlan { encoder_lr_scale: 1.0, ..plan.clone() };
        &scratch_plan
    };
    let mut fold_reports = Vec::new();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, SoilNet, NormStats)> = None;
    for (f, (train_idx, val_idx)) in folds.iter().enumerate() {
        let (train, val) = (pick(train_idx), pick(val_idx));
        let (mut model, norm) = match init {
            Some(ck) => (ck.model.clone(), ck.norm.clone()),
            None => {
                let owned: Vec<SampleRecord> = train.iter().map(|r| (*r).clone()).collect();
                (SoilNet::new(config, plan.seed.wrapping_add(f as u64))?, NormStats::fit(&owned)?)
            }
        };
        if init.is_some() {
            // fresh regression head on top of the pretrained encoders
            let fresh = SoilNet::new(config, plan.seed.wrapping_add(f as u64))?;
            for name in fresh.params.names().iter().filter(|n| n.starts_with(HEAD_PREFIX)) {
                let src = fresh.params.names().iter().position(|n| n == name).expect("present");
                let dst = model.params.names().iter().position(|n| n == name).expect("same config");
                model.params.tensors_mut()[dst] = fresh.params.tensors()[src].clone();
            }
        }
        let y_train = labels_of(&train);
        let mean = y_train.iter().sum::<f64>() / y_train.len() as f64;
        let spread = (y_train.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / y_train.len() as f64).sqrt();
        model.output_scale = if spread > 0.0 { spread } else { 1.0 };
        model.set_output_bias(mean);
        let (model, val_rmse, rows) = train_model(model, &norm, &train, &val, plan, f)?;
        let y_val = labels_of(&val);
        let report = MetricsReport::compute(&y_val, &predict_records(&model, &norm, &val)?, &format!("val-fold{f}"), plan.seed);
        // folds smaller than four samples cannot report quartiles
        if let Ok(r) = report {
            fold_reports.push(r);
        }
        history.extend(rows);
        if best.as_ref().is_none_or(|b| val_rmse < b.1) {
            best = Some((f, val_rmse, model, norm));
        }
    }
    let (selected_fold, _, model, norm) = best.expect("at least one fold");
    let test = pick(&parts.test);
    let y_test = labels_of(&test);
    let y_hat = predict_records(&model, &norm, &test)?;
    let test_report = MetricsReport::compute(&y_test, &y_hat, "test", plan.seed)?;
    let predictions = test.iter().zip(y_test.iter().zip(&y_hat)).map(|(r, (&y, &p))| (r.location_id, y, p)).collect();
    Ok(FinetuneOutcome {
        model,
        norm,
        fold_reports,
        selected_fold,
        test_report,
        predictions,
        history,
        approach: if init.is_some() { "ssl" } else { "supervised" },
    })
}
