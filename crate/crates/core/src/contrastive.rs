//! Cross-modal contrastive pretraining with the NT-Xent loss.
//!
//! Embeddings are interleaved: with zero-based indices, `s[2k]` is the
//! projected image representation of sample `k` and `s[2k + 1]` its
//! projected series representation. Each is the other's only positive;
//! every other embedding in the batch is a negative.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Preset;
use crate::data::{NormStats, SampleRecord};
use crate::error::{Error, Result};
use crate::model::{Batch, Checkpoint, SoilNet};
use crate::nn::Ctx;
use crate::optim::{cosine_lr, Adam};
use crate::tensor::{Tape, Var};

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_sim", &[u.len()], &[v.len()]));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Domain("cosine similarity of a zero vector".into()));
    }
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv))
}

/// Index of the positive partner of embedding `i`.
pub fn partner(i: usize) -> usize {
    i ^ 1
}

/// `2N` interleaved projected embeddings and a temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    embeddings: Vec<Vec<f64>>,
    temperature: f64,
}

impl ContrastiveBatch {
    pub fn new(embeddings: Vec<Vec<f64>>, temperature: f64) -> Result<Self> {
        if embeddings.is_empty() || !embeddings.len().is_multiple_of(2) {
            return Err(Error::Domain(format!("need an even, non-zero number of embeddings, got {}", embeddings.len())));
        }
        if !(temperature > 0.0) {
            return Err(Error::Domain(format!("temperature must be positive, got {temperature}")));
        }
        let d = embeddings[0].len();
        for (i, e) in embeddings.iter().enumerate() {
            if e.len() != d {
                return Err(Error::shape("contrastive batch", &[d], &[e.len()]));
            }
            if e.iter().all(|&x| x == 0.0) {
                return Err(Error::Domain(format!("embedding {i} has zero norm")));
            }
        }
        Ok(ContrastiveBatch { embeddings, temperature })
    }

    /// Interleaves per-sample image and series projections.
    pub fn from_pairs(image: &[Vec<f64>], series: &[Vec<f64>], temperature: f64) -> Result<Self> {
        if image.len() != series.len() {
            return Err(Error::shape("contrastive pairs", &[image.len()], &[series.len()]));
        }
        let embeddings = image.iter().zip(series).flat_map(|(a, b)| [a.clone(), b.clone()]).collect();
        Self::new(embeddings, temperature)
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Number of positive pairs.
    pub fn pairs(&self) -> usize {
        self.embeddings.len() / 2
    }
}

/// Loss of anchor `i` against its positive `j`, in log-sum-exp form.
pub fn ntxent_pair_loss(batch: &ContrastiveBatch, i: usize, j: usize) -> Result<f64> {
    let n = batch.embeddings.len();
    if i >= n || j >= n {
        return Err(Error::Domain(format!("pair ({i}, {j}) outside a batch of {n}")));
    }
    if i == j {
        return Err(Error::Domain("an embedding is not its own positive".into()));
    }
    if j != partner(i) {
        return Err(Error::Domain(format!("({i}, {j}) is not a positive pair")));
    }
    let s = &batch.embeddings;
    let logits: Vec<f64> = (0..n)
        .filter(|&k| k != i)
        .map(|k| Ok(cosine_sim(&s[i], &s[k])? / batch.temperature))
        .collect::<Result<_>>()?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - cosine_sim(&s[i], &s[j])? / batch.temperature)
}

/// Mean of both directed losses over all positive pairs.
pub fn ntxent_batch_loss(batch: &ContrastiveBatch) -> Result<f64> {
    let n = batch.embeddings.len();
    let mut total = 0.0;
    for k in 0..batch.pairs() {
        let (a, b) = (2 * k, 2 * k + 1);
        total += ntxent_pair_loss(batch, a, b)? + ntxent_pair_loss(batch, b, a)?;
    }
    Ok(total / n as f64)
}

/// Differentiable batch loss from projections `image, series: [N, p]`.
pub fn ntxent_loss_var(tape: &mut Tape, image: Var, series: Var, temperature: f64) -> Result<Var> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 2 || tape.shape(series) != shape.as_slice() {
        return Err(Error::shape("ntxent", &shape, tape.shape(series)));
    }
    if !(temperature > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {temperature}")));
    }
    let (n, p) = (shape[0], shape[1]);
    let m = 2 * n;
    let joined = tape.concat(&[image, series], 1)?;
    let s = tape.reshape(joined, &[m, p])?;
    let sq = tape.mul(s, s)?;
    let norms = tape.sum_axis(sq, 1, true)?;
    let norms = tape.sqrt(norms)?;
    let unit = tape.div(s, norms)?;
    let sim = tape.matmul_t(unit, unit)?;
    let logits = tape.scale(sim, 1.0 / temperature);
    let mask: Vec<bool> = (0..m * m).map(|k| k / m != k % m).collect();
    let logp = tape.masked_log_softmax(logits, &mask)?;
    let idx: Vec<usize> = (0..m).map(|i| i * m + partner(i)).collect();
    let pos = tape.gather(logp, &idx)?;
    let mean = tape.mean(pos);
    Ok(tape.scale(mean, -1.0))
}

/// Encodes, projects and scores one batch.
pub fn contrastive_loss(model: &SoilNet, ctx: &mut Ctx, batch: &Batch) -> Result<Var> {
    let (img, ser) = model.encode(ctx, batch)?;
    let ser = ser.ok_or_else(|| Error::Config("contrastive pretraining needs at least one climate group".into()))?;
    let pi = model.proj.forward(ctx, img)?;
    let ps = model.proj.forward(ctx, ser)?;
    ntxent_loss_var(&mut ctx.tape, pi, ps, model.config.temperature)
}

/// One optimisation step; returns the loss before the update.
pub fn pretrain_step(model: &mut SoilNet, opt: &mut Adam, batch: &Batch, lr: f64, seed: u64) -> Result<f64> {
    if batch.len() < 2 {
        return Err(Error::Data("a contrastive batch needs at least two samples".into()));
    }
    let (loss, grads) = {
        let mut ctx = Ctx::new(&model.params, true, seed);
        let loss = contrastive_loss(model, &mut ctx, batch)?;
        let value = ctx.tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("contrastive loss is {value}")));
        }
        (value, ctx.backward(loss)?)
    };
    opt.step(&mut model.params, &grads, lr)?;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate of the cosine schedule.
    pub lr_min: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 50,
            batch_size: 64,
            lr: 1e-4,
            lr_min: 1e-6,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => PretrainConfig::default(),
            Preset::Desk => PretrainConfig {
                epochs: 2,
                lr: 3e-3,
                ..PretrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<LossRow>,
    pub final_loss: Option<f64>,
    pub best_loss: Option<f64>,
}

/// Shuffled mini-batch index lists for one epoch. A trailing batch of a
/// single sample carries no contrastive signal and is merged into the one
/// before it.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

/// Contrastive pretraining over `records` (labels ignored). Normalisation
/// statistics are fitted on the same records and stored in the checkpoint.
pub fn pretrain(records: &[&SampleRecord], model: SoilNet, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    if cfg.batch_size < 2 {
        return Err(Error::Config("pretraining batch size must be at least 2".into()));
    }
    if records.len() < 2 {
        return Err(Error::Data(format!("contrastive pretraining needs at least 2 records, got {}", records.len())));
    }
    if !model.config.toggles.has_series() {
        return Err(Error::Config("contrastive pretraining needs at least one climate group".into()));
    }
    let owned: Vec<SampleRecord> = records.iter().map(|r| (*r).clone()).collect();
    let norm = NormStats::fit(&owned)?;
    let mut model = model;
    let mut opt = Adam::new(&model.params);
    let steps_per_epoch = epoch_batches(records.len(), cfg.batch_size, cfg.seed, 0).len();
    let total = cfg.epochs * steps_per_epoch;
    let mut history = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for idx in epoch_batches(records.len(), cfg.batch_size, cfg.seed, epoch) {
            let recs: Vec<&SampleRecord> = idx.iter().map(|&i| records[i]).collect();
            let batch = Batch::from_records(&recs, &norm, &model.config)?;
            let lr = cosine_lr(cfg.lr, cfg.lr_min, step, total);
            let step_seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step as u64);
            let loss = pretrain_step(&mut model, &mut opt, &batch, lr, step_seed)?;
            history.push(LossRow { epoch, step, loss });
            step += 1;
        }
    }
    let final_loss = history.last().map(|r| r.loss);
    let best_loss = history.iter().map(|r| r.loss).reduce(f64::min);
    let meta = serde_json::json!({
        "stage": "pretrain",
        "pretrain": cfg,
        "final_loss": final_loss,
        "best_loss": best_loss,
        "steps": history.len(),
    });
    Ok(PretrainOutcome {
        checkpoint: Checkpoint { model, norm, meta },
        history,
        final_loss,
        best_loss,
    })
}

/// Mean loss of each epoch in order.
pub fn epoch_means(history: &[LossRow]) -> Vec<f64> {
    let epochs = history.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let rows: Vec<f64> = history.iter().filter(|r| r.epoch == e).map(|r| r.loss).collect();
            rows.iter().sum::<f64>() / rows.len().max(1) as f64
        })
        .collect()
}
