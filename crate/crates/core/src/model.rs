//! The full network: both encoders, the shared projection head used during
//! pretraining and the regression head used during fine-tuning, plus
//! batching and checkpoints.

use std::path::Path;

use crate::config::ModelConfig;
use crate::data::{Blob, Container, NormStats, SampleRecord};
use crate::encoders::{EmbeddingPair, ImageEncoder, SeriesEncoder};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, Mlp2, ParamStore};
use crate::tensor::{Tensor, Var};

/// Parameter-name prefixes of the four parts.
pub const IMAGE_PREFIX: &str = "image.";
pub const SERIES_PREFIX: &str = "series.";
pub const PROJ_PREFIX: &str = "proj.";
pub const HEAD_PREFIX: &str = "head.";

#[derive(Debug, Clone)]
pub struct SoilNet {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub image: ImageEncoder,
    /// Absent when every climate group is switched off.
    pub series: Option<SeriesEncoder>,
    /// Shared by both modalities; maps `d` to the projection width.
    pub proj: Mlp2,
    /// Maps the joined representations to one pre-softplus value.
    pub head: Mlp2,
    /// Fixed multiplier on the head's hidden activations, set to the spread
    /// of the training labels so that head weights of order one span the
    /// label range.
    pub output_scale: f64,
}

impl SoilNet {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let d = config.embed_dim;
        let image = ImageEncoder::new(&mut params, &mut init, config);
        let series = config
            .toggles
            .has_series()
            .then(|| SeriesEncoder::new(&mut params, &mut init, config));
        let proj = Mlp2::new(&mut params, &mut init, "proj", [d, d, config.proj_dim]);
        let head_in = if series.is_some() { 2 * d } else { d };
        let head = Mlp2::new(&mut params, &mut init, "head", [head_in, d, 1]);
        Ok(SoilNet {
            config: config.clone(),
            params,
            image,
            series,
            proj,
            head,
            output_scale: 1.0,
        })
    }

    /// Closed-form parameter count of a configuration.
    pub fn param_count(config: &ModelConfig) -> usize {
        let d = config.embed_dim;
        let has_series = config.toggles.has_series();
        ImageEncoder::param_count(config)
            + if has_series { SeriesEncoder::param_count(config) } else { 0 }
            + Mlp2::param_count([d, d, config.proj_dim])
            + Mlp2::param_count([if has_series { 2 * d } else { d }, d, 1])
    }

    /// Image and series representations `[B, d]`.
    pub fn encode(&self, ctx: &mut Ctx, batch: &Batch) -> Result<(Var, Option<Var>)> {
        let images = ctx.input(batch.images.clone());
        let img = self.image.forward(ctx, images)?;
        let ser = match (&self.series, &batch.series) {
            (Some(enc), Some(s)) => {
                let s = ctx.input(s.clone());
                Some(enc.forward(ctx, s)?)
            }
            (None, _) => None,
            (Some(_), None) => return Err(Error::Config("batch lacks the climate series this model needs".into())),
        };
        Ok((img, ser))
    }

    /// Predictions `[B, 1]`, non-negative through a final softplus.
    pub fn predict_var(&self, ctx: &mut Ctx, batch: &Batch) -> Result<Var> {
        let (img, ser) = self.encode(ctx, batch)?;
        let joined = match ser {
            Some(s) => ctx.tape.concat(&[img, s], 1)?,
            None => img,
        };
        let h = self.head.hidden.forward(ctx, joined)?;
        let h = ctx.tape.relu(h);
        let h = ctx.tape.scale(h, self.output_scale);
        let out = self.head.out.forward(ctx, h)?;
        Ok(ctx.tape.softplus(out))
    }

    pub fn predict(&self, batch: &Batch) -> Result<Vec<f64>> {
        let mut ctx = Ctx::eval(&self.params);
        let y = self.predict_var(&mut ctx, batch)?;
        Ok(ctx.tape.value(y).data().to_vec())
    }

    pub fn embeddings(&self, batch: &Batch) -> Result<Vec<EmbeddingPair>> {
        let mut ctx = Ctx::eval(&self.params);
        let (img, ser) = self.encode(&mut ctx, batch)?;
        let d = self.config.embed_dim;
        let rows = |v: Var| -> Vec<Vec<f64>> { ctx.tape.value(v).data().chunks(d).map(<[f64]>::to_vec).collect() };
        let images = rows(img);
        let series = ser.map(rows);
        Ok(batch
            .ids
            .iter()
            .enumerate()
            .map(|(i, &id)| EmbeddingPair {
                location_id: id,
                image: images[i].clone(),
                series: series.as_ref().map(|s| s[i].clone()),
            })
            .collect())
    }

    /// Sets the final head bias so that an all-zero hidden layer predicts `value`.
    pub fn set_output_bias(&mut self, value: f64) {
        self.params.get_mut(self.head.out.bias).data_mut()[0] = inverse_softplus(value.max(1e-6));
    }

    /// Loads encoder and projection parameters from a pretrained model with
    /// the same configuration.
    pub fn load_pretrained(&mut self, other: &SoilNet) -> Result<usize> {
        let diff = other.config.diff(&self.config);
        if !diff.is_empty() {
            return Err(Error::ConfigMismatch(diff));
        }
        let mut encoders = ParamStore::new();
        for (name, t) in other.params.names().iter().zip(other.params.tensors()) {
            if !name.starts_with(HEAD_PREFIX) {
                encoders.add(name.clone(), t.clone());
            }
        }
        self.params.load_matching(&encoders)
    }
}

pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Model inputs for a set of records, restricted to the active channels
/// and variables and normalised.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<u32>,
    /// `[B, C, S, S]`
    pub images: Tensor,
    /// `[B, L, V]`, absent when the climate groups are off.
    pub series: Option<Tensor>,
    pub labels: Option<Vec<f64>>,
}

impl Batch {
    pub fn from_records(records: &[&SampleRecord], stats: &NormStats, config: &ModelConfig) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let channels = config.toggles.image_channels();
        let vars = config.toggles.series_vars();
        let (s, l) = (config.image_size, config.series_len);
        let mut images = Vec::with_capacity(records.len() * channels.len() * s * s);
        let mut series = Vec::with_capacity(records.len() * l * vars.len());
        for r in records {
            if r.image.size != s {
                return Err(Error::Data(format!(
                    "record {} has a {}-pixel patch, model expects {s}",
                    r.location_id, r.image.size
                )));
            }
            stats.image(r, &channels, &mut images);
            if !vars.is_empty() {
                if r.series.len != l {
                    return Err(Error::Data(format!(
                        "record {} has {} months, model expects {l}",
                        r.location_id, r.series.len
                    )));
                }
                if r.series.has_missing() {
                    return Err(Error::MissingValues(r.location_id));
                }
                stats.series(r, &vars, &mut series);
            }
        }
        let b = records.len();
        let labels = records.iter().map(|r| r.label.map(f64::from)).collect::<Option<Vec<f64>>>();
        Ok(Batch {
            ids: records.iter().map(|r| r.location_id).collect(),
            images: Tensor::new(vec![b, channels.len(), s, s], images)?,
            series: if vars.is_empty() { None } else { Some(Tensor::new(vec![b, l, vars.len()], series)?) },
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A saved model with its normalisation statistics and free-form metadata
/// such as loss histories.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: SoilNet,
    pub norm: NormStats,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let p = &self.model.params;
        let shapes: serde_json::Map<String, serde_json::Value> = p
            .names()
            .iter()
            .zip(p.tensors())
            .map(|(n, t)| (n.clone(), serde_json::json!(t.shape())))
            .collect();
        let meta = serde_json::json!({
            "config": self.model.config,
            "norm": self.norm,
            "output_scale": self.model.output_scale,
            "shapes": shapes,
            "info": self.meta,
        });
        let mut c = Container::new("checkpoint", meta);
        for (n, t) in p.names().iter().zip(p.tensors()) {
            c.insert(&format!("param.{n}"), Blob::F64(t.data().to_vec()));
        }
        c.write(dir)
    }

    /// Loads a checkpoint, rejecting it when `expected` is given and differs.
    pub fn load(dir: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let mut c = Container::read(dir)?;
        if c.kind != "checkpoint" {
            return Err(Error::Data(format!("container holds a {}, not a checkpoint", c.kind)));
        }
        let config: ModelConfig = serde_json::from_value(c.meta["config"].clone())?;
        if let Some(exp) = expected {
            let diff = config.diff(exp);
            if !diff.is_empty() {
                return Err(Error::ConfigMismatch(diff));
            }
        }
        let norm: NormStats = serde_json::from_value(c.meta["norm"].clone())?;
        let meta = c.meta["info"].clone();
        let mut model = SoilNet::new(&config, 0)?;
        model.output_scale = c.meta["output_scale"]
            .as_f64()
            .ok_or_else(|| Error::Data("checkpoint lacks output_scale".into()))?;
        let names = model.params.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let data = c.take_f64(&format!("param.{name}"))?;
            let t = &mut model.params.tensors_mut()[i];
            if data.len() != t.len() {
                return Err(Error::Data(format!("parameter `{name}` has {} values, expected {}", data.len(), t.len())));
            }
            t.data_mut().copy_from_slice(&data);
        }
        Ok(Checkpoint { model, norm, meta })
    }
}
