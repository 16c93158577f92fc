//! Modality backbones: a ViT-style image encoder, a transformer series
//! encoder, and the residual-CNN / LSTM alternates used in ablations.
//!
//! Every encoder takes a batch and returns one `embed_dim` vector per sample.

mod attention;
mod cnn;
mod inputs;
mod lstm;
mod series;
mod vit;

pub use attention::{attend, TransformerBlock};
pub use cnn::CnnEncoder;
pub use inputs::{EmbeddingPair, ImageInput, SeriesInput};
pub use lstm::LstmEncoder;
pub use series::{sinusoidal_positions, SeriesTransformer};
pub use vit::VitEncoder;

use crate::config::{ImageEncoderKind, ModelConfig, SeriesEncoderKind};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, ParamStore};
use crate::tensor::Var;

#[derive(Debug, Clone)]
pub enum ImageEncoder {
    Vit(VitEncoder),
    Cnn(CnnEncoder),
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig) -> Self {
        match cfg.image_encoder {
            ImageEncoderKind::Vit => ImageEncoder::Vit(VitEncoder::new(store, init, "image", cfg)),
            ImageEncoderKind::Cnn => ImageEncoder::Cnn(CnnEncoder::new(store, init, "image", cfg)),
        }
    }

    /// `images: [B, C, H, W]` to `[B, d]`.
    pub fn forward(&self, ctx: &mut Ctx, images: Var) -> Result<Var> {
        match self {
            ImageEncoder::Vit(e) => e.forward(ctx, images),
            ImageEncoder::Cnn(e) => e.forward(ctx, images),
        }
    }

    pub fn param_count(cfg: &ModelConfig) -> usize {
        match cfg.image_encoder {
            ImageEncoderKind::Vit => VitEncoder::param_count(cfg),
            ImageEncoderKind::Cnn => CnnEncoder::param_count(cfg),
        }
    }
}

#[derive(Debug, Clone)]
pub enum SeriesEncoder {
    Transformer(SeriesTransformer),
    Lstm(LstmEncoder),
}

impl SeriesEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig) -> Self {
        match cfg.series_encoder {
            SeriesEncoderKind::Transformer => {
                SeriesEncoder::Transformer(SeriesTransformer::new(store, init, "series", cfg))
            }
            SeriesEncoderKind::Lstm => SeriesEncoder::Lstm(LstmEncoder::new(store, init, "series", cfg)),
        }
    }

    /// `series: [B, L, V]` to `[B, d]`.
    pub fn forward(&self, ctx: &mut Ctx, series: Var) -> Result<Var> {
        match self {
            SeriesEncoder::Transformer(e) => e.forward(ctx, series),
            SeriesEncoder::Lstm(e) => e.forward(ctx, series),
        }
    }

    pub fn param_count(cfg: &ModelConfig) -> usize {
        match cfg.series_encoder {
            SeriesEncoderKind::Transformer => SeriesTransformer::param_count(cfg),
            SeriesEncoderKind::Lstm => LstmEncoder::param_count(cfg),
        }
    }
}

pub(crate) fn expect_rank(ctx: &Ctx, x: Var, op: &'static str, want: &[Option<usize>]) -> Result<()> {
    let s = ctx.tape.shape(x);
    let ok = s.len() == want.len() && s.iter().zip(want).all(|(a, w)| w.is_none_or(|w| *a == w));
    if ok {
        Ok(())
    } else {
        let expected: Vec<usize> = want.iter().map(|w| w.unwrap_or(0)).collect();
        Err(Error::shape(op, s, &expected))
    }
}
