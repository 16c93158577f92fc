use super::expect_rank;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::{Ctx, Init, Linear, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

const BLOCKS_PER_STAGE: usize = 2;

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// He-normal weights scaled by `gain`.
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, cin: usize, cout: usize, k: usize, stride: usize, gain: f64) -> Self {
        let std = gain * (2.0 / (cin * k * k) as f64).sqrt();
        Conv {
            weight: store.add(format!("{name}.weight"), init.normal(&[cout, cin, k, k], std)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            pad: k / 2,
        }
    }

    fn param_count(cin: usize, cout: usize, k: usize) -> usize {
        cout * cin * k * k + cout
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let b = ctx.p(self.bias);
        ctx.tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// `relu(x + conv(relu(conv(x))))`
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResBlock {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.conv1.forward(ctx, x)?;
        let h = ctx.tape.relu(h);
        let h = self.conv2.forward(ctx, h)?;
        let y = ctx.tape.add(x, h)?;
        Ok(ctx.tape.relu(y))
    }
}

/// Residual convolutional image encoder: a 3×3 stem, three stages of
/// residual blocks at widths `w, 2w, 4w` joined by stride-2 convolutions,
/// global average pooling and a linear map to the embedding size.
#[derive(Debug, Clone)]
pub struct CnnEncoder {
    pub stem: Conv,
    pub stages: Vec<Vec<ResBlock>>,
    pub downs: Vec<Conv>,
    pub out: Linear,
    pub channels: usize,
    pub image_size: usize,
    pub width: usize,
}

impl CnnEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &ModelConfig) -> Self {
        let c = cfg.image_channels();
        let w = cfg.cnn_width;
        let stem = Conv::new(store, init, &format!("{name}.stem"), c, w, 3, 1, 1.0);
        let mut stages = Vec::new();
        let mut downs = Vec::new();
        for s in 0..3 {
            let width = w << s;
            if s > 0 {
                downs.push(Conv::new(store, init, &format!("{name}.down{s}"), width / 2, width, 3, 2, 1.0));
            }
            let blocks = (0..BLOCKS_PER_STAGE)
                .map(|b| ResBlock {
                    conv1: Conv::new(store, init, &format!("{name}.stage{s}.block{b}.conv1"), width, width, 3, 1, 1.0),
                    conv2: Conv::new(store, init, &format!("{name}.stage{s}.block{b}.conv2"), width, width, 3, 1, 0.1),
                })
                .collect();
            stages.push(blocks);
        }
        let out = Linear::with_std(store, init, &format!("{name}.out"), 4 * w, cfg.embed_dim, (1.0 / (4 * w) as f64).sqrt());
        CnnEncoder {
            stem,
            stages,
            downs,
            out,
            channels: c,
            image_size: cfg.image_size,
            width: w,
        }
    }

    pub fn param_count(cfg: &ModelConfig) -> usize {
        let w = cfg.cnn_width;
        let mut n = Conv::param_count(cfg.image_channels(), w, 3);
        for s in 0..3 {
            let width = w << s;
            if s > 0 {
                n += Conv::param_count(width / 2, width, 3);
            }
            n += BLOCKS_PER_STAGE * 2 * Conv::param_count(width, width, 3);
        }
        n + Linear::param_count(4 * w, cfg.embed_dim)
    }

    pub fn forward(&self, ctx: &mut Ctx, images: Var) -> Result<Var> {
        let s = self.image_size;
        expect_rank(ctx, images, "encode_image", &[None, Some(self.channels), Some(s), Some(s)])?;
        let b = ctx.tape.shape(images)[0];
        let x = self.stem.forward(ctx, images)?;
        let mut x = ctx.tape.relu(x);
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                x = self.downs[i - 1].forward(ctx, x)?;
                x = ctx.tape.relu(x);
            }
            for blk in stage {
                x = blk.forward(ctx, x)?;
            }
        }
        let shape = ctx.tape.shape(x).to_vec();
        let x = ctx.tape.reshape(x, &[b, shape[1], shape[2] * shape[3]])?;
        let pooled = ctx.tape.mean_axis(x, 2, false)?;
        self.out.forward(ctx, pooled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ImageEncoderKind;
    use crate::error::Error;
    use crate::nn::{grad_check_params, sample_coords};

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::desk();
        c.image_encoder = ImageEncoderKind::Cnn;
        c
    }

    fn image(b: usize, c: usize, s: usize) -> Tensor {
        let data = (0..b * c * s * s).map(|i| ((i as f64) * 0.29).sin()).collect();
        Tensor::new(vec![b, c, s, s], data).unwrap()
    }

    #[test]
    fn output_shape_and_count() {
        let c = cfg();
        let mut store = ParamStore::new();
        let enc = CnnEncoder::new(&mut store, &mut Init::new(0), "image", &c);
        assert_eq!(store.numel(), CnnEncoder::param_count(&c));
        let mut ctx = Ctx::eval(&store);
        let x = ctx.input(image(2, 14, 16));
        let y = enc.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.shape(y), &[2, 32]);
    }

    #[test]
    fn zero_output_layer_gives_zero_embedding() {
        let c = cfg();
        let mut store = ParamStore::new();
        let enc = CnnEncoder::new(&mut store, &mut Init::new(1), "image", &c);
        store.get_mut(enc.out.weight).data_mut().fill(0.0);
        let mut ctx = Ctx::eval(&store);
        let x = ctx.input(Tensor::zeros(&[1, 14, 16, 16]));
        let y = enc.forward(&mut ctx, x).unwrap();
        assert!(ctx.tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_size_is_rejected() {
        let c = cfg();
        let mut store = ParamStore::new();
        let enc = CnnEncoder::new(&mut store, &mut Init::new(0), "image", &c);
        let mut ctx = Ctx::eval(&store);
        let x = ctx.input(Tensor::zeros(&[1, 14, 8, 8]));
        assert!(matches!(enc.forward(&mut ctx, x), Err(Error::Shape { .. })));
    }

    #[test]
    fn gradient_check_small() {
        let mut c = cfg();
        c.image_size = 8;
        c.cnn_width = 2;
        c.embed_dim = 4;
        let mut store = ParamStore::new();
        let enc = CnnEncoder::new(&mut store, &mut Init::new(3), "image", &c);
        // nonzero biases keep residual pre-activations off the relu kink
        for t in store.tensors_mut() {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.05 * ((i as f64) * 2.17 + 0.6).sin();
            }
        }
        let x = image(2, 14, 8);
        let coords = sample_coords(&store, 3, 5);
        let check = grad_check_params(&store, &coords, 1e-5, |ctx| {
            let xv = ctx.input(x.clone());
            let y = enc.forward(ctx, xv)?;
            let y = ctx.tape.tanh(y);
            Ok(ctx.tape.sum(y))
        })
        .unwrap();
        assert!(check.max_error < 1e-4 && check.straddled == 0, "{check:?}");
    }
}
