use super::{expect_rank, TransformerBlock};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, Linear, ParamId, ParamStore, INIT_STD};
use crate::tensor::{Tensor, Var};

/// Vision transformer over non-overlapping square patches with a learned
/// classification token and learned positional embeddings. The embedding of
/// an image is the classification token's output after the last block.
#[derive(Debug, Clone)]
pub struct VitEncoder {
    pub patch_proj: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub channels: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
}

impl VitEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &ModelConfig) -> Self {
        let channels = cfg.image_channels();
        let d = cfg.embed_dim;
        let p = cfg.patch_size;
        let n_tokens = Self::token_count(cfg.image_size, p);
        let patch_proj = Linear::new(store, init, &format!("{name}.patch_proj"), channels * p * p, d);
        let cls = store.add(format!("{name}.cls"), init.normal(&[1, d], INIT_STD));
        let pos = store.add(format!("{name}.pos"), init.normal(&[n_tokens, d], INIT_STD));
        let blocks = (0..cfg.depth)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    init,
                    &format!("{name}.block{i}"),
                    d,
                    cfg.heads,
                    cfg.mlp_ratio,
                    cfg.dropout,
                )
            })
            .collect();
        VitEncoder {
            patch_proj,
            cls,
            pos,
            blocks,
            channels,
            image_size: cfg.image_size,
            patch_size: p,
            dim: d,
        }
    }

    /// Patches plus the classification token.
    pub fn token_count(image_size: usize, patch_size: usize) -> usize {
        let per_side = image_size / patch_size;
        per_side * per_side + 1
    }

    pub fn param_count(cfg: &ModelConfig) -> usize {
        let d = cfg.embed_dim;
        let p = cfg.patch_size;
        Linear::param_count(cfg.image_channels() * p * p, d)
            + d
            + Self::token_count(cfg.image_size, p) * d
            + cfg.depth * TransformerBlock::param_count(d, cfg.mlp_ratio)
    }

    /// Token sequence `[B·(n+1), d]` for `images: [B, C, H, W]`: classification
    /// token first, then patches in row-major patch order, positions added.
    pub fn patch_embed(&self, ctx: &mut Ctx, images: Var) -> Result<Var> {
        let shape = ctx.tape.shape(images).to_vec();
        if shape.len() != 4 || shape[2] != shape[3] {
            return Err(Error::shape("patch_embed", &shape, &[0, self.channels, self.image_size, self.image_size]));
        }
        if !shape[2].is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image side {} not divisible by patch size {}",
                shape[2], self.patch_size
            )));
        }
        expect_rank(ctx, images, "patch_embed", &[None, Some(self.channels), Some(self.image_size), Some(self.image_size)])?;
        let (b, c, p) = (shape[0], self.channels, self.patch_size);
        let g = self.image_size / p;
        let x = ctx.tape.reshape(images, &[b, c, g, p, g, p])?;
        let x = ctx.tape.permute(x, &[0, 2, 4, 1, 3, 5])?;
        let x = ctx.tape.reshape(x, &[b * g * g, c * p * p])?;
        let tokens = self.patch_proj.forward(ctx, x)?;
        let tokens = ctx.tape.reshape(tokens, &[b, g * g, self.dim])?;
        let zeros = ctx.input(Tensor::zeros(&[b, 1, self.dim]));
        let cls = ctx.p(self.cls);
        let cls = ctx.tape.add(zeros, cls)?;
        let seq = ctx.tape.concat(&[cls, tokens], 1)?;
        let pos = ctx.p(self.pos);
        let seq = ctx.tape.add(seq, pos)?;
        ctx.tape.reshape(seq, &[b * (g * g + 1), self.dim])
    }

    /// Runs the blocks over an embedded sequence and returns the
    /// classification token's output `[B, d]`.
    pub fn encode_tokens(&self, ctx: &mut Ctx, seq: Var, batch: usize) -> Result<Var> {
        let tokens = ctx.tape.shape(seq)[0] / batch;
        let mut x = seq;
        for blk in &self.blocks {
            x = blk.forward(ctx, x, batch, tokens)?;
        }
        let x = ctx.tape.reshape(x, &[batch, tokens, self.dim])?;
        let cls = ctx.tape.slice(x, 1, 0, 1)?;
        ctx.tape.reshape(cls, &[batch, self.dim])
    }

    pub fn forward(&self, ctx: &mut Ctx, images: Var) -> Result<Var> {
        let batch = ctx.tape.shape(images)[0];
        let seq = self.patch_embed(ctx, images)?;
        self.encode_tokens(ctx, seq, batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn desk_cfg() -> ModelConfig {
        ModelConfig::desk()
    }

    fn image(b: usize, c: usize, s: usize, seed: f64) -> Tensor {
        let data = (0..b * c * s * s).map(|i| ((i as f64) * 0.37 + seed).sin()).collect();
        Tensor::new(vec![b, c, s, s], data).unwrap()
    }

    #[test]
    fn token_counts() {
        assert_eq!(VitEncoder::token_count(16, 8), 5);
        assert_eq!(VitEncoder::token_count(64, 8), 65);
    }

    #[test]
    fn zero_image_and_projection_gives_cls_only() {
        let cfg = desk_cfg();
        let mut store = ParamStore::new();
        let vit = VitEncoder::new(&mut store, &mut Init::new(0), "image", &cfg);
        store.get_mut(vit.patch_proj.weight).data_mut().fill(0.0);
        store.get_mut(vit.pos).data_mut().fill(0.0);
        let cls_value = store.get(vit.cls).data().to_vec();
        let mut ctx = Ctx::eval(&store);
        let img = ctx.input(Tensor::zeros(&[1, 14, 16, 16]));
        let seq = vit.patch_embed(&mut ctx, img).unwrap();
        let v = ctx.tape.value(seq);
        assert_eq!(v.shape(), &[5, 32]);
        assert_eq!(&v.data()[..32], &cls_value[..]);
        assert!(v.data()[32..].iter().all(|&e| e == 0.0));
    }

    #[test]
    fn patch_embed_rejects_indivisible_side() {
        let mut cfg = desk_cfg();
        cfg.image_size = 12;
        let mut store = ParamStore::new();
        let vit = VitEncoder::new(&mut store, &mut Init::new(0), "image", &cfg);
        let mut ctx = Ctx::eval(&store);
        let img = ctx.input(Tensor::zeros(&[1, 14, 12, 12]));
        assert!(matches!(vit.patch_embed(&mut ctx, img), Err(Error::Config(_))));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let cfg = desk_cfg();
        let mut store = ParamStore::new();
        let vit = VitEncoder::new(&mut store, &mut Init::new(0), "image", &cfg);
        let mut ctx = Ctx::eval(&store);
        let img = ctx.input(Tensor::zeros(&[1, 12, 16, 16]));
        assert!(matches!(vit.forward(&mut ctx, img), Err(Error::Shape { .. })));
    }

    #[test]
    fn patch_order_is_position_source() {
        // Assemble tokens by hand in a shuffled patch order, each carrying the
        // positional embedding of its own patch index: the CLS output must not
        // depend on the traversal order.
        let cfg = desk_cfg();
        let mut store = ParamStore::new();
        let vit = VitEncoder::new(&mut store, &mut Init::new(4), "image", &cfg);
        let img = image(1, 14, 16, 0.5);

        let mut ctx = Ctx::eval(&store);
        let x = ctx.input(img.clone());
        let reference = vit.forward(&mut ctx, x).unwrap();
        let reference = ctx.tape.value(reference).clone();

        let p = 8;
        let w = store.get(vit.patch_proj.weight);
        let pos = store.get(vit.pos).data();
        let cls = store.get(vit.cls).data();
        let mut rows = vec![cls.iter().zip(&pos[..32]).map(|(a, b)| a + b).collect::<Vec<f64>>()];
        for &patch in &[3usize, 1, 0, 2] {
            let (py, px) = (patch / 2, patch % 2);
            let mut flat = Vec::new();
            for c in 0..14 {
                for y in 0..p {
                    for x in 0..p {
                        flat.push(img.data()[(c * 16 + py * p + y) * 16 + px * p + x]);
                    }
                }
            }
            let mut tok = vec![0.0; 32];
            for (i, f) in flat.iter().enumerate() {
                for j in 0..32 {
                    tok[j] += f * w.data()[i * 32 + j];
                }
            }
            for j in 0..32 {
                tok[j] += pos[(patch + 1) * 32 + j];
            }
            rows.push(tok);
        }
        let mut ctx = Ctx::eval(&store);
        let seq = ctx.input(super::super::attention::tokens_tensor(&rows));
        let out = vit.encode_tokens(&mut ctx, seq, 1).unwrap();
        assert!(ctx.tape.value(out).max_abs_diff(&reference) < 1e-12);
    }

    #[test]
    fn deterministic_and_sensitive() {
        let cfg = desk_cfg();
        let mut store = ParamStore::new();
        let vit = VitEncoder::new(&mut store, &mut Init::new(8), "image", &cfg);
        let img = image(1, 14, 16, 1.0);
        let run = |t: &Tensor| {
            let mut ctx = Ctx::eval(&store);
            let x = ctx.input(t.clone());
            let y = vit.forward(&mut ctx, x).unwrap();
            ctx.tape.value(y).clone()
        };
        let a = run(&img);
        assert_eq!(a.shape(), &[1, 32]);
        assert_eq!(a, run(&img));
        for &idx in &[0usize, 777, 14 * 256 - 1] {
            let mut bumped = img.clone();
            bumped.data_mut()[idx] += 0.1;
            assert_ne!(a, run(&bumped), "pixel {idx} had no effect");
        }
    }
}
