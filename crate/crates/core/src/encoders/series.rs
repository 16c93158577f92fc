use super::{expect_rank, TransformerBlock};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::{Ctx, Init, Linear, ParamStore};
use crate::tensor::{Tensor, Var};

/// Fixed sinusoidal encoding `[len, dim]`: even columns `sin(t / 10000^(2i/d))`,
/// odd columns the matching cosine.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for t in 0..len {
        for i in 0..dim {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let angle = t as f64 * freq;
            data[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, dim], data).expect("positive dims")
}

/// Per-month linear projection, sinusoidal positions, transformer blocks and
/// a mean over time.
#[derive(Debug, Clone)]
pub struct SeriesTransformer {
    pub in_proj: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub positions: Tensor,
    /// Adds `positions` to the projected steps; off only in tests.
    pub use_positions: bool,
    pub len: usize,
    pub vars: usize,
    pub dim: usize,
}

impl SeriesTransformer {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &ModelConfig) -> Self {
        let vars = cfg.series_vars();
        let d = cfg.embed_dim;
        SeriesTransformer {
            in_proj: Linear::new(store, init, &format!("{name}.in_proj"), vars, d),
            blocks: (0..cfg.depth)
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
                .collect(),
            positions: sinusoidal_positions(cfg.series_len, d),
            use_positions: true,
            len: cfg.series_len,
            vars,
            dim: d,
        }
    }

    pub fn param_count(cfg: &ModelConfig) -> usize {
        Linear::param_count(cfg.series_vars(), cfg.embed_dim)
            + cfg.depth * TransformerBlock::param_count(cfg.embed_dim, cfg.mlp_ratio)
    }

    pub fn forward(&self, ctx: &mut Ctx, series: Var) -> Result<Var> {
        expect_rank(ctx, series, "encode_series", &[None, Some(self.len), Some(self.vars)])?;
        let b = ctx.tape.shape(series)[0];
        let x = ctx.tape.reshape(series, &[b * self.len, self.vars])?;
        let x = self.in_proj.forward(ctx, x)?;
        let mut x = ctx.tape.reshape(x, &[b, self.len, self.dim])?;
        if self.use_positions {
            let pe = ctx.input(self.positions.clone());
            x = ctx.tape.add(x, pe)?;
        }
        let mut x = ctx.tape.reshape(x, &[b * self.len, self.dim])?;
        for blk in &self.blocks {
            x = blk.forward(ctx, x, b, self.len)?;
        }
        let x = ctx.tape.reshape(x, &[b, self.len, self.dim])?;
        ctx.tape.mean_axis(x, 1, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn encoder(seed: u64) -> (ParamStore, SeriesTransformer) {
        let cfg = ModelConfig::desk();
        let mut store = ParamStore::new();
        let enc = SeriesTransformer::new(&mut store, &mut Init::new(seed), "series", &cfg);
        (store, enc)
    }

    fn run(store: &ParamStore, enc: &SeriesTransformer, t: &Tensor) -> Tensor {
        let mut ctx = Ctx::eval(store);
        let x = ctx.input(t.clone());
        let y = enc.forward(&mut ctx, x).unwrap();
        ctx.tape.value(y).clone()
    }

    #[test]
    fn output_shape() {
        let (store, enc) = encoder(0);
        let t = Tensor::full(&[2, 72, 11], 0.3);
        assert_eq!(run(&store, &enc, &t).shape(), &[2, 32]);
    }

    #[test]
    fn wrong_variable_count_is_rejected() {
        let (store, enc) = encoder(0);
        let mut ctx = Ctx::eval(&store);
        let x = ctx.input(Tensor::zeros(&[1, 72, 5]));
        assert!(matches!(enc.forward(&mut ctx, x), Err(Error::Shape { .. })));
    }

    #[test]
    fn constant_series_through_identity_blocks() {
        let (mut store, mut enc) = encoder(1);
        for b in &enc.blocks {
            b.zero_residual_branches(&mut store);
        }
        enc.use_positions = false;
        let c: Vec<f64> = (0..11).map(|v| v as f64 * 0.1 - 0.4).collect();
        let series = Tensor::new(vec![1, 72, 11], c.repeat(72)).unwrap();
        let out = run(&store, &enc, &series);
        // projection of the constant row
        let w = store.get(enc.in_proj.weight).data();
        let mut want = store.get(enc.in_proj.bias).data().to_vec();
        for (i, cv) in c.iter().enumerate() {
            for j in 0..32 {
                want[j] += cv * w[i * 32 + j];
            }
        }
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn positions_break_time_permutation_invariance() {
        let (store, mut enc) = encoder(2);
        // a series whose rows differ only in a short window, padded with a constant
        let mut rows = vec![vec![0.25; 11]; 72];
        rows[3] = (0..11).map(|v| (v as f64).sin()).collect();
        rows[10] = (0..11).map(|v| (v as f64 * 0.5).cos()).collect();
        let mut shuffled = rows.clone();
        shuffled.swap(3, 40);
        shuffled.swap(10, 60);
        let a = Tensor::new(vec![1, 72, 11], rows.concat()).unwrap();
        let b = Tensor::new(vec![1, 72, 11], shuffled.concat()).unwrap();

        enc.use_positions = false;
        let diff = run(&store, &enc, &a).max_abs_diff(&run(&store, &enc, &b));
        assert!(diff < 1e-12, "{diff}");
        enc.use_positions = true;
        let diff = run(&store, &enc, &a).max_abs_diff(&run(&store, &enc, &b));
        assert!(diff > 1e-9, "{diff}");
    }

    #[test]
    fn sinusoid_first_row() {
        let pe = sinusoidal_positions(3, 4);
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.data()[4] - 1f64.sin()).abs() < 1e-15);
    }
}
