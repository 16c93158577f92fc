use super::expect_rank;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::{Ctx, Init, ParamId, ParamStore, INIT_STD};
use crate::tensor::{Tensor, Var};

/// Single-layer, single-direction LSTM whose final hidden state is the
/// series embedding. Gate order in the packed weights is input, forget,
/// cell, output.
#[derive(Debug, Clone)]
pub struct LstmEncoder {
    /// `[V, 4d]`
    pub w_x: ParamId,
    /// `[d, 4d]`
    pub w_h: ParamId,
    /// `[4d]`
    pub bias: ParamId,
    pub len: usize,
    pub vars: usize,
    pub dim: usize,
}

impl LstmEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &ModelConfig) -> Self {
        let (v, d) = (cfg.series_vars(), cfg.embed_dim);
        LstmEncoder {
            w_x: store.add(format!("{name}.w_x"), init.normal(&[v, 4 * d], INIT_STD)),
            w_h: store.add(format!("{name}.w_h"), init.normal(&[d, 4 * d], INIT_STD)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[4 * d])),
            len: cfg.series_len,
            vars: v,
            dim: d,
        }
    }

    pub fn param_count(cfg: &ModelConfig) -> usize {
        let (v, d) = (cfg.series_vars(), cfg.embed_dim);
        4 * d * (v + d + 1)
    }

    /// One recurrence step from the pre-activation input contribution
    /// `x_part: [B, 4d]` (already including the bias).
    pub fn cell(&self, ctx: &mut Ctx, x_part: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let d = self.dim;
        let w_h = ctx.p(self.w_h);
        let hh = ctx.tape.matmul(h, w_h)?;
        let z = ctx.tape.add(x_part, hh)?;
        let gate = |ctx: &mut Ctx, k: usize| ctx.tape.slice(z, 1, k * d, d);
        let i = gate(ctx, 0)?;
        let i = ctx.tape.sigmoid(i);
        let f = gate(ctx, 1)?;
        let f = ctx.tape.sigmoid(f);
        let g = gate(ctx, 2)?;
        let g = ctx.tape.tanh(g);
        let o = gate(ctx, 3)?;
        let o = ctx.tape.sigmoid(o);
        let fc = ctx.tape.mul(f, c)?;
        let ig = ctx.tape.mul(i, g)?;
        let c = ctx.tape.add(fc, ig)?;
        let tc = ctx.tape.tanh(c);
        let h = ctx.tape.mul(o, tc)?;
        Ok((h, c))
    }

    pub fn forward(&self, ctx: &mut Ctx, series: Var) -> Result<Var> {
        expect_rank(ctx, series, "encode_series", &[None, Some(self.len), Some(self.vars)])?;
        let b = ctx.tape.shape(series)[0];
        let d = self.dim;
        // input contributions for all steps at once
        let x = ctx.tape.reshape(series, &[b * self.len, self.vars])?;
        let w_x = ctx.p(self.w_x);
        let xw = ctx.tape.matmul(x, w_x)?;
        let bias = ctx.p(self.bias);
        let xw = ctx.tape.add(xw, bias)?;
        let xw = ctx.tape.reshape(xw, &[b, self.len, 4 * d])?;
        let mut h = ctx.input(Tensor::zeros(&[b, d]));
        let mut c = ctx.input(Tensor::zeros(&[b, d]));
        for t in 0..self.len {
            let xt = ctx.tape.slice(xw, 1, t, 1)?;
            let xt = ctx.tape.reshape(xt, &[b, 4 * d])?;
            (h, c) = self.cell(ctx, xt, h, c)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SeriesEncoderKind;
    use crate::nn::{grad_check_params, sample_coords};

    fn cfg(len: usize) -> ModelConfig {
        let mut c = ModelConfig::desk();
        c.series_encoder = SeriesEncoderKind::Lstm;
        c.series_len = len;
        c.embed_dim = 8;
        c
    }

    fn series(b: usize, len: usize) -> Tensor {
        let data = (0..b * len * 11).map(|i| ((i as f64) * 0.41).sin()).collect();
        Tensor::new(vec![b, len, 11], data).unwrap()
    }

    #[test]
    fn zero_weights_zero_state() {
        let c = cfg(6);
        let mut store = ParamStore::new();
        let enc = LstmEncoder::new(&mut store, &mut Init::new(0), "series", &c);
        for t in store.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let mut ctx = Ctx::eval(&store);
        let x = ctx.input(series(3, 6));
        let h = enc.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.shape(h), &[3, 8]);
        assert!(ctx.tape.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_step_is_one_cell() {
        let c = cfg(1);
        let mut store = ParamStore::new();
        let enc = LstmEncoder::new(&mut store, &mut Init::new(1), "series", &c);
        let x = series(1, 1);
        let mut ctx = Ctx::eval(&store);
        let xv = ctx.input(x.clone());
        let h = enc.forward(&mut ctx, xv).unwrap();
        let h = ctx.tape.value(h).clone();

        // direct evaluation of one LSTM cell from zero state
        let (wx, bias) = (store.get(enc.w_x).data(), store.get(enc.bias).data());
        let d = 8;
        let z: Vec<f64> = (0..4 * d)
            .map(|j| bias[j] + (0..11).map(|v| x.data()[v] * wx[v * 4 * d + j]).sum::<f64>())
            .collect();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for k in 0..d {
            let (i, g, o) = (sig(z[k]), z[2 * d + k].tanh(), sig(z[3 * d + k]));
            let c = i * g;
            assert!((h.data()[k] - o * c.tanh()).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_through_five_steps() {
        let c = cfg(5);
        let mut store = ParamStore::new();
        let enc = LstmEncoder::new(&mut store, &mut Init::new(2), "series", &c);
        for t in store.tensors_mut() {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.3 * ((i as f64) * 1.31).sin();
            }
        }
        let x = series(2, 5);
        let coords = sample_coords(&store, 40, 1);
        let check = grad_check_params(&store, &coords, 1e-5, |ctx| {
            let xv = ctx.input(x.clone());
            let h = enc.forward(ctx, xv)?;
            let sq = ctx.tape.mul(h, h)?;
            Ok(ctx.tape.sum(sq))
        })
        .unwrap();
        assert!(check.max_error < 1e-4 && check.straddled == 0, "{check:?}");
    }

    #[test]
    fn param_count() {
        let c = cfg(4);
        let mut store = ParamStore::new();
        LstmEncoder::new(&mut store, &mut Init::new(0), "series", &c);
        assert_eq!(store.numel(), LstmEncoder::param_count(&c));
    }
}
