use crate::error::Result;
use crate::nn::{Ctx, Init, LayerNorm, Linear, ParamStore};
use crate::tensor::Var;
#[cfg(test)]
use crate::tensor::Tensor;

/// Scaled dot-product attention over `[G, T, dh]` groups. Returns the
/// attended values and the attention weights `[G, T, T]`.
pub fn attend(ctx: &mut Ctx, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let dh = ctx.tape.shape(q)[2];
    let scores = ctx.tape.matmul_t(q, k)?;
    let scores = ctx.tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = ctx.tape.softmax(scores, 2)?;
    let out = ctx.tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Pre-norm transformer block: multi-head self-attention and a gelu MLP,
/// each wrapped in a residual connection.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub dim: usize,
    pub dropout: f64,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        dropout: f64,
    ) -> Self {
        let hidden = dim * mlp_ratio;
        TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            q: Linear::new(store, init, &format!("{name}.attn.q"), dim, dim),
            k: Linear::new(store, init, &format!("{name}.attn.k"), dim, dim),
            v: Linear::new(store, init, &format!("{name}.attn.v"), dim, dim),
            o: Linear::new(store, init, &format!("{name}.attn.o"), dim, dim),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            fc1: Linear::new(store, init, &format!("{name}.mlp.fc1"), dim, hidden),
            fc2: Linear::new(store, init, &format!("{name}.mlp.fc2"), hidden, dim),
            heads,
            dim,
            dropout,
        }
    }

    pub fn param_count(dim: usize, mlp_ratio: usize) -> usize {
        let hidden = dim * mlp_ratio;
        2 * 2 * dim + 4 * Linear::param_count(dim, dim) + Linear::param_count(dim, hidden) + Linear::param_count(hidden, dim)
    }

    /// Zeroes the two residual-branch output layers so the block is the
    /// identity map.
    pub fn zero_residual_branches(&self, store: &mut ParamStore) {
        for id in [self.o.weight, self.o.bias, self.fc2.weight, self.fc2.bias] {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }

    /// Multi-head self-attention sublayer (without residual). `x` is
    /// `[B·T, d]`; the second value holds the weights `[B·H, T, T]`.
    pub fn self_attention(&self, ctx: &mut Ctx, x: Var, batch: usize, tokens: usize) -> Result<(Var, Var)> {
        let (h, dh) = (self.heads, self.dim / self.heads);
        let split = |ctx: &mut Ctx, t: Var| -> Result<Var> {
            let t = ctx.tape.reshape(t, &[batch, tokens, h, dh])?;
            let t = ctx.tape.permute(t, &[0, 2, 1, 3])?;
            ctx.tape.reshape(t, &[batch * h, tokens, dh])
        };
        let q = self.q.forward(ctx, x)?;
        let q = split(ctx, q)?;
        let k = self.k.forward(ctx, x)?;
        let k = split(ctx, k)?;
        let v = self.v.forward(ctx, x)?;
        let v = split(ctx, v)?;
        let (out, weights) = attend(ctx, q, k, v)?;
        let out = ctx.tape.reshape(out, &[batch, h, tokens, dh])?;
        let out = ctx.tape.permute(out, &[0, 2, 1, 3])?;
        let out = ctx.tape.reshape(out, &[batch * tokens, self.dim])?;
        Ok((self.o.forward(ctx, out)?, weights))
    }

    /// `x: [B·T, d]` to `[B·T, d]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, batch: usize, tokens: usize) -> Result<Var> {
        let h = self.ln1.forward(ctx, x)?;
        let (a, _) = self.self_attention(ctx, h, batch, tokens)?;
        let a = ctx.dropout(a, self.dropout);
        let x = ctx.tape.add(x, a)?;
        let h = self.ln2.forward(ctx, x)?;
        let h = self.fc1.forward(ctx, h)?;
        let h = ctx.tape.gelu(h);
        let h = self.fc2.forward(ctx, h)?;
        let h = ctx.dropout(h, self.dropout);
        ctx.tape.add(x, h)
    }
}

/// Token-major `[T, d]` tensor with row `t` set to `rows[t]`.
#[cfg(test)]
pub(crate) fn tokens_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).expect("rectangular rows")
}
