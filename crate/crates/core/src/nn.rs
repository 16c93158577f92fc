//! Parameter storage, the per-pass forward context and the small layers the
//! encoders and heads are assembled from.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Standard deviation of the normal initialiser used for weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Scalar count of the parameters whose names start with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.tensors)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// SHA-256 over the bit patterns of the selected parameters.
    pub fn checksum_with_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            if name.starts_with(prefix) {
                h.update(name.as_bytes());
                for v in t.data() {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// Replaces values from `other` for every parameter with the same name
    /// and shape. Returns how many were copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in other.names.iter().zip(&other.tensors) {
            if let Some(i) = self.names.iter().position(|n| n == name) {
                if self.tensors[i].shape() != t.shape() {
                    return Err(Error::shape("load parameter", self.tensors[i].shape(), t.shape()));
                }
                self.tensors[i] = t.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// Deterministic parameter initialiser.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }
}

/// One forward pass: a fresh tape plus lazily bound parameters.
pub struct Ctx<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    frozen: Vec<bool>,
    pub train: bool,
    pub rng: ChaCha8Rng,
}

impl<'s> Ctx<'s> {
    /// Evaluation-mode context (dropout disabled).
    pub fn eval(store: &'s ParamStore) -> Self {
        Self::new(store, false, 0)
    }

    pub fn new(store: &'s ParamStore, train: bool, seed: u64) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            frozen: vec![false; store.len()],
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Parameters matching `pred` are bound as constants and get no gradient.
    pub fn freeze(&mut self, pred: impl Fn(&str) -> bool) {
        for (f, name) in self.frozen.iter_mut().zip(self.store.names()) {
            *f = pred(name);
        }
    }

    /// The parameter as a tape variable, recorded on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = self.tape.leaf(value, !self.frozen[id.0]);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.train || rate <= 0.0 {
            return x;
        }
        self.tape.dropout(x, rate, &mut self.rng)
    }

    /// Runs the reverse pass and collects one gradient per stored parameter
    /// (zeros for parameters the loss does not touch).
    pub fn backward(&mut self, loss: Var) -> Result<Vec<Tensor>> {
        self.tape.backward(loss)?;
        Ok(self
            .store
            .ids()
            .map(|id| {
                self.bound[id.0]
                    .and_then(|v| self.tape.grad(v))
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape()))
            })
            .collect())
    }
}

/// Fully connected layer `x · W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::with_std(store, init, name, in_dim, out_dim, INIT_STD)
    }

    pub fn with_std(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.normal(&[in_dim, out_dim], std));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    /// Applies the layer to `[n, in]` rows.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let b = ctx.p(self.bias);
        let y = ctx.tape.matmul(x, w)?;
        ctx.tape.add(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[dim])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = ctx.p(self.gain);
        let b = ctx.p(self.bias);
        ctx.tape.layer_norm(x, g, b, Self::EPS)
    }
}

/// Two linear layers with a relu in between.
#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp2 {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dims: [usize; 3]) -> Self {
        Mlp2 {
            hidden: Linear::new(store, init, &format!("{name}.fc1"), dims[0], dims[1]),
            out: Linear::new(store, init, &format!("{name}.fc2"), dims[1], dims[2]),
        }
    }

    pub fn param_count(dims: [usize; 3]) -> usize {
        Linear::param_count(dims[0], dims[1]) + Linear::param_count(dims[1], dims[2])
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.hidden.forward(ctx, x)?;
        let h = ctx.tape.relu(h);
        self.out.forward(ctx, h)
    }
}

/// Outcome of [`grad_check_params`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest relative error over the coordinates that were compared.
    pub max_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation moved some ReLU input
    /// across zero, where the difference quotient does not estimate the
    /// derivative.
    pub straddled: usize,
}

/// Central-difference check over stored parameters. `coords` lists
/// `(parameter, flat index)` pairs to probe.
///
/// The error of a coordinate is `|auto - fd| / max(|fd|, floor)`. The floor
/// is `1e4` times the round-off of the difference quotient,
/// `eps * |loss| / step`, and at least `1e-8`: gradients smaller than that
/// cannot be resolved by central differences at this step.
pub fn grad_check_params<F>(store: &ParamStore, coords: &[(ParamId, usize)], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    let loss_of = |s: &ParamStore| -> Result<(f64, Vec<bool>)> {
        let mut ctx = Ctx::eval(s);
        let l = f(&mut ctx)?;
        Ok((ctx.tape.value(l).data()[0], ctx.tape.relu_pattern()))
    };
    let mut ctx = Ctx::eval(store);
    let loss = f(&mut ctx)?;
    let base = ctx.tape.value(loss).data()[0];
    let pattern = ctx.tape.relu_pattern();
    let grads = ctx.backward(loss)?;
    if loss_of(store)?.0.to_bits() != base.to_bits() {
        return Err(Error::Domain("loss is not deterministic".into()));
    }
    let floor = (1e4 * f64::EPSILON * base.abs() / step).max(1e-8);
    let mut probe = store.clone();
    let mut out = GradCheck {
        max_error: 0.0,
        checked: 0,
        straddled: 0,
    };
    for &(id, j) in coords {
        let orig = store.get(id).data()[j];
        probe.get_mut(id).data_mut()[j] = orig + step;
        let (plus, p_pat) = loss_of(&probe)?;
        probe.get_mut(id).data_mut()[j] = orig - step;
        let (minus, m_pat) = loss_of(&probe)?;
        probe.get_mut(id).data_mut()[j] = orig;
        if p_pat != pattern || m_pat != pattern {
            out.straddled += 1;
            continue;
        }
        let fd = (plus - minus) / (2.0 * step);
        let err = (grads[id.0].data()[j] - fd).abs() / fd.abs().max(floor);
        out.max_error = out.max_error.max(err);
        out.checked += 1;
    }
    Ok(out)
}

/// Up to `per_tensor` seeded coordinates from every parameter tensor.
pub fn sample_coords(store: &ParamStore, per_tensor: usize, seed: u64) -> Vec<(ParamId, usize)> {
    use rand::seq::index::sample;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for id in store.ids() {
        let n = store.get(id).len();
        let k = per_tensor.min(n);
        let mut idx = sample(&mut rng, n, k).into_vec();
        idx.sort_unstable();
        out.extend(idx.into_iter().map(|j| (id, j)));
    }
    out
}
