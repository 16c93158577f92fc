use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// tanh approximation
    Gelu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Softplus,
    Sqrt,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    fn forward(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Exp => x.exp(),
            Activation::Log => x.ln(),
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Activation::Sqrt => x.sqrt(),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Exp => y,
            Activation::Log => 1.0 / x,
            Activation::Softplus => sigmoid(x),
            // subgradient 0 at the origin
            Activation::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// How an operand's elements map onto the broadcast output.
#[derive(Debug, Clone)]
enum Bcast {
    Same,
    /// operand repeats every `len` output elements
    Suffix(usize),
    Map(Vec<usize>),
}

impl Bcast {
    fn index(&self, o: usize) -> usize {
        match self {
            Bcast::Same => o,
            Bcast::Suffix(len) => o % len,
            Bcast::Map(m) => m[o],
        }
    }
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: Binary,
        a: usize,
        b: usize,
        a_map: Bcast,
        b_map: Bcast,
    },
    Scale {
        x: usize,
        c: f64,
    },
    AddScalar {
        x: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax {
        x: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    MaskedLogSoftmax {
        x: usize,
        mask: Vec<bool>,
        n: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        d: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Act {
        x: usize,
        kind: Activation,
    },
    Sum {
        x: usize,
        outer: usize,
        n: usize,
        inner: usize,
        scale: f64,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        /// output flat index -> input flat index
        src: Vec<usize>,
    },
    Concat {
        xs: Vec<usize>,
        outer: usize,
        /// per-input contiguous block length (axis_len * inner)
        blocks: Vec<usize>,
    },
    Slice {
        x: usize,
        outer: usize,
        in_block: usize,
        start: usize,
        len: usize,
    },
    Gather {
        x: usize,
        idx: Vec<usize>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations in execution order; [`Tape::backward`] replays them in
/// reverse, so every operation's inputs precede it by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// Records a leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Sign of every recorded ReLU input, in recording order. Two evaluations
    /// with equal patterns lie on the same linear piece of every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Act { x, kind: Activation::Relu } = n.op {
                out.extend(self.nodes[x].value.data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// Gradient populated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad matches value shape"))
    }

    // ---- elementwise --------------------------------------------------

    pub fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb)?;
        let a_map = bcast_map(&sa, &out_shape);
        let b_map = bcast_map(&sb, &out_shape);
        let len: usize = out_shape.iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        if kind == Binary::Div && db.contains(&0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        let mut out = Vec::with_capacity(len);
        for o in 0..len {
            let (x, y) = (da[a_map.index(o)], db[b_map.index(o)]);
            out.push(match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            });
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            rg,
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
                a_map,
                b_map,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|e| e * c).collect(),
        };
        let rg = self.rg(x.0);
        self.push(out, rg, Op::Scale { x: x.0, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|e| e + c).collect(),
        };
        let rg = self.rg(x.0);
        self.push(out, rg, Op::AddScalar { x: x.0 })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let v = self.value(x);
        match kind {
            Activation::Log if v.data.iter().any(|&e| e <= 0.0) => {
                return Err(Error::Domain("log of a non-positive value".into()))
            }
            Activation::Sqrt if v.data.iter().any(|&e| e < 0.0) => {
                return Err(Error::Domain("sqrt of a negative value".into()))
            }
            _ => {}
        }
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&e| kind.forward(e)).collect(),
        };
        let rg = self.rg(x.0);
        Ok(self.push(out, rg, Op::Act { x: x.0, kind }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu).expect("relu is total")
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu).expect("gelu is total")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh).expect("tanh is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid).expect("sigmoid is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Exp).expect("exp is total")
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Softplus).expect("softplus is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Log)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sqrt)
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let v = self.value(x);
        let mask: Vec<f64> = (0..v.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().zip(&mask).map(|(a, m)| a * m).collect(),
        };
        let rg = self.rg(x.0);
        self.push(out, rg, Op::Dropout { x: x.0, mask })
    }

    // ---- linear algebra -----------------------------------------------

    /// Matrix product of rank-2 operands, or batched product of rank-3
    /// operands sharing the leading dimension.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::shape("matmul", &sa, &sb);
        let (batch, m, k, bk, n) = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (bk, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                (1, sa[0], sa[1], bk, n)
            }
            (3, 3) if sa[0] == sb[0] => {
                let (bk, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
                (sa[0], sa[1], sa[2], bk, n)
            }
            _ => return Err(err()),
        };
        if k != bk {
            return Err(err());
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            let a_t = &da[t * m * k..(t + 1) * m * k];
            let b_t = &db[t * k * n..(t + 1) * k * n];
            let c_t = &mut out[t * m * n..(t + 1) * m * n];
            if trans_b {
                kernels::gemm_nt(a_t, b_t, c_t, m, k, n);
            } else {
                kernels::gemm_nn(a_t, b_t, c_t, m, k, n);
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
                batch,
                m,
                k,
                n,
            },
        ))
    }

    /// 2-D convolution over `[B, C, H, W]` with weights `[O, C, K, K]` and an
    /// optional per-output-channel bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] || stride == 0 {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape("conv2d bias", &sw, self.shape(b)));
            }
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            height: sx[2],
            width: sx[3],
            out_ch: sw[0],
            kernel: sw[2],
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
        );
        let shape = vec![geom.batch, geom.out_ch, geom.out_h(), geom.out_w()];
        let rg = self.rg(x.0) || self.rg(w.0) || bias.is_some_and(|b| self.rg(b.0));
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: bias.map(|b| b.0),
                geom,
            },
        ))
    }

    // ---- normalisation ------------------------------------------------

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        let data = self.value(x).data();
        let mut out = vec![0.0; data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    max = max.max(data[at(j)]);
                }
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (data[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[at(j)] /= sum;
                }
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::Softmax {
                x: x.0,
                outer,
                n,
                inner,
            },
        ))
    }

    /// Log-softmax along the last axis of a matrix where entries with
    /// `mask == false` are excluded from the normaliser. Excluded entries
    /// come out as 0 and receive no gradient.
    pub fn masked_log_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || mask.len() != shape[0] * shape[1] {
            return Err(Error::shape("masked_log_softmax", &shape, &[mask.len()]));
        }
        let n = shape[1];
        let data = self.value(x).data();
        let mut out = vec![0.0; data.len()];
        for r in 0..shape[0] {
            let row = &data[r * n..(r + 1) * n];
            let m = &mask[r * n..(r + 1) * n];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Domain(format!("row {r} is fully masked")));
            }
            let mut sum = 0.0;
            for (v, &keep) in row.iter().zip(m) {
                if keep {
                    sum += (v - max).exp();
                }
            }
            let lse = max + sum.ln();
            for j in 0..n {
                if m[j] {
                    out[r * n + j] = row[j] - lse;
                }
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::MaskedLogSoftmax {
                x: x.0,
                mask: mask.to_vec(),
                n,
            },
        ))
    }

    /// Normalises over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::Domain("layer_norm eps must be positive".into()));
        }
        let data = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = data.len() / d;
        let mut xhat = vec![0.0; data.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; data.len()];
        for r in 0..rows {
            let row = &data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x.0) || self.rg(gain.0) || self.rg(bias.0);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                d,
                xhat,
                rstd,
            },
        ))
    }

    // ---- reductions ---------------------------------------------------

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.reduce_impl(x, 1, n, 1, 1.0, vec![1])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.reduce_impl(x, 1, n, 1, 1.0 / n as f64, vec![1])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce_axis(x, axis, keepdim, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce_axis(x, axis, keepdim, true)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, keepdim: bool, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        let mut out_shape = shape.clone();
        if keepdim || shape.len() == 1 {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let scale = if mean { 1.0 / n as f64 } else { 1.0 };
        Ok(self.reduce_impl(x, outer, n, inner, scale, out_shape))
    }

    fn reduce_impl(
        &mut self,
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
        scale: f64,
        out_shape: Vec<usize>,
    ) -> Var {
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &data[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        if scale != 1.0 {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let rg = self.rg(x.0);
        self.push(
            Tensor::new(out_shape, out).expect("reduced shape"),
            rg,
            Op::Sum {
                x: x.0,
                outer,
                n,
                inner,
                scale,
            },
        )
    }

    // ---- shape manipulation -------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.len() {
            return Err(Error::shape("reshape", v.shape(), shape));
        }
        let out = Tensor::new(shape.to_vec(), v.data.clone())?;
        let rg = self.rg(x.0);
        Ok(self.push(out, rg, Op::Reshape { x: x.0 }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", &shape, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let in_strides = strides(&shape);
        let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let len = shape.iter().product::<usize>();
        let mut src = Vec::with_capacity(len);
        let mut idx = vec![0usize; shape.len()];
        let mut offset = 0usize;
        for _ in 0..len {
            src.push(offset);
            for ax in (0..idx.len()).rev() {
                idx[ax] += 1;
                offset += perm_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                offset -= perm_strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        let data = self.value(x).data();
        let out: Vec<f64> = src.iter().map(|&s| data[s]).collect();
        let rg = self.rg(x.0);
        Ok(self.push(Tensor::new(out_shape, out)?, rg, Op::Permute { x: x.0, src }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::Axis { axis: 1, rank: r });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::Data("concat of nothing".into()))?).to_vec();
        let (outer, _, inner) = split_axis(&first, axis)?;
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        let mut blocks = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            out_shape[axis] += s[axis];
            blocks.push(s[axis] * inner);
        }
        let total: usize = blocks.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&x, &blk) in xs.iter().zip(&blocks) {
                out.extend_from_slice(&self.value(x).data()[o * blk..(o + 1) * blk]);
            }
        }
        let rg = xs.iter().any(|x| self.rg(x.0));
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            rg,
            Op::Concat {
                xs: xs.iter().map(|x| x.0).collect(),
                outer,
                blocks,
            },
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        if len == 0 || start + len > n {
            return Err(Error::shape("slice", &shape, &[start, len]));
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&data[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let rg = self.rg(x.0);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            rg,
            Op::Slice {
                x: x.0,
                outer,
                in_block: n * inner,
                start: start * inner,
                len: len * inner,
            },
        ))
    }

    /// Picks flat elements by index into a vector of shape `[idx.len()]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let data = self.value(x).data();
        if idx.is_empty() || idx.iter().any(|&i| i >= data.len()) {
            return Err(Error::shape("gather", self.shape(x), &[idx.len()]));
        }
        let out: Vec<f64> = idx.iter().map(|&i| data[i]).collect();
        let rg = self.rg(x.0);
        Ok(self.push(
            Tensor::vector(out),
            rg,
            Op::Gather {
                x: x.0,
                idx: idx.to_vec(),
            },
        ))
    }

    // ---- backward -----------------------------------------------------

    /// Reverse pass from a single-element `loss`. Gradients from any earlier
    /// call are discarded first, so every call starts from zero.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Data("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward (loss must be scalar)", self.shape(loss), &[1]));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Binary {
                kind,
                a,
                b,
                a_map,
                b_map,
            } => {
                let (a, b) = (*a, *b);
                let va = &nodes[a].value.data;
                let vb = &nodes[b].value.data;
                if let Some(ga) = acc(nodes, grads, a) {
                    for (o, &go) in g.iter().enumerate() {
                        let y = vb[b_map.index(o)];
                        ga[a_map.index(o)] += match kind {
                            Binary::Add | Binary::Sub => go,
                            Binary::Mul => go * y,
                            Binary::Div => go / y,
                        };
                    }
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    for (o, &go) in g.iter().enumerate() {
                        let x = va[a_map.index(o)];
                        let y = vb[b_map.index(o)];
                        gb[b_map.index(o)] += match kind {
                            Binary::Add => go,
                            Binary::Sub => -go,
                            Binary::Mul => go * x,
                            Binary::Div => -go * x / (y * y),
                        };
                    }
                }
            }
            Op::Scale { x, c } => {
                let c = *c;
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (d, s) in gx.iter_mut().zip(g) {
                        *d += s * c;
                    }
                }
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (d, s) in gx.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    for ((d, s), m) in gx.iter_mut().zip(g).zip(mask) {
                        *d += s * m;
                    }
                }
            }
            Op::Act { x, kind } => {
                let x = *x;
                let xin = &nodes[x].value.data;
                let y = &nodes[i].value.data;
                if let Some(gx) = acc(nodes, grads, x) {
                    for j in 0..g.len() {
                        gx[j] += g[j] * kind.derivative(xin[j], y[j]);
                    }
                }
            }
            &Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let va = &nodes[a].value.data;
                let vb = &nodes[b].value.data;
                if let Some(ga) = acc(nodes, grads, a) {
                    for t in 0..batch {
                        let g_t = &g[t * m * n..(t + 1) * m * n];
                        let b_t = &vb[t * k * n..(t + 1) * k * n];
                        let ga_t = &mut ga[t * m * k..(t + 1) * m * k];
                        if trans_b {
                            kernels::gemm_nn(g_t, b_t, ga_t, m, n, k);
                        } else {
                            kernels::gemm_nt(g_t, b_t, ga_t, m, n, k);
                        }
                    }
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    for t in 0..batch {
                        let g_t = &g[t * m * n..(t + 1) * m * n];
                        let a_t = &va[t * m * k..(t + 1) * m * k];
                        let gb_t = &mut gb[t * k * n..(t + 1) * k * n];
                        if trans_b {
                            kernels::gemm_tn(g_t, a_t, gb_t, n, m, k);
                        } else {
                            kernels::gemm_tn(a_t, g_t, gb_t, k, m, n);
                        }
                    }
                }
            }
            &Op::Softmax { x, outer, n, inner } => {
                let y = &nodes[i].value.data;
                if let Some(gx) = acc(nodes, grads, x) {
                    for o in 0..outer {
                        for c in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + c;
                            let mut dot = 0.0;
                            for j in 0..n {
                                dot += g[at(j)] * y[at(j)];
                            }
                            for j in 0..n {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::MaskedLogSoftmax { x, mask, n } => {
                let (x, n) = (*x, *n);
                let y = &nodes[i].value.data;
                if let Some(gx) = acc(nodes, grads, x) {
                    for r in 0..y.len() / n {
                        let mut gsum = 0.0;
                        for j in 0..n {
                            if mask[r * n + j] {
                                gsum += g[r * n + j];
                            }
                        }
                        for j in 0..n {
                            let at = r * n + j;
                            if mask[at] {
                                gx[at] += g[at] - y[at].exp() * gsum;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                d,
                xhat,
                rstd,
            } => {
                let (x, gain, bias, d) = (*x, *gain, *bias, *d);
                let gvals = &nodes[gain].value.data;
                let rows = g.len() / d;
                if let Some(gg) = acc(nodes, grads, gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = acc(nodes, grads, bias) {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(gx) = acc(nodes, grads, x) {
                    let inv_d = 1.0 / d as f64;
                    for r in 0..rows {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = g[r * d + j] * gvals[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dh = g[r * d + j] * gvals[j];
                            let h = xhat[r * d + j];
                            gx[r * d + j] += rstd[r] * (dh - inv_d * sum_dh - h * inv_d * sum_dh_h);
                        }
                    }
                }
            }
            &Op::Sum {
                x,
                outer,
                n,
                inner,
                scale,
            } => {
                if let Some(gx) = acc(nodes, grads, x) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..n {
                            let dst = &mut gx[(o * n + j) * inner..(o * n + j + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s * scale;
                            }
                        }
                    }
                }
            }
            Op::Permute { x, src } => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (o, &s) in src.iter().enumerate() {
                        gx[s] += g[o];
                    }
                }
            }
            Op::Concat { xs, outer, blocks } => {
                let total: usize = blocks.iter().sum();
                let mut offset = 0;
                for (&x, &blk) in xs.iter().zip(blocks) {
                    if let Some(gx) = acc(nodes, grads, x) {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + blk];
                            for (d, s) in gx[o * blk..(o + 1) * blk].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += blk;
                }
            }
            &Op::Slice {
                x,
                outer,
                in_block,
                start,
                len,
            } => {
                if let Some(gx) = acc(nodes, grads, x) {
                    for o in 0..outer {
                        let dst = &mut gx[o * in_block + start..o * in_block + start + len];
                        for (d, s) in dst.iter_mut().zip(&g[o * len..(o + 1) * len]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Gather { x, idx } => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (&j, s) in idx.iter().zip(g) {
                        gx[j] += s;
                    }
                }
            }
            &Op::Conv2d { x, w, b, geom } => {
                let need_dx = nodes[x].requires_grad;
                let need_dw = nodes[w].requires_grad;
                let need_db = b.is_some_and(|b| nodes[b].requires_grad);
                let (dx, dw, db) = kernels::conv2d_backward(
                    &geom,
                    &nodes[x].value.data,
                    &nodes[w].value.data,
                    g,
                    need_dx,
                    need_dw,
                    need_db,
                );
                for (target, delta) in [(Some(x), dx), (Some(w), dw), (b, db)] {
                    if let (Some(t), Some(delta)) = (target, delta) {
                        if let Some(gt) = acc(nodes, grads, t) {
                            for (d, s) in gt.iter_mut().zip(&delta) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], target: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[target].requires_grad {
        return None;
    }
    let len = nodes[target].value.len();
    Some(grads[target].get_or_insert_with(|| vec![0.0; len]))
}


fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape("broadcast", a, b)),
        };
    }
    Ok(out)
}

fn bcast_map(shape: &[usize], out: &[usize]) -> Bcast {
    if shape == out {
        return Bcast::Same;
    }
    let len: usize = shape.iter().product();
    let out_len: usize = out.iter().product();
    // right-aligned suffix of the output shape (leading ones allowed)
    let trimmed: Vec<usize> = shape.iter().copied().skip_while(|&d| d == 1).collect();
    if out.ends_with(&trimmed) {
        return Bcast::Suffix(len.max(1));
    }
    let rank = out.len();
    let padded: Vec<usize> = std::iter::repeat_n(1, rank - shape.len())
        .chain(shape.iter().copied())
        .collect();
    let src_strides = strides(&padded);
    let out_strides = strides(out);
    let map = (0..out_len)
        .map(|o| {
            let mut src = 0;
            for ax in 0..rank {
                let coord = (o / out_strides[ax]) % out[ax];
                if padded[ax] != 1 {
                    src += coord * src_strides[ax];
                }
            }
            src
        })
        .collect();
    Bcast::Map(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_values() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 1], &[1., 1.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3., 7.]);
        assert_eq!(tape.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(t(&[2, 2], &[0.3, -1.5, 2.0, 7.0]));
        let c = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(c), tape.value(m));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[2., 4.]));
        let b = tape.constant(t(&[2], &[2., 2.]));
        let z = tape.constant(Tensor::zeros(&[2]));
        let q = tape.div(a, b).unwrap();
        assert_eq!(tape.value(q).data(), &[1., 2.]);
        let s = tape.add(a, z).unwrap();
        assert_eq!(tape.value(s), tape.value(a));
        assert!(matches!(tape.div(a, z), Err(Error::Domain(_))));
    }

    #[test]
    fn broadcasting_rules() {
        let mut tape = Tape::new();
        let m = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let row = tape.constant(t(&[3], &[10., 20., 30.]));
        let col = tape.constant(t(&[2, 1], &[100., 200.]));
        let bad = tape.constant(t(&[2], &[1., 1.]));
        let r = tape.add(m, row).unwrap();
        assert_eq!(tape.value(r).data(), &[11., 22., 33., 14., 25., 36.]);
        let c = tape.add(m, col).unwrap();
        assert_eq!(tape.value(c).data(), &[101., 102., 103., 204., 205., 206.]);
        assert!(matches!(tape.add(m, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0., 0.]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        let x = tape.constant(t(&[2], &[1000., 0.]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        assert!(v.iter().all(|e| e.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-300_f64.max(f64::EPSILON));
        assert!(v[1] < 1e-300);
    }

    #[test]
    fn softmax_non_last_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0., 5., 0., 5.]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_definition_cases() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let c = tape.constant(t(&[1, 3], &[4., 4., 4.]));
        let y = tape.layer_norm(c, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let x = tape.constant(t(&[1, 3], &[1., 2., 3.]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let v = tape.value(y).data();
        let mean = v.iter().sum::<f64>() / 3.0;
        let var = v.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn activation_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[-1., 2.]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0., 2.]);
        let z = tape.constant(t(&[1], &[0.]));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data(), &[0.5]);
        assert!(matches!(tape.log(x), Err(Error::Domain(_))));
        let sp = tape.softplus(z);
        assert!((tape.value(sp).data()[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1., 2., 3.]));
        let s = tape.sum(x);
        assert_eq!(tape.value(s).data(), &[6.]);
        let c = tape.constant(Tensor::full(&[2, 3], 1.25));
        let m = tape.mean(c);
        assert_eq!(tape.value(m).data(), &[1.25]);
        let m = tape.mean(x);
        tape.backward(m).unwrap();
        for g in tape.grad(x).unwrap().data() {
            assert!((g - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(matches!(tape.sum_axis(x, 1, false), Err(Error::Axis { .. })));
    }

    #[test]
    fn backward_analytic_cases() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[0.5, -1.0, 2.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1., 1., 1.]);

        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, -2.0, 4.0]);
        // a second call recomputes from zero instead of accumulating
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, -2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
        let mut empty = Tape::new();
        assert!(empty.backward(Var(0)).is_err());
    }

    #[test]
    fn permute_and_slice_concat() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let p = tape.transpose(x).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 4., 2., 5., 3., 6.]);
        assert_eq!(tape.shape(p), &[3, 2]);
        let s = tape.slice(x, 1, 1, 2).unwrap();
        assert_eq!(tape.value(s).data(), &[2., 3., 5., 6.]);
        let c = tape.concat(&[x, s], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 3., 2., 3., 4., 5., 6., 5., 6.]);
    }

    #[test]
    fn masked_log_softmax_excludes_entries() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[0., 0., 100.]));
        let y = tape.masked_log_softmax(x, &[true, true, false]).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + 2f64.ln()).abs() < 1e-15);
        assert_eq!(v[2], 0.0);
    }

    #[test]
    fn conv2d_gradients_match_differences() {
        use crate::tensor::grad_check_many;
        let mk = |shape: Vec<usize>, k: f64| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|i| ((i as f64) * k).sin()).collect()).unwrap()
        };
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let xs = [mk(vec![2, 3, 5, 5], 0.7), mk(vec![4, 3, 3, 3], 1.3), mk(vec![4], 0.4)];
            let err = grad_check_many(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                    let y = t.tanh(y);
                    Ok(t.sum(y))
                },
                &xs,
                1e-5,
                None,
            )
            .unwrap();
            assert!(err < 1e-4, "stride {stride} pad {pad}: {err}");
        }
    }
}
