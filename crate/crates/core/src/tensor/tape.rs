use rand::Rng;

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::{strides, ParamId, ParamStore, Tensor};
use crate::error::{contract_err, dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Sentinel index in gather maps meaning "zero padding".
const PAD: u32 = u32::MAX;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst { x: Var, factor: Vec<f32> },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, s: f32 },
    Sum(Var),
    Mean(Var),
    Softmax { x: Var, cols: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f32>, rstd: Vec<f32>, cols: usize },
    GroupNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
        batch: usize,
        positions: usize,
        channels: usize,
        groups: usize,
    },
    Swish(Var),
    Gelu(Var),
    Sigmoid(Var),
    Embedding { table: Var, ids: Vec<usize>, dim: usize },
    Gather { x: Var, index: Vec<u32> },
    Concat { xs: Vec<Var>, outer: usize, inner: Vec<usize> },
    AvgPool2x { x: Var, batch: usize, h: usize, w: usize, c: usize },
    StraightThrough(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f32>, probs: Vec<f32>, eps: f32, total_weight: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order; backward walks them in reverse,
/// which is a valid topological order by construction.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), grad_enabled: true }
    }

    /// A tape on which parameters are loaded as constants.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is kept on the tape (used for input gradients).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: rg });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.get(id).value.clone();
        let rg = self.grad_enabled;
        self.nodes.push(Node { value, op: Op::Param(id), requires_grad: rg });
        Var(self.nodes.len() - 1)
    }

    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    /// `x[.., k] · w[k, n]`, flattening the leading axes of `x`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 {
            return dim_err(format!("matmul rhs must be 2-D, got {sb:?}"));
        }
        let k = *sa.last().unwrap();
        if k != sb[0] {
            return dim_err(format!("matmul inner extents differ: {sa:?} x {sb:?}"));
        }
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut out = vec![0f32; m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::new(shape, out)?, Op::MatMul { a, b, m, k, n }, rg)
    }

    /// Batched `a[B, m, k] · b[B, k, n]`, or `a · bᵀ` with b: [B, n, k].
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return dim_err(format!("bmm expects [B,m,k] and [B,k,n], got {sa:?} {sb:?}"));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return dim_err(format!("bmm inner extents differ: {sa:?} x {sb:?} (trans_b={trans_b})"));
        }
        let mut out = vec![0f32; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let a_i = &ad[i * m * k..(i + 1) * m * k];
            let b_i = &bd[i * k * n..(i + 1) * k * n];
            let o_i = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(m, k, n, a_i, b_i, o_i);
            } else {
                gemm_nn(m, k, n, a_i, b_i, o_i);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            "bmm",
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul { a, b, batch, m, k, n, trans_b },
            rg,
        )
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("add", value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", value, Op::Mul(a, b), rg)
    }

    /// Adds a 1-D bias along the trailing axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return dim_err(format!("bias {:?} does not match trailing extent {n}", self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        self.push("add_bias", value, Op::AddBias { x, bias }, rg)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        self.push("scale", value, Op::Scale { x, s }, rg)
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f32, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return contract_err("dropout probability must be < 1");
        }
        let keep = 1.0 / (1.0 - p);
        let factor: Vec<f32> =
            (0..self.value(x).numel()).map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep }).collect();
        let data = self.value(x).data().iter().zip(&factor).map(|(v, f)| v * f).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        self.push("dropout", value, Op::MulConst { x, factor }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(s as f32), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum();
        let value = Tensor::scalar((s / t.numel() as f64) as f32);
        let rg = self.rg(x);
        self.push("mean", value, Op::Mean(x), rg)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Softmax over the trailing axis (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let cols = self.value(x).last_dim();
        let mut data = self.value(x).data().to_vec();
        kernels::softmax_rows(&mut data, cols);
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        self.push("softmax", value, Op::Softmax { x, cols }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let cols = self.value(x).last_dim();
        if cols < 2 {
            return dim_err("layer_norm needs a normalized extent > 1");
        }
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return dim_err(format!("layer_norm affine params must be [{cols}]"));
        }
        let xd = self.value(x).data();
        let rows = xd.len() / cols;
        let mut xhat = vec![0f32; xd.len()];
        let mut rstd = vec![0f32; rows];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for c in 0..cols {
                xhat[r * cols + c] = ((row[c] as f64 - mean) * rs) as f32;
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let out: Vec<f32> = xhat.iter().enumerate().map(|(i, &v)| v * g[i % cols] + b[i % cols]).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push("layer_norm", value, Op::LayerNorm { x, gain, bias, xhat, rstd, cols }, rg)
    }

    /// Group normalization of a channels-last tensor `[B, ..., C]`: statistics
    /// per (batch item, channel group) over all positions.
    pub fn group_norm(&mut self, x: Var, groups: usize, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let channels = *shape.last().unwrap();
        if groups == 0 || !channels.is_multiple_of(groups) {
            return dim_err(format!("{channels} channels not divisible into {groups} groups"));
        }
        if self.shape(gain) != [channels] || self.shape(bias) != [channels] {
            return dim_err(format!("group_norm affine params must be [{channels}]"));
        }
        let batch = shape[0];
        let positions = self.value(x).numel() / (batch * channels);
        let cg = channels / groups;
        if positions * cg < 2 {
            return dim_err("group_norm needs more than one element per group");
        }
        let xd = self.value(x).data();
        let mut xhat = vec![0f32; xd.len()];
        let mut rstd = vec![0f32; batch * groups];
        let count = (positions * cg) as f64;
        for b in 0..batch {
            let base = b * positions * channels;
            for g in 0..groups {
                let mut mean = 0f64;
                for p in 0..positions {
                    for c in g * cg..(g + 1) * cg {
                        mean += xd[base + p * channels + c] as f64;
                    }
                }
                mean /= count;
                let mut var = 0f64;
                for p in 0..positions {
                    for c in g * cg..(g + 1) * cg {
                        var += (xd[base + p * channels + c] as f64 - mean).powi(2);
                    }
                }
                var /= count;
                let rs = 1.0 / (var + eps as f64).sqrt();
                rstd[b * groups + g] = rs as f32;
                for p in 0..positions {
                    for c in g * cg..(g + 1) * cg {
                        let i = base + p * channels + c;
                        xhat[i] = ((xd[i] as f64 - mean) * rs) as f32;
                    }
                }
            }
        }
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let out: Vec<f32> =
            xhat.iter().enumerate().map(|(i, &v)| v * gv[i % channels] + bv[i % channels]).collect();
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            "group_norm",
            value,
            Op::GroupNorm { x, gain, bias, xhat, rstd, batch, positions, channels, groups },
            rg,
        )
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        self.push(name, value, op, rg)
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Result<Var> {
        self.unary("swish", x, |v| v * sigmoid(v), Op::Swish(x))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    /// Row lookup: `table[V, d]` indexed by `ids` gives `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return dim_err("embedding table must be 2-D");
        }
        let (vocab, dim) = (shape[0], shape[1]);
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!("embedding id {id} >= vocab {vocab}")));
            }
            out.extend_from_slice(&t[id * dim..(id + 1) * dim]);
        }
        let value = Tensor::new(vec![ids.len(), dim], out)?;
        let rg = self.rg(table);
        self.push("embedding", value, Op::Embedding { table, ids: ids.to_vec(), dim }, rg)
    }

    fn gather(&mut self, name: &'static str, x: Var, shape: Vec<usize>, index: Vec<u32>) -> Result<Var> {
        let xd = self.value(x).data();
        let data = index.iter().map(|&i| if i == PAD { 0.0 } else { xd[i as usize] }).collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        self.push(name, value, Op::Gather { x, index }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return dim_err(format!("cannot reshape {:?} to {shape:?}", self.shape(x)));
        }
        let index = (0..numel as u32).collect();
        self.gather("reshape", x, shape.to_vec(), index)
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return dim_err(format!("invalid permutation {perm:?} for rank {rank}"));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let numel = self.value(x).numel();
        let mut index = Vec::with_capacity(numel);
        let mut counter = vec![0usize; rank];
        let mut src = 0usize;
        for _ in 0..numel {
            index.push(src as u32);
            for ax in (0..rank).rev() {
                counter[ax] += 1;
                src += step[ax];
                if counter[ax] < out_shape[ax] {
                    break;
                }
                src -= step[ax] * out_shape[ax];
                counter[ax] = 0;
            }
        }
        self.gather("permute", x, out_shape, index)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return dim_err(format!("narrow({axis}, {start}, {len}) out of range for {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner + start * inner;
            index.extend((base..base + len * inner).map(|i| i as u32));
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather("narrow", x, out_shape, index)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return dim_err("concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return dim_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return dim_err(format!("concat shapes {s:?} and {base:?} disagree off axis {axis}"));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let tail: usize = base[axis + 1..].iter().product();
        let inner: Vec<usize> = xs.iter().map(|&x| self.shape(x)[axis] * tail).collect();
        let total: usize = inner.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&x, &n) in xs.iter().zip(&inner) {
                out.extend_from_slice(&self.value(x).data()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = base;
        shape[axis] = total / tail;
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push("concat", Tensor::new(shape, out)?, Op::Concat { xs: xs.to_vec(), outer, inner }, rg)
    }

    fn image_dims(&self, x: Var, what: &str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape(x) {
            [b, h, w, c] => Ok((b, h, w, c)),
            ref s => dim_err(format!("{what} expects [B,H,W,C], got {s:?}")),
        }
    }

    /// Nearest-neighbour 2× spatial upsampling of `[B, H, W, C]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (b, h, w, c) = self.image_dims(x, "upsample2x")?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut index = Vec::with_capacity(b * oh * ow * c);
        for bi in 0..b {
            for y in 0..oh {
                for xx in 0..ow {
                    let src = ((bi * h + y / 2) * w + xx / 2) * c;
                    index.extend((src..src + c).map(|i| i as u32));
                }
            }
        }
        self.gather("upsample2x", x, vec![b, oh, ow, c], index)
    }

    /// 2×2 average pooling of `[B, H, W, C]` (H, W even).
    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let (b, h, w, c) = self.image_dims(x, "avg_pool2x")?;
        if h % 2 != 0 || w % 2 != 0 {
            return dim_err(format!("avg_pool2x needs even extents, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = vec![0f32; b * oh * ow * c];
        for bi in 0..b {
            for y in 0..oh {
                for xx in 0..ow {
                    let o = ((bi * oh + y) * ow + xx) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let s = ((bi * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                        for ch in 0..c {
                            out[o + ch] += 0.25 * xd[s + ch];
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push("avg_pool2x", Tensor::new(vec![b, oh, ow, c], out)?, Op::AvgPool2x { x, batch: b, h, w, c }, rg)
    }

    /// Zero-padded 3×3 neighbourhood unfolding: `[B,H,W,C]` to `[B,H,W,9C]`.
    pub fn im2col3x3(&mut self, x: Var) -> Result<Var> {
        let (b, h, w, c) = self.image_dims(x, "im2col3x3")?;
        let mut index = Vec::with_capacity(b * h * w * 9 * c);
        for bi in 0..b {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            let (sy, sx) = (y + dy, xx + dx);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                index.extend(std::iter::repeat_n(PAD, c));
                            } else {
                                let s = ((bi * h + sy as usize) * w + sx as usize) * c;
                                index.extend((s..s + c).map(|i| i as u32));
                            }
                        }
                    }
                }
            }
        }
        self.gather("im2col3x3", x, vec![b, h, w, 9 * c], index)
    }

    /// Space-to-depth: `[B, H, W, C]` to `[B, H/p, W/p, p·p·C]`.
    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let (b, h, w, c) = self.image_dims(x, "patchify")?;
        if h % p != 0 || w % p != 0 {
            return dim_err(format!("{h}x{w} not divisible by patch {p}"));
        }
        let r = self.reshape(x, &[b, h / p, p, w / p, p, c])?;
        let t = self.permute(r, &[0, 1, 3, 2, 4, 5])?;
        self.reshape(t, &[b, h / p, w / p, p * p * c])
    }

    /// Depth-to-space, the inverse of [`Tape::patchify`].
    pub fn unpatchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let (b, h, w, pc) = self.image_dims(x, "unpatchify")?;
        if pc % (p * p) != 0 {
            return dim_err(format!("{pc} channels not divisible by {p}x{p}"));
        }
        let c = pc / (p * p);
        let r = self.reshape(x, &[b, h, w, p, p, c])?;
        let t = self.permute(r, &[0, 1, 3, 2, 4, 5])?;
        self.reshape(t, &[b, h * p, w * p, c])
    }

    /// Forward value `quantized`, backward passes the gradient to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, quantized: Tensor) -> Result<Var> {
        if quantized.shape() != self.shape(x) {
            return dim_err(format!(
                "straight_through: {:?} vs {:?}",
                quantized.shape(),
                self.shape(x)
            ));
        }
        let rg = self.rg(x);
        self.push("straight_through", quantized, Op::StraightThrough(x), rg)
    }

    /// Weighted label-smoothed cross-entropy over rows of `logits[.., K]`:
    /// `Σ_r w_r · CE_r / Σ_r w_r` with target distribution
    /// `(1-eps)·onehot + eps/K`. Rows with zero weight are never read.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[f32]>, eps: f32) -> Result<Var> {
        let k = self.value(logits).last_dim();
        let rows = self.value(logits).numel() / k;
        if targets.len() != rows {
            return dim_err(format!("{} targets for {rows} logit rows", targets.len()));
        }
        if !(0.0..1.0).contains(&eps) {
            return contract_err(format!("label smoothing {eps} outside [0,1)"));
        }
        let weights = match weights {
            Some(w) if w.len() != rows => return dim_err(format!("{} weights for {rows} rows", w.len())),
            Some(w) => w.to_vec(),
            None => vec![1.0; rows],
        };
        let total_weight: f64 = weights.iter().map(|&w| w as f64).sum();
        if total_weight <= 0.0 {
            return contract_err("cross_entropy needs at least one weighted row");
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0f32; rows * k];
        let mut logp = vec![0f32; k];
        let mut loss = 0f64;
        for r in 0..rows {
            if weights[r] == 0.0 {
                continue;
            }
            let t = targets[r];
            if t >= k {
                return Err(Error::Index(format!("target {t} outside [0,{k})")));
            }
            kernels::log_softmax_row(&ld[r * k..(r + 1) * k], &mut logp);
            let sum_logp: f64 = logp.iter().map(|&v| v as f64).sum();
            let ce = -(1.0 - eps as f64) * logp[t] as f64 - eps as f64 / k as f64 * sum_logp;
            loss += weights[r] as f64 * ce;
            for (p, &l) in probs[r * k..(r + 1) * k].iter_mut().zip(&logp) {
                *p = l.exp();
            }
        }
        let value = Tensor::scalar((loss / total_weight) as f32);
        let rg = self.rg(logits);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights, probs, eps, total_weight },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`. Gradients of parameter nodes are
    /// accumulated into `store`; other gradients stay readable via [`Tape::grad`].
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return contract_err(format!("backward needs a scalar loss, got {:?}", self.shape(loss)));
        }
        if !self.value(loss).is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                store.accumulate_grad(*id, g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    gemm_nt(m, n, k, g, val(b), acc(grads, a, m * k));
                }
                if wants(b) {
                    gemm_tn(k, m, n, val(a), g, acc(grads, b, k * n));
                }
            }
            &Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
                if wants(a) {
                    let (bd, da) = (val(b), acc(grads, a, batch * m * k));
                    for bi in 0..batch {
                        let g_i = &g[bi * m * n..(bi + 1) * m * n];
                        let b_i = &bd[bi * k * n..(bi + 1) * k * n];
                        let da_i = &mut da[bi * m * k..(bi + 1) * m * k];
                        if trans_b {
                            gemm_nn(m, n, k, g_i, b_i, da_i);
                        } else {
                            gemm_nt(m, n, k, g_i, b_i, da_i);
                        }
                    }
                }
                if wants(b) {
                    let (ad, db) = (val(a), acc(grads, b, batch * k * n));
                    for bi in 0..batch {
                        let g_i = &g[bi * m * n..(bi + 1) * m * n];
                        let a_i = &ad[bi * m * k..(bi + 1) * m * k];
                        let db_i = &mut db[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            gemm_tn(n, m, k, g_i, a_i, db_i);
                        } else {
                            gemm_tn(k, m, n, a_i, g_i, db_i);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    add_into(acc(grads, a, g.len()), g);
                }
                if wants(b) {
                    add_into(acc(grads, b, g.len()), g);
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    add_into(acc(grads, a, g.len()), g);
                }
                if wants(b) {
                    for (d, gv) in acc(grads, b, g.len()).iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let bv = val(b);
                    for ((d, gv), y) in acc(grads, a, g.len()).iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if wants(b) {
                    let av = val(a);
                    for ((d, gv), x) in acc(grads, b, g.len()).iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::MulConst { x, factor } => {
                for ((d, gv), f) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(factor) {
                    *d += gv * f;
                }
            }
            &Op::AddBias { x, bias } => {
                if wants(x) {
                    add_into(acc(grads, x, g.len()), g);
                }
                if wants(bias) {
                    let n = self.nodes[bias.0].value.numel();
                    let db = acc(grads, bias, n);
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            &Op::Scale { x, s } => {
                for (d, gv) in acc(grads, x, g.len()).iter_mut().zip(g) {
                    *d += s * gv;
                }
            }
            &Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                for d in acc(grads, x, n).iter_mut() {
                    *d += g[0];
                }
            }
            &Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                let s = g[0] / n as f32;
                for d in acc(grads, x, n).iter_mut() {
                    *d += s;
                }
            }
            &Op::Softmax { x, cols } => {
                let y = node.value.data();
                let dx = acc(grads, x, g.len());
                for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let dotp: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        dr[c] += yr[c] * (gr[c] - dotp);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd, cols } => {
                let cols = *cols;
                if wants(*gain) {
                    let dg = acc(grads, *gain, cols);
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            dg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if wants(*bias) {
                    let db = acc(grads, *bias, cols);
                    for gr in g.chunks(cols) {
                        add_into(db, gr);
                    }
                }
                if wants(*x) {
                    let gv = val(*gain);
                    let dx = acc(grads, *x, g.len());
                    let mut dxhat = vec![0f32; cols];
                    for (r, ((gr, hr), dr)) in
                        g.chunks(cols).zip(xhat.chunks(cols)).zip(dx.chunks_mut(cols)).enumerate()
                    {
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gv[c];
                        }
                        let m1 = dxhat.iter().sum::<f32>() / cols as f32;
                        let m2 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f32>() / cols as f32;
                        for c in 0..cols {
                            dr[c] += rstd[r] * (dxhat[c] - m1 - hr[c] * m2);
                        }
                    }
                }
            }
            Op::GroupNorm { x, gain, bias, xhat, rstd, batch, positions, channels, groups } => {
                let (channels, positions, groups) = (*channels, *positions, *groups);
                if wants(*gain) {
                    let dg = acc(grads, *gain, channels);
                    for (i, (gv, hv)) in g.iter().zip(xhat).enumerate() {
                        dg[i % channels] += gv * hv;
                    }
                }
                if wants(*bias) {
                    let db = acc(grads, *bias, channels);
                    for (i, gv) in g.iter().enumerate() {
                        db[i % channels] += gv;
                    }
                }
                if wants(*x) {
                    let gv = val(*gain);
                    let dx = acc(grads, *x, g.len());
                    let cg = channels / groups;
                    let count = (positions * cg) as f32;
                    for b in 0..*batch {
                        let base = b * positions * channels;
                        for grp in 0..groups {
                            let (mut m1, mut m2) = (0f32, 0f32);
                            for p in 0..positions {
                                for c in grp * cg..(grp + 1) * cg {
                                    let i = base + p * channels + c;
                                    let d = g[i] * gv[c];
                                    m1 += d;
                                    m2 += d * xhat[i];
                                }
                            }
                            m1 /= count;
                            m2 /= count;
                            let rs = rstd[b * groups + grp];
                            for p in 0..positions {
                                for c in grp * cg..(grp + 1) * cg {
                                    let i = base + p * channels + c;
                                    dx[i] += rs * (g[i] * gv[c] - m1 - xhat[i] * m2);
                                }
                            }
                        }
                    }
                }
            }
            &Op::Swish(x) => {
                let xv = val(x);
                for ((d, gv), &v) in acc(grads, x, g.len()).iter_mut().zip(g).zip(xv) {
                    let s = sigmoid(v);
                    *d += gv * (s + v * s * (1.0 - s));
                }
            }
            &Op::Gelu(x) => {
                let xv = val(x);
                for ((d, gv), &v) in acc(grads, x, g.len()).iter_mut().zip(g).zip(xv) {
                    *d += gv * gelu_grad(v);
                }
            }
            &Op::Sigmoid(x) => {
                let y = node.value.data();
                for ((d, gv), &s) in acc(grads, x, g.len()).iter_mut().zip(g).zip(y) {
                    *d += gv * s * (1.0 - s);
                }
            }
            Op::Embedding { table, ids, dim } => {
                let n = self.nodes[table.0].value.numel();
                let dt = acc(grads, *table, n);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                }
            }
            Op::Gather { x, index } => {
                let n = self.nodes[x.0].value.numel();
                let dx = acc(grads, *x, n);
                for (&src, gv) in index.iter().zip(g) {
                    if src != PAD {
                        dx[src as usize] += gv;
                    }
                }
            }
            Op::Concat { xs, outer, inner } => {
                let total: usize = inner.iter().sum();
                let mut offset = 0;
                for (&x, &n) in xs.iter().zip(inner) {
                    if wants(x) {
                        let dx = acc(grads, x, outer * n);
                        for o in 0..*outer {
                            add_into(&mut dx[o * n..(o + 1) * n], &g[o * total + offset..o * total + offset + n]);
                        }
                    }
                    offset += n;
                }
            }
            &Op::AvgPool2x { x, batch, h, w, c } => {
                let (oh, ow) = (h / 2, w / 2);
                let dx = acc(grads, x, batch * h * w * c);
                for bi in 0..batch {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let o = ((bi * oh + y) * ow + xx) * c;
                            for (dy, dxo) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let s = ((bi * h + 2 * y + dy) * w + 2 * xx + dxo) * c;
                                for ch in 0..c {
                                    dx[s + ch] += 0.25 * g[o + ch];
                                }
                            }
                        }
                    }
                }
            }
            &Op::StraightThrough(x) => {
                add_into(acc(grads, x, g.len()), g);
            }
            Op::CrossEntropy { logits, targets, weights, probs, eps, total_weight } => {
                let n = self.nodes[logits.0].value.numel();
                let k = n / targets.len();
                let dl = acc(grads, *logits, n);
                let uniform = eps / k as f32;
                for (r, &t) in targets.iter().enumerate() {
                    if weights[r] == 0.0 {
                        continue;
                    }
                    let s = (g[0] as f64 * weights[r] as f64 / total_weight) as f32;
                    let row = &mut dl[r * k..(r + 1) * k];
                    for c in 0..k {
                        let q = uniform + if c == t { 1.0 - eps } else { 0.0 };
                        row[c] += s * (probs[r * k + c] - q);
                    }
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f32>>], v: Var, n: usize) -> &mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

#[inline]
fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_known_product() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 2., 3., 4.]);
        let v = tape.constant(t(&[2, 1], &[5., 6.]));
        let q = tape.matmul(m, v).unwrap();
        assert_eq!(tape.value(q).data(), &[17., 39.]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, c), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_known_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0., 0., 0.]));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let x = tape.constant(t(&[3], &[1f32.ln(), 2f32.ln(), 3f32.ln()]));
        let y = tape.softmax(x).unwrap();
        for (v, want) in tape.value(y).data().iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
            assert!((v - want).abs() < 1e-6);
        }
        let a = tape.constant(t(&[4], &[0.3, -1.0, 2.0, 0.5]));
        let b = tape.constant(t(&[4], &[10.3, 9.0, 12.0, 10.5]));
        let (ya, yb) = (tape.softmax(a).unwrap(), tape.softmax(b).unwrap());
        for (u, v) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut tape = Tape::new();
        let confident = tape.constant(t(&[1, 3], &[0., 200., 0.]));
        let l = tape.cross_entropy(confident, &[1], None, 0.0).unwrap();
        assert!(tape.value(l).data()[0].abs() < 1e-6);

        let uniform = tape.constant(Tensor::zeros(&[2, 4]));
        let l0 = tape.cross_entropy(uniform, &[0, 3], None, 0.0).unwrap();
        let l1 = tape.cross_entropy(uniform, &[0, 3], None, 0.1).unwrap();
        assert!((tape.value(l0).data()[0] - 4f32.ln()).abs() < 1e-6);
        assert!((tape.value(l1).data()[0] - 4f32.ln()).abs() < 1e-6);

        assert!(matches!(tape.cross_entropy(uniform, &[0, 4], None, 0.0), Err(Error::Index(_))));
    }

    #[test]
    fn norms_normalize_and_handle_constants() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 5], 3.0));
        let g = tape.constant(Tensor::full(&[5], 1.0));
        let b = tape.constant(Tensor::zeros(&[5]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));

        let data: Vec<f32> = (0..2 * 4 * 6).map(|i| ((i * 7919) % 23) as f32 * 0.3 - 2.0).collect();
        let x = tape.constant(t(&[2, 4, 6], &data));
        let g6 = tape.constant(Tensor::full(&[6], 1.0));
        let b6 = tape.constant(Tensor::zeros(&[6]));
        let y = tape.group_norm(x, 3, g6, b6, 1e-5).unwrap();
        let yd = tape.value(y).data();
        for bi in 0..2 {
            for grp in 0..3 {
                let vals: Vec<f64> = (0..4)
                    .flat_map(|p| (grp * 2..grp * 2 + 2).map(move |c| (p, c)))
                    .map(|(p, c)| yd[bi * 24 + p * 6 + c] as f64)
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-4, "mean {mean} var {var}");
            }
        }
        assert!(matches!(tape.group_norm(x, 4, g6, b6, 1e-5), Err(Error::Dimension(_))));
    }

    #[test]
    fn activations_reference_points() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 20.0]));
        let s = tape.swish(x).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.0);
        assert!((tape.value(s).data()[1] - 20.0).abs() < 1e-6);
        let g = tape.gelu(x).unwrap();
        assert_eq!(tape.value(g).data()[0], 0.0);
    }

    #[test]
    fn backward_square_and_reuse() {
        let mut store = ParamStore::new();
        let id = store.add("x", t(&[3], &[1.0, -2.0, 0.5])).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad.as_deref().unwrap(), &[2.0, -4.0, 1.0]);

        store.zero_grad();
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let s1 = tape.sum(x).unwrap();
        let s2 = tape.sum(x).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad.as_deref().unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x, &mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn permute_and_patchify_roundtrip() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..2 * 8 * 8 * 3).map(|i| i as f32).collect();
        let x = tape.constant(t(&[2, 8, 8, 3], &data));
        let p = tape.patchify(x, 4).unwrap();
        assert_eq!(tape.shape(p), &[2, 2, 2, 48]);
        let back = tape.unpatchify(p, 4).unwrap();
        assert_eq!(tape.value(back).data(), &data[..]);

        let y = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let yt = tape.permute(y, &[1, 0]).unwrap();
        assert_eq!(tape.value(yt).data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 1, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 2, 2], &[5., 6., 7., 8., 9., 10., 11., 12.]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2]);
        assert_eq!(tape.value(c).data(), &[1., 2., 5., 6., 7., 8., 3., 4., 9., 10., 11., 12.]);
        let back = tape.narrow(c, 1, 1, 2).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(b).data());
    }
}
