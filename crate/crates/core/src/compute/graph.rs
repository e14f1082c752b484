//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation evaluates eagerly and appends a node to the tape. The tape
//! is append-only, so node order is a topological order and `backward` walks
//! it in exact reverse.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Real, Tensor};
use crate::error::{contract_err, shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention mask, `true` = attendable. Row-major `[T_q × T_k]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    pub tq: usize,
    pub tk: usize,
    pub allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(tq: usize, tk: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != tq * tk {
            return Err(shape_err!("mask has {} entries, want {}x{}", allowed.len(), tq, tk));
        }
        Ok(AttnMask { tq, tk, allowed })
    }

    pub fn all(tq: usize, tk: usize) -> Self {
        AttnMask {
            tq,
            tk,
            allowed: vec![true; tq * tk],
        }
    }

    /// Every query row may attend to exactly the valid keys.
    pub fn key_padding(tq: usize, key_valid: &[bool]) -> Self {
        let tk = key_valid.len();
        let mut allowed = Vec::with_capacity(tq * tk);
        for _ in 0..tq {
            allowed.extend_from_slice(key_valid);
        }
        AttnMask { tq, tk, allowed }
    }

    /// Lower-triangular mask for decoder self-attention.
    pub fn causal(t: usize) -> Self {
        let mut allowed = vec![false; t * t];
        for i in 0..t {
            for j in 0..=i {
                allowed[i * t + j] = true;
            }
        }
        AttnMask { tq: t, tk: t, allowed }
    }

    fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.tk + j]
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    AddBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulConst { x: Var, c: Vec<T> },
    ScaleRows { x: Var, s: Vec<T> },
    Scale { x: Var, s: T },
    Relu { x: Var },
    Sigmoid { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, scale: T, probs: Vec<T> },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    Conv1d { x: Var, w: Var, pad: usize },
    WeightedRowSum { x: Var, w: Vec<T> },
    ConcatCols { parts: Vec<Var> },
    Embedding { table: Var, ids: Vec<usize> },
    Reshape { x: Var },
    SumAll { x: Var },
    DotConst { x: Var, c: Vec<T> },
    Bce { p: Var, target: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

struct DropoutState {
    rate: f64,
    rng: ChaCha8Rng,
}

/// Lower clamp for probabilities entering a log.
pub const PROB_CLAMP: f64 = 1e-7;

/// Computation graph with a seedable RNG for dropout.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    track_params: bool,
    dropout: Option<DropoutState>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::inference()
    }
}

impl<T: Real> Graph<T> {
    /// Graph with dropout disabled. Parameters still record gradients so the
    /// same graph can be differentiated (gradient checks run in this mode).
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            track_params: true,
            dropout: None,
        }
    }

    /// Graph that applies dropout at `rate` using an RNG seeded from `seed`.
    pub fn training(rate: f64, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            track_params: true,
            dropout: (rate > 0.0).then(|| DropoutState {
                rate,
                rng: ChaCha8Rng::seed_from_u64(seed),
            }),
        }
    }

    /// Forward-only graph: parameters are bound as constants.
    pub fn frozen() -> Self {
        Graph {
            track_params: false,
            ..Self::inference()
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf input; `requires_grad` leaves receive gradients in `backward`.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.input(value, false)
    }

    /// Binds a named parameter, registering it on first use.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| contract_err!("unknown parameter {name}"))?
            .clone();
        let v = self.input(t, self.track_params);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Gradients of every bound parameter, keyed by name. Parameters that did
    /// not influence the loss get zero gradients.
    pub fn param_grads(&self) -> HashMap<String, Vec<T>> {
        self.params
            .iter()
            .map(|(name, v)| {
                let node = &self.nodes[v.0];
                let g = node
                    .grad
                    .clone()
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                (name.clone(), g)
            })
            .collect()
    }

    // ---------------------------------------------------------------- ops

    /// `a[m×k] · b[k×n]`; `a` may be any rank, viewed as rows × last axis.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if bv.rank() != 2 || av.cols() != bv.dims()[0] {
            return Err(shape_err!("matmul {:?} x {:?}", av.dims(), bv.dims()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.dims()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.cols() != bv.cols() {
            return Err(shape_err!("matmul_nt {:?} x {:?}", av.dims(), bv.dims()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![T::zero(); m * n];
        gemm_nt_acc(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMulNt { a, b }, &[a, b]))
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let c = xv.cols();
        if bv.numel() != c {
            return Err(shape_err!("bias of {} for width {}", bv.numel(), c));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddBias { x, b }, &[x, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.dims() != bv.dims() {
            return Err(shape_err!("add {:?} + {:?}", av.dims(), bv.dims()));
        }
        let mut out = av.clone();
        for (o, &y) in out.data_mut().iter_mut().zip(bv.data()) {
            *o += y;
        }
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.dims() != bv.dims() {
            return Err(shape_err!("mul {:?} * {:?}", av.dims(), bv.dims()));
        }
        let mut out = av.clone();
        for (o, &y) in out.data_mut().iter_mut().zip(bv.data()) {
            *o *= y;
        }
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    /// Elementwise product with a constant of the same size.
    pub fn mul_const(&mut self, x: Var, c: Vec<T>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if c.len() != xv.numel() {
            return Err(shape_err!("mul_const {} vs {}", c.len(), xv.numel()));
        }
        let mut out = xv.clone();
        for (o, &k) in out.data_mut().iter_mut().zip(&c) {
            *o *= k;
        }
        Ok(self.push(out, Op::MulConst { x, c }, &[x]))
    }

    /// Multiplies row `r` by `s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Vec<T>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if s.len() != xv.rows() {
            return Err(shape_err!("scale_rows {} vs {} rows", s.len(), xv.rows()));
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for (row, &k) in out.data_mut().chunks_mut(c).zip(&s) {
            row.iter_mut().for_each(|o| *o *= k);
        }
        Ok(self.push(out, Op::ScaleRows { x, s }, &[x]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.nodes[x.0].value.map(|v| v * s);
        self.push(out, Op::Scale { x, s }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(|v| v.max(T::zero()));
        self.push(out, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid { x }, &[x])
    }

    /// Inverted dropout when the graph is in training mode; identity otherwise.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some(state) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let n = self.nodes[x.0].value.numel();
        let keep = 1.0 - state.rate;
        let scale = T::lit(1.0 / keep);
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if state.rng.random::<f64>() < keep {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        self.mul_const(x, mask)
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let d = xv.cols();
        if d == 0 {
            return Err(shape_err!("layer_norm over empty axis"));
        }
        if eps <= 0.0 {
            return Err(contract_err!("layer_norm eps must be positive"));
        }
        let (gv, bv) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        if gv.numel() != d || bv.numel() != d {
            return Err(shape_err!("layer_norm affine params must have width {d}"));
        }
        let rows = xv.rows();
        let dn = T::lit(d as f64);
        let eps = T::lit(eps);
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let value = Tensor::new(xv.dims().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Multi-head scaled dot-product attention on already-projected inputs.
    ///
    /// `q: [T_q×D]`, `k, v: [T_k×D]`; heads split `D` into contiguous slices.
    /// Masked positions get exactly zero weight. Returns the head outputs
    /// concatenated back to `[T_q×D]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&AttnMask>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let d = qv.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() {
            return Err(shape_err!(
                "attention q {:?} k {:?} v {:?}",
                qv.dims(),
                kv.dims(),
                vv.dims()
            ));
        }
        let (tq, tk) = (qv.rows(), kv.rows());
        if tk == 0 {
            return Err(contract_err!("attention over zero keys"));
        }
        if let Some(m) = mask {
            if m.tq != tq || m.tk != tk {
                return Err(shape_err!("mask {}x{} for scores {}x{}", m.tq, m.tk, tq, tk));
            }
        }
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); heads * tq * tk];
        let mut out = vec![T::zero(); tq * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut scores = vec![T::zero(); tk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let qrow = &qd[i * d + off..i * d + off + dh];
                let mut max = T::neg_infinity();
                for j in 0..tk {
                    if mask.is_some_and(|m| !m.get(i, j)) {
                        scores[j] = T::neg_infinity();
                        continue;
                    }
                    let krow = &kd[j * d + off..j * d + off + dh];
                    let s = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    scores[j] = s;
                    if s > max {
                        max = s;
                    }
                }
                if max == T::neg_infinity() {
                    return Err(contract_err!("attention query row {i} has every key masked"));
                }
                let p = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let mut z = T::zero();
                for j in 0..tk {
                    let e = if scores[j] == T::neg_infinity() {
                        T::zero()
                    } else {
                        (scores[j] - max).exp()
                    };
                    p[j] = e;
                    z += e;
                }
                for pj in p.iter_mut() {
                    *pj /= z;
                }
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..tk {
                    let w = p[j];
                    if w == T::zero() {
                        continue;
                    }
                    let vrow = &vd[j * d + off..j * d + off + dh];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += w * x;
                    }
                }
            }
        }
        let value = Tensor::new(vec![tq, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention weights saved by an attention node, `[heads × T_q × T_k]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let c = xv.cols();
        if c == 0 {
            return Err(shape_err!("softmax over empty axis"));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(self.push(out, Op::Softmax { x }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let c = xv.cols();
        if c == 0 {
            return Err(shape_err!("log_softmax over empty axis"));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(self.push(out, Op::LogSoftmax { x }, &[x]))
    }

    /// Temporal convolution, stride 1. `x: [T×D_in]`, `w: [W×D_in×D_out]`.
    /// With `same_padding` the output keeps length `T` (requires odd `W`);
    /// otherwise it is a valid convolution of length `T−W+1`.
    pub fn conv1d(&mut self, x: Var, w: Var, same_padding: bool) -> Result<Var> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if wv.rank() != 3 {
            return Err(shape_err!("conv kernel must be rank 3, got {:?}", wv.dims()));
        }
        let (kw, din, dout) = (wv.dims()[0], wv.dims()[1], wv.dims()[2]);
        let t = xv.rows();
        if t == 0 {
            return Err(shape_err!("conv1d over empty sequence"));
        }
        if xv.cols() != din {
            return Err(shape_err!("conv1d input width {} vs kernel {}", xv.cols(), din));
        }
        let (pad, tout) = if same_padding {
            if kw % 2 == 0 {
                return Err(shape_err!("same padding needs an odd kernel width, got {kw}"));
            }
            (kw / 2, t)
        } else {
            if kw > t {
                return Err(shape_err!("kernel {kw} longer than sequence {t}"));
            }
            (0, t - kw + 1)
        };
        let mut out = vec![T::zero(); tout * dout];
        let (xd, wd) = (xv.data(), wv.data());
        for to in 0..tout {
            let orow = &mut out[to * dout..(to + 1) * dout];
            for kk in 0..kw {
                let ti = to as isize + kk as isize - pad as isize;
                if ti < 0 || ti as usize >= t {
                    continue;
                }
                let xrow = &xd[ti as usize * din..(ti as usize + 1) * din];
                let wk = &wd[kk * din * dout..(kk + 1) * din * dout];
                for (i, &xval) in xrow.iter().enumerate() {
                    if xval == T::zero() {
                        continue;
                    }
                    for (o, &wval) in orow.iter_mut().zip(&wk[i * dout..(i + 1) * dout]) {
                        *o += xval * wval;
                    }
                }
            }
        }
        let value = Tensor::new(vec![tout, dout], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, pad }, &[x, w]))
    }

    /// `Σ_r w[r] · x[r, :]`, returning a rank-1 tensor of the row width.
    pub fn weighted_row_sum(&mut self, x: Var, w: Vec<T>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if w.len() != xv.rows() {
            return Err(shape_err!("row weights {} vs {} rows", w.len(), xv.rows()));
        }
        let c = xv.cols();
        let mut out = vec![T::zero(); c];
        for (r, &wr) in w.iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(xv.row(r)) {
                *o += wr * v;
            }
        }
        Ok(self.push(Tensor::vector(out), Op::WeightedRowSum { x, w }, &[x]))
    }

    /// Concatenates along the last axis; all parts must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.nodes[parts[0].0].value.rows();
        if parts.iter().any(|p| self.nodes[p.0].value.rows() != rows) {
            return Err(shape_err!("concat_cols with differing row counts"));
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].value.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let dims = if self.nodes[parts[0].0].value.rank() == 1 {
            vec![total]
        } else {
            vec![rows, total]
        };
        let value = Tensor::new(dims, out)?;
        Ok(self.push(
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        let (n, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(contract_err!("token id {id} outside table of {n}"));
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let out = self.nodes[x.0].value.clone().reshape(dims)?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::SumAll { x }, &[x])
    }

    /// `Σ x ⊙ c` for a constant `c`.
    pub fn dot_const(&mut self, x: Var, c: Vec<T>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if c.len() != xv.numel() {
            return Err(shape_err!("dot_const {} vs {}", c.len(), xv.numel()));
        }
        let s = xv.data().iter().zip(&c).map(|(&a, &b)| a * b).sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::DotConst { x, c }, &[x]))
    }

    /// Binary cross entropy of a probability against a 0/1 target, with the
    /// probability clamped to `[1e-7, 1−1e-7]` before the log.
    pub fn bce(&mut self, p: Var, target: f64) -> Result<Var> {
        let pv = &self.nodes[p.0].value;
        if pv.numel() != 1 {
            return Err(shape_err!("bce expects a scalar probability"));
        }
        let loss = bce_value(pv.data()[0].as_f64(), target);
        Ok(self.push(
            Tensor::scalar(T::lit(loss)),
            Op::Bce {
                p,
                target: T::lit(target),
            },
            &[p],
        ))
    }

    // ----------------------------------------------------------- backward

    /// Accumulates `∂loss/∂leaf` into every `requires_grad` leaf. Calling it
    /// again without [`Graph::zero_grads`] adds to the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got {:?}",
                self.nodes[loss.0].value.dims()
            ));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..n).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let node = &mut self.nodes[idx];
                match node.grad.as_mut() {
                    Some(g) => g.iter_mut().zip(&gout).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(gout),
                }
                continue;
            }
            self.backprop_node(idx, &gout, &mut grads)?;
        }
        for node in &self.nodes {
            if let Some(g) = &node.grad {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numeric("non-finite gradient".into()));
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(g);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.dims()[1]);
                acc(*a, &mut |g| gemm_nt_acc(gout, bv.data(), g, m, n, k));
                acc(*b, &mut |g| gemm_tn_acc(av.data(), gout, g, m, k, n));
            }
            Op::MatMulNt { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                acc(*a, &mut |g| gemm_acc(gout, bv.data(), g, m, n, k));
                acc(*b, &mut |g| gemm_tn_acc(gout, av.data(), g, m, n, k));
            }
            Op::AddBias { x, b } => {
                let c = out.cols();
                acc(*x, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| {
                    for row in gout.chunks(c) {
                        add_into(g, row);
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| add_into(g, gout));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * bv[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * av[i];
                    }
                });
            }
            Op::MulConst { x, c } => acc(*x, &mut |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * c[i];
                }
            }),
            Op::ScaleRows { x, s } => {
                let c = out.cols();
                acc(*x, &mut |g| {
                    for (r, &k) in s.iter().enumerate() {
                        for j in 0..c {
                            g[r * c + j] += gout[r * c + j] * k;
                        }
                    }
                })
            }
            Op::Scale { x, s } => acc(*x, &mut |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * *s;
                }
            }),
            Op::Relu { x } => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        if xv[i] > T::zero() {
                            g[i] += gout[i];
                        }
                    }
                })
            }
            Op::Sigmoid { x } => {
                let y = out.data();
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * y[i] * (T::one() - y[i]);
                    }
                })
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = out.cols();
                let rows = out.rows();
                let gv = nodes[gain.0].value.data();
                if wants(*x) {
                    let dn = T::lit(d as f64);
                    acc(*x, &mut |g| {
                        for r in 0..rows {
                            let go = &gout[r * d..(r + 1) * d];
                            let xh = &xhat[r * d..(r + 1) * d];
                            let mut mean_dxh = T::zero();
                            let mut mean_dxh_xh = T::zero();
                            for c in 0..d {
                                let dxh = go[c] * gv[c];
                                mean_dxh += dxh;
                                mean_dxh_xh += dxh * xh[c];
                            }
                            mean_dxh /= dn;
                            mean_dxh_xh /= dn;
                            for c in 0..d {
                                let dxh = go[c] * gv[c];
                                g[r * d + c] += rstd[r] * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
                            }
                        }
                    });
                }
                acc(*gain, &mut |g| {
                    for r in 0..rows {
                        for c in 0..d {
                            g[c] += gout[r * d + c] * xhat[r * d + c];
                        }
                    }
                });
                acc(*bias, &mut |g| {
                    for row in gout.chunks(d) {
                        add_into(g, row);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            } => {
                let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let d = qv.cols();
                let (tq, tk) = (qv.rows(), kv.rows());
                let dh = d / heads;
                let mut dq = vec![T::zero(); tq * d];
                let mut dk = vec![T::zero(); tk * d];
                let mut dv = vec![T::zero(); tk * d];
                let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
                let mut dp = vec![T::zero(); tk];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..tq {
                        let p = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                        let go = &gout[i * d + off..i * d + off + dh];
                        let mut dot = T::zero();
                        for j in 0..tk {
                            let vrow = &vd[j * d + off..j * d + off + dh];
                            dp[j] = go.iter().zip(vrow).map(|(&a, &b)| a * b).sum::<T>();
                            dot += dp[j] * p[j];
                            if p[j] != T::zero() {
                                let dvrow = &mut dv[j * d + off..j * d + off + dh];
                                for (o, &gg) in dvrow.iter_mut().zip(go) {
                                    *o += p[j] * gg;
                                }
                            }
                        }
                        for j in 0..tk {
                            if p[j] == T::zero() {
                                continue;
                            }
                            let ds = p[j] * (dp[j] - dot) * *scale;
                            for c in 0..dh {
                                dq[i * d + off + c] += ds * kd[j * d + off + c];
                                dk[j * d + off + c] += ds * qd[i * d + off + c];
                            }
                        }
                    }
                }
                acc(*q, &mut |g| add_into(g, &dq));
                acc(*k, &mut |g| add_into(g, &dk));
                acc(*v, &mut |g| add_into(g, &dv));
            }
            Op::Softmax { x } => {
                let c = out.cols();
                let y = out.data();
                acc(*x, &mut |g| {
                    for r in 0..out.rows() {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &gout[r * c..(r + 1) * c]);
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..c {
                            g[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax { x } => {
                let c = out.cols();
                let y = out.data();
                acc(*x, &mut |g| {
                    for r in 0..out.rows() {
                        let gr = &gout[r * c..(r + 1) * c];
                        let s = gr.iter().copied().sum::<T>();
                        for j in 0..c {
                            g[r * c + j] += gr[j] - y[r * c + j].exp() * s;
                        }
                    }
                })
            }
            Op::Conv1d { x, w, pad } => {
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                let (kw, din, dout) = (wv.dims()[0], wv.dims()[1], wv.dims()[2]);
                let t = xv.rows();
                let tout = out.rows();
                let (xd, wd) = (xv.data(), wv.data());
                acc(*x, &mut |g| {
                    for to in 0..tout {
                        let go = &gout[to * dout..(to + 1) * dout];
                        for kk in 0..kw {
                            let ti = to as isize + kk as isize - *pad as isize;
                            if ti < 0 || ti as usize >= t {
                                continue;
                            }
                            let ti = ti as usize;
                            for i in 0..din {
                                let wrow = &wd[(kk * din + i) * dout..(kk * din + i + 1) * dout];
                                g[ti * din + i] +=
                                    wrow.iter().zip(go).map(|(&a, &b)| a * b).sum::<T>();
                            }
                        }
                    }
                });
                acc(*w, &mut |g| {
                    for to in 0..tout {
                        let go = &gout[to * dout..(to + 1) * dout];
                        for kk in 0..kw {
                            let ti = to as isize + kk as isize - *pad as isize;
                            if ti < 0 || ti as usize >= t {
                                continue;
                            }
                            let ti = ti as usize;
                            for i in 0..din {
                                let xval = xd[ti * din + i];
                                let grow = &mut g[(kk * din + i) * dout..(kk * din + i + 1) * dout];
                                for (o, &gg) in grow.iter_mut().zip(go) {
                                    *o += xval * gg;
                                }
                            }
                        }
                    }
                });
            }
            Op::WeightedRowSum { x, w } => {
                let c = out.numel();
                acc(*x, &mut |g| {
                    for (r, &wr) in w.iter().enumerate() {
                        for j in 0..c {
                            g[r * c + j] += wr * gout[j];
                        }
                    }
                })
            }
            Op::ConcatCols { parts } => {
                let rows = out.rows();
                let total = out.cols();
                let mut off = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    acc(*p, &mut |g| {
                        for r in 0..rows {
                            for j in 0..w {
                                g[r * w + j] += gout[r * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Embedding { table, ids } => {
                let d = out.cols();
                acc(*table, &mut |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            g[id * d + j] += gout[r * d + j];
                        }
                    }
                })
            }
            Op::Reshape { x } => acc(*x, &mut |g| add_into(g, gout)),
            Op::SumAll { x } => acc(*x, &mut |g| g.iter_mut().for_each(|v| *v += gout[0])),
            Op::DotConst { x, c } => acc(*x, &mut |g| {
                for i in 0..g.len() {
                    g[i] += gout[0] * c[i];
                }
            }),
            Op::Bce { p, target } => {
                let pv = nodes[p.0].value.data()[0];
                let lo = T::lit(PROB_CLAMP);
                let hi = T::one() - lo;
                acc(*p, &mut |g| {
                    if pv > lo && pv < hi {
                        let d = -*target / pv + (T::one() - *target) / (T::one() - pv);
                        g[0] += gout[0] * d;
                    }
                })
            }
        }
        Ok(())
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable in-place softmax of one slice.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// `−[d·ln p + (1−d)·ln(1−p)]` with `p` clamped to `[1e-7, 1−1e-7]`.
pub fn bce_value(p: f64, d: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(d * p.ln() + (1.0 - d) * (1.0 - p).ln())
}
