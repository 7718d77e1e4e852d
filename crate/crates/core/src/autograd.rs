//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Graph`]; node indices are
//! therefore already in topological order and [`Graph::backward`] walks them
//! once in reverse.

use std::collections::HashMap;

use crate::error::{AptError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Dtype, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Describes the `[batch * len, d]` row layout of a padded sequence batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqLayout {
    pub batch: usize,
    pub len: usize,
    /// `true` for real tokens, `false` for padding; `batch * len` entries.
    pub mask: Vec<bool>,
}

impl SeqLayout {
    pub fn dense(batch: usize, len: usize) -> Self {
        SeqLayout { batch, len, mask: vec![true; batch * len] }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.len
    }

    pub fn real_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.mask.chunks(self.len.max(1)).map(|c| c.iter().filter(|&&m| m).count()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub heads: usize,
    pub causal: bool,
    pub query: SeqLayout,
    pub key: SeqLayout,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    MulCol(Var, Var),
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    MaskedMeanRows { x: Var, layout: SeqLayout },
    ConcatCols(Vec<Var>),
    LayerMix { alpha: Var, layers: Vec<Var>, len: usize },
    SoftCrossEntropy { logits: Var, target: Vec<f64>, rows: Vec<bool>, probs: Vec<f64>, count: usize },
    RowSqDist { a: Var, b: Vec<f64>, rows: Vec<bool>, count: usize },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation.
///
/// Parameters enter through [`Graph::param`]; repeated requests for the same
/// parameter return the same node, so gradients from multiple uses add up.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    dtype: Dtype,
    params: HashMap<(u64, ParamId), Var>,
    kink_signature: u64,
}

/// Gradients for the trainable parameters of one store.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: HashMap<(u64, ParamId), Tensor>,
}

impl Gradients {
    pub fn get(&self, store: &ParamStore, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&(store.uid(), id))
    }

    pub fn contains_store(&self, store: &ParamStore) -> bool {
        self.grads.keys().any(|(uid, _)| *uid == store.uid())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Euclidean norm over every gradient entry.
    pub fn global_norm(&self) -> f64 {
        self.grads.values().flat_map(|t| t.data()).map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.grads.values_mut() {
            let dtype = t.dtype();
            for g in t.data_mut() {
                *g = dtype.round(*g * factor);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(|t| t.data().iter().all(|g| g.is_finite()))
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // a is logically [m,k], b is [k,n]; strides express the transposes.
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softmax_slice(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Graph {
    pub fn new(dtype: Dtype) -> Self {
        Graph { nodes: Vec::new(), dtype, params: HashMap::new(), kink_signature: 0 }
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Hash of every ReLU activation pattern recorded so far. Two forward
    /// passes with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
    }

    /// Attention probabilities `[batch, heads, q_len, k_len]` saved by an
    /// attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn attention_spec(&self, v: Var) -> Option<&AttentionSpec> {
        match &self.nodes[v.0].op {
            Op::Attention { spec, .. } => Some(spec),
            _ => None,
        }
    }

    fn push(&mut self, mut value: Tensor, op: Op, op_name: &'static str) -> Result<Var> {
        value.apply_dtype();
        value.check_finite(op_name)?;
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MulCol(a, b) => {
                self.ng(*a) || self.ng(*b)
            }
            Op::Linear { x, w, b } => self.ng(*x) || self.ng(*w) || b.is_some_and(|b| self.ng(b)),
            Op::AddScalar(a, b) => self.ng(*a) || self.ng(*b),
            Op::Scale(a, _) | Op::Relu(a) | Op::Sigmoid(a) | Op::Sum(a) | Op::Mean(a) => {
                self.ng(*a)
            }
            Op::Softmax { x, .. } => self.ng(*x),
            Op::LayerNorm { x, gain, bias, .. } => self.ng(*x) || self.ng(*gain) || self.ng(*bias),
            Op::Attention { q, k, v, .. } => self.ng(*q) || self.ng(*k) || self.ng(*v),
            Op::Gather { table, .. } => self.ng(*table),
            Op::MaskedMeanRows { x, .. } => self.ng(*x),
            Op::ConcatCols(vs) => vs.iter().any(|v| self.ng(*v)),
            Op::LayerMix { alpha, layers, .. } => self.ng(*alpha) || layers.iter().any(|v| self.ng(*v)),
            Op::SoftCrossEntropy { logits, .. } => self.ng(*logits),
            Op::RowSqDist { a, .. } => self.ng(*a),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.to_dtype(self.dtype);
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A free leaf that receives a gradient (not tied to any store).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let t = t.to_dtype(self.dtype);
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let value = store.get(id).to_dtype(self.dtype);
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: !store.is_frozen() });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AptError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, 0.0);
        self.push(Tensor::from_raw(vec![m, n], out, self.dtype), Op::MatMul(a, b), "matmul")
    }

    /// `x · w + b` for `x: [N, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(AptError::shape("linear", format!("{sx:?} x {sw:?}")));
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bias = self.data(b);
            if bias.len() != n {
                return Err(AptError::shape("linear", format!("bias {:?} for width {n}", self.shape(b))));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        gemm(m, k, n, self.data(x), false, self.data(w), false, &mut out, if b.is_some() { 1.0 } else { 0.0 });
        self.push(Tensor::from_raw(vec![m, n], out, self.dtype), Op::Linear { x, w, b }, "linear")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AptError::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_raw(self.shape(a).to_vec(), data, self.dtype)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::from_raw(self.shape(a).to_vec(), data, self.dtype)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.map(a, |x| x * c);
        self.push(t, Op::Scale(a, c), "scale")
    }

    /// Adds a one-element tensor to every entry of `a`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(AptError::shape("add_scalar", format!("{:?} is not a scalar", self.shape(s))));
        }
        let c = self.data(s)[0];
        let t = self.map(a, |x| x + c);
        self.push(t, Op::AddScalar(a, s), "add_scalar")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &x in self.data(a) {
            h = (h ^ u64::from(x > 0.0)).wrapping_mul(0x100_0000_01b3);
        }
        self.kink_signature = self.kink_signature.rotate_left(7) ^ h;
        let t = self.map(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, |x| 1.0 / (1.0 + (-x).exp()));
        self.push(t, Op::Sigmoid(a), "sigmoid")
    }

    /// Scales each row of `x: [N, d]` by the matching entry of `g: [N, 1]`.
    pub fn mul_col(&mut self, x: Var, g: Var) -> Result<Var> {
        let (sx, sg) = (self.shape(x), self.shape(g));
        if sx.len() != 2 || sg != [sx[0], 1] {
            return Err(AptError::shape("mul_col", format!("{sx:?} by {sg:?}")));
        }
        let d = sx[1];
        let gv = self.data(g).to_vec();
        let mut out = self.data(x).to_vec();
        for (row, &s) in out.chunks_mut(d.max(1)).zip(&gv) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let shape = sx.to_vec();
        self.push(Tensor::from_raw(shape, out, self.dtype), Op::MulCol(x, g), "mul_col")
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(AptError::shape("softmax", format!("axis {axis} of {shape:?}")));
        }
        self.value(x).check_finite("softmax")?;
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = src[(o * n + j) * inner + i];
                }
                softmax_slice(&mut buf);
                for (j, b) in buf.iter().enumerate() {
                    out[(o * n + j) * inner + i] = *b;
                }
            }
        }
        self.push(Tensor::from_raw(shape, out, self.dtype), Op::Softmax { x, outer, n, inner }, "softmax")
    }

    /// Row-wise layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] || !(eps > 0.0) {
            return Err(AptError::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}, eps {eps}", self.shape(x), self.shape(gain), self.shape(bias)),
            ));
        }
        let rows = self.value(x).rows();
        let (g, b) = (self.data(gain), self.data(bias));
        let src = self.data(x);
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::from_raw(shape, out, self.dtype),
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            "layer_norm",
        )
    }

    /// Scaled dot-product attention over already-projected `q`, `k`, `v`
    /// (each `[batch * len, d]`), split into `spec.heads` heads.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let d = self.value(q).cols();
        let (qs, ks, vs) = (self.shape(q), self.shape(k), self.shape(v));
        let bad = qs.len() != 2
            || ks != vs
            || ks.len() != 2
            || ks[1] != d
            || qs[0] != spec.query.rows()
            || ks[0] != spec.key.rows()
            || spec.query.batch != spec.key.batch
            || spec.heads == 0
            || d % spec.heads != 0
            || (spec.causal && spec.query.len != spec.key.len);
        if bad {
            return Err(AptError::shape("attention", format!("q {qs:?}, k {ks:?}, v {vs:?}, heads {}", spec.heads)));
        }
        let (bsz, tq, tk, h) = (spec.query.batch, spec.query.len, spec.key.len, spec.heads);
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; bsz * h * tq * tk];
        let mut out = vec![0.0; bsz * tq * d];
        let mut scores = vec![0.0; tk];
        for b in 0..bsz {
            for hd in 0..h {
                let off = hd * dh;
                for i in 0..tq {
                    let qrow = &qd[(b * tq + i) * d + off..(b * tq + i) * d + off + dh];
                    let mut any = false;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let allowed = spec.key.mask[b * tk + j] && (!spec.causal || j <= i);
                        if allowed {
                            let krow = &kd[(b * tk + j) * d + off..(b * tk + j) * d + off + dh];
                            *s = dot(qrow, krow) * scale;
                            any = true;
                        } else {
                            *s = f64::NEG_INFINITY;
                        }
                    }
                    let p = &mut probs[((b * h + hd) * tq + i) * tk..((b * h + hd) * tq + i + 1) * tk];
                    if any {
                        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for (pj, &s) in p.iter_mut().zip(&scores) {
                            *pj = if s == f64::NEG_INFINITY { 0.0 } else { (s - max).exp() };
                            sum += *pj;
                        }
                        p.iter_mut().for_each(|x| *x /= sum);
                    }
                    let orow = &mut out[(b * tq + i) * d + off..(b * tq + i) * d + off + dh];
                    for (j, &pj) in p.iter().enumerate() {
                        if pj != 0.0 {
                            axpy(pj, &vd[(b * tk + j) * d + off..(b * tk + j) * d + off + dh], orow);
                        }
                    }
                }
            }
        }
        let t = Tensor::from_raw(vec![bsz * tq, d], out, self.dtype);
        self.push(t, Op::Attention { q, k, v, spec, probs }, "attention")
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(AptError::shape("gather", format!("table {s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(AptError::shape("gather", format!("row {bad} of {n}")));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::from_raw(vec![ids.len(), d], out, self.dtype);
        self.push(t, Op::Gather { table, ids: ids.to_vec() }, "gather")
    }

    /// Per-sequence mean over real (unmasked) rows: `[batch * len, d] -> [batch, d]`.
    pub fn masked_mean_rows(&mut self, x: Var, layout: &SeqLayout) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != layout.rows() {
            return Err(AptError::shape("masked_mean_rows", format!("{s:?} for {} rows", layout.rows())));
        }
        let d = s[1];
        let src = self.data(x);
        let mut out = vec![0.0; layout.batch * d];
        for b in 0..layout.batch {
            let rows: Vec<usize> = (0..layout.len).filter(|&t| layout.mask[b * layout.len + t]).collect();
            if rows.is_empty() {
                continue;
            }
            let inv = 1.0 / rows.len() as f64;
            let o = &mut out[b * d..(b + 1) * d];
            for t in rows {
                axpy(inv, &src[(b * layout.len + t) * d..(b * layout.len + t + 1) * d], o);
            }
        }
        let t = Tensor::from_raw(vec![layout.batch, d], out, self.dtype);
        self.push(t, Op::MaskedMeanRows { x, layout: layout.clone() }, "masked_mean_rows")
    }

    /// Concatenates `[N, c_i]` matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map(|&p| self.shape(p)[0]).unwrap_or(0);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != n {
                return Err(AptError::shape("concat_cols", format!("part {s:?} with {n} rows")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for r in 0..n {
                out[r * total + col..r * total + col + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let t = Tensor::from_raw(vec![n, total], out, self.dtype);
        self.push(t, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// `out[b, t] = Σ_l alpha[b, l] · layers[l][b, t]` with `alpha: [batch, L]`
    /// and each layer `[batch * len, d]`.
    pub fn layer_mix(&mut self, alpha: Var, layers: &[Var], len: usize) -> Result<Var> {
        let sa = self.shape(alpha).to_vec();
        if layers.is_empty() || sa.len() != 2 || sa[1] != layers.len() {
            return Err(AptError::shape("layer_mix", format!("alpha {sa:?} for {} layers", layers.len())));
        }
        let shape = self.shape(layers[0]).to_vec();
        if layers.iter().any(|&l| self.shape(l) != shape.as_slice()) || shape.len() != 2 || shape[0] != sa[0] * len {
            return Err(AptError::shape("layer_mix", "layers disagree in shape"));
        }
        let d = shape[1];
        let nl = layers.len();
        let mut out = vec![0.0; shape[0] * d];
        let a = self.data(alpha);
        for (l, &lv) in layers.iter().enumerate() {
            let src = self.data(lv);
            for b in 0..sa[0] {
                let w = a[b * nl + l];
                let span = b * len * d..(b + 1) * len * d;
                axpy(w, &src[span.clone()], &mut out[span]);
            }
        }
        let t = Tensor::from_raw(shape, out, self.dtype);
        self.push(t, Op::LayerMix { alpha, layers: layers.to_vec(), len }, "layer_mix")
    }

    /// Mean over active rows of `−Σ_k target[n,k] · log softmax(logits[n])_k`.
    ///
    /// `target` is a dense `[N, V]` matrix and never receives a gradient.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &Tensor, rows: &[bool]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || target.shape() != s.as_slice() || rows.len() != s[0] {
            return Err(AptError::shape(
                "soft_cross_entropy",
                format!("logits {s:?}, target {:?}, {} row flags", target.shape(), rows.len()),
            ));
        }
        let (n, v) = (s[0], s[1]);
        let src = self.data(logits);
        let tgt = target.data();
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        let count = rows.iter().filter(|&&r| r).count();
        for r in 0..n {
            if !rows[r] {
                continue;
            }
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let p = &mut probs[r * v..(r + 1) * v];
            for k in 0..v {
                let logp = row[k] - lse;
                p[k] = logp.exp();
                let q = tgt[r * v + k];
                if q != 0.0 {
                    total -= q * logp;
                }
            }
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        let t = Tensor::from_raw(Vec::new(), vec![value], self.dtype);
        self.push(
            t,
            Op::SoftCrossEntropy { logits, target: tgt.to_vec(), rows: rows.to_vec(), probs, count },
            "soft_cross_entropy",
        )
    }

    /// Mean over active rows of `‖a[n] − b[n]‖²`; `b` is detached.
    pub fn row_sq_dist(&mut self, a: Var, b: &Tensor, rows: &[bool]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || b.shape() != s.as_slice() || rows.len() != s[0] {
            return Err(AptError::shape("row_sq_dist", format!("{s:?} vs {:?}", b.shape())));
        }
        let d = s[1];
        let src = self.data(a);
        let count = rows.iter().filter(|&&r| r).count();
        let mut total = 0.0;
        for (r, _) in rows.iter().enumerate().filter(|(_, &on)| on) {
            for c in 0..d {
                let diff = src[r * d + c] - b.data()[r * d + c];
                total += diff * diff;
            }
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        let t = Tensor::from_raw(Vec::new(), vec![value], self.dtype);
        self.push(t, Op::RowSqDist { a, b: b.data().to_vec(), rows: rows.to_vec(), count }, "row_sq_dist")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.push(Tensor::from_raw(Vec::new(), vec![s], self.dtype), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(AptError::shape("mean", "empty tensor"));
        }
        let s = self.data(a).iter().sum::<f64>() / n as f64;
        self.push(Tensor::from_raw(Vec::new(), vec![s], self.dtype), Op::Mean(a), "mean")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let grads = self.backward_all(loss)?;
        let mut out = Gradients::default();
        for (&key, &v) in &self.params {
            if !self.nodes[v.0].needs_grad {
                continue;
            }
            let shape = self.nodes[v.0].value.shape().to_vec();
            let t = match &grads[v.0] {
                Some(g) => {
                    let mut t = Tensor::from_raw(shape, g.clone(), self.dtype);
                    t.apply_dtype();
                    t
                }
                None => Tensor::zeros(&shape, self.dtype),
            };
            out.grads.insert(key, t);
        }
        Ok(out)
    }

    /// Gradient with respect to an arbitrary node (zeros if unreachable).
    pub fn grad_of(&self, loss: Var, wrt: Var) -> Result<Tensor> {
        let grads = self.backward_all(loss)?;
        let shape = self.shape(wrt).to_vec();
        Ok(match &grads[wrt.0] {
            Some(g) => Tensor::from_raw(shape, g.clone(), self.dtype),
            None => Tensor::zeros(&shape, self.dtype),
        })
    }

    fn backward_all(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.value(loss).len() != 1 {
            return Err(AptError::Backward(format!("loss must be a scalar, got shape {:?}", self.shape(loss))));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(AptError::Backward("loss does not depend on any trainable value".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                acc(*a, &|s| gemm(m, n, k, g, false, self.data(*b), true, s, 1.0));
                acc(*b, &|s| gemm(k, m, n, self.data(*a), true, g, false, s, 1.0));
            }
            Op::Linear { x, w, b } => {
                let (m, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let n = self.shape(*w)[1];
                acc(*x, &|s| gemm(m, n, k, g, false, self.data(*w), true, s, 1.0));
                acc(*w, &|s| gemm(k, m, n, self.data(*x), true, g, false, s, 1.0));
                if let Some(b) = b {
                    acc(*b, &|s| {
                        for row in g.chunks(n.max(1)) {
                            axpy(1.0, row, s);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &|s| axpy(1.0, g, s));
                acc(*b, &|s| axpy(1.0, g, s));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| axpy(1.0, g, s));
                acc(*b, &|s| axpy(-1.0, g, s));
            }
            Op::Mul(a, b) => {
                acc(*a, &|s| s.iter_mut().zip(g).zip(self.data(*b)).for_each(|((s, g), y)| *s += g * y));
                acc(*b, &|s| s.iter_mut().zip(g).zip(self.data(*a)).for_each(|((s, g), x)| *s += g * x));
            }
            Op::Scale(a, c) => acc(*a, &|s| axpy(*c, g, s)),
            Op::AddScalar(a, sv) => {
                acc(*a, &|s| axpy(1.0, g, s));
                let total: f64 = g.iter().sum();
                acc(*sv, &|s| s[0] += total);
            }
            Op::Relu(a) => acc(*a, &|s| {
                for ((s, g), x) in s.iter_mut().zip(g).zip(self.data(*a)) {
                    if *x > 0.0 {
                        *s += g;
                    }
                }
            }),
            Op::Sigmoid(a) => acc(*a, &|s| {
                for ((s, g), y) in s.iter_mut().zip(g).zip(node.value.data()) {
                    *s += g * y * (1.0 - y);
                }
            }),
            Op::MulCol(x, gate) => {
                let d = self.shape(*x)[1];
                let gv = self.data(*gate);
                acc(*x, &|s| {
                    for ((srow, grow), &c) in s.chunks_mut(d.max(1)).zip(g.chunks(d.max(1))).zip(gv) {
                        axpy(c, grow, srow);
                    }
                });
                let xv = self.data(*x);
                acc(*gate, &|s| {
                    for (r, sr) in s.iter_mut().enumerate() {
                        *sr += dot(&g[r * d..(r + 1) * d], &xv[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = node.value.data();
                acc(*x, &|s| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let inner_dot: f64 = (0..*n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..*n {
                                s[at(j)] += y[at(j)] * (g[at(j)] - inner_dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = self.value(*x).cols();
                let gv = self.data(*gain);
                acc(*x, &|s| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let gr = &g[span.clone()];
                        let hr = &xhat[span.clone()];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..d {
                            let gh = gr[c] * gv[c];
                            m1 += gh;
                            m2 += gh * hr[c];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        let sr = &mut s[span];
                        for c in 0..d {
                            sr[c] += is * (gr[c] * gv[c] - m1 - hr[c] * m2);
                        }
                    }
                });
                acc(*gain, &|s| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            s[c] += gr[c] * hr[c];
                        }
                    }
                });
                acc(*bias, &|s| {
                    for gr in g.chunks(d) {
                        axpy(1.0, gr, s);
                    }
                });
            }
            Op::Attention { q, k, v, spec, probs } => self.attention_backward(*q, *k, *v, spec, probs, g, &mut acc),
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                acc(*table, &|s| {
                    for (r, &i) in ids.iter().enumerate() {
                        axpy(1.0, &g[r * d..(r + 1) * d], &mut s[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::MaskedMeanRows { x, layout } => {
                let d = self.shape(*x)[1];
                acc(*x, &|s| {
                    for b in 0..layout.batch {
                        let rows: Vec<usize> =
                            (0..layout.len).filter(|&t| layout.mask[b * layout.len + t]).collect();
                        if rows.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / rows.len() as f64;
                        for t in rows {
                            let r = b * layout.len + t;
                            axpy(inv, &g[b * d..(b + 1) * d], &mut s[r * d..(r + 1) * d]);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    acc(p, &|s| {
                        for r in 0..n {
                            axpy(1.0, &g[r * total + col..r * total + col + w], &mut s[r * w..(r + 1) * w]);
                        }
                    });
                    col += w;
                }
            }
            Op::LayerMix { alpha, layers, len } => {
                let nl = layers.len();
                let d = self.shape(layers[0])[1];
                let batch = self.shape(*alpha)[0];
                let a = self.data(*alpha);
                acc(*alpha, &|s| {
                    for (l, &lv) in layers.iter().enumerate() {
                        let src = self.data(lv);
                        for b in 0..batch {
                            let span = b * len * d..(b + 1) * len * d;
                            s[b * nl + l] += dot(&g[span.clone()], &src[span]);
                        }
                    }
                });
                for (l, &lv) in layers.iter().enumerate() {
                    acc(lv, &|s| {
                        for b in 0..batch {
                            let span = b * len * d..(b + 1) * len * d;
                            axpy(a[b * nl + l], &g[span.clone()], &mut s[span]);
                        }
                    });
                }
            }
            Op::SoftCrossEntropy { logits, target, rows, probs, count } => {
                if *count == 0 {
                    return;
                }
                let v = self.shape(*logits)[1];
                let scale = g[0] / *count as f64;
                acc(*logits, &|s| {
                    for (r, _) in rows.iter().enumerate().filter(|(_, &on)| on) {
                        let span = r * v..(r + 1) * v;
                        let tsum: f64 = target[span.clone()].iter().sum();
                        for k in span {
                            s[k] += scale * (probs[k] * tsum - target[k]);
                        }
                    }
                });
            }
            Op::RowSqDist { a, b, rows, count } => {
                if *count == 0 {
                    return;
                }
                let d = self.shape(*a)[1];
                let scale = 2.0 * g[0] / *count as f64;
                let av = self.data(*a);
                acc(*a, &|s| {
                    for (r, _) in rows.iter().enumerate().filter(|(_, &on)| on) {
                        for c in r * d..(r + 1) * d {
                            s[c] += scale * (av[c] - b[c]);
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, &|s| s.iter_mut().for_each(|x| *x += g[0] / n));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[f64],
        g: &[f64],
        acc: &mut dyn FnMut(Var, &dyn Fn(&mut [f64])),
    ) {
        let d = self.value(q).cols();
        let (bsz, tq, tk, h) = (spec.query.batch, spec.query.len, spec.key.len, spec.heads);
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut gq = vec![0.0; qd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; tk];
        for b in 0..bsz {
            for hd in 0..h {
                let off = hd * dh;
                for i in 0..tq {
                    let p = &probs[((b * h + hd) * tq + i) * tk..((b * h + hd) * tq + i + 1) * tk];
                    let qrow_at = (b * tq + i) * d + off;
                    let grow = &g[qrow_at..qrow_at + dh];
                    let mut inner = 0.0;
                    for j in 0..tk {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vrow_at = (b * tk + j) * d + off;
                        axpy(p[j], grow, &mut gv[vrow_at..vrow_at + dh]);
                        dp[j] = dot(grow, &vd[vrow_at..vrow_at + dh]);
                        inner += dp[j] * p[j];
                    }
                    for j in 0..tk {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - inner) * scale;
                        let krow_at = (b * tk + j) * d + off;
                        axpy(ds, &kd[krow_at..krow_at + dh], &mut gq[qrow_at..qrow_at + dh]);
                        axpy(ds, &qd[qrow_at..qrow_at + dh], &mut gk[krow_at..krow_at + dh]);
                    }
                }
            }
        }
        acc(q, &|s| axpy(1.0, &gq, s));
        acc(k, &|s| axpy(1.0, &gk, s));
        acc(v, &|s| axpy(1.0, &gv, s));
    }
}
