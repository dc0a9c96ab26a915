//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every primitive appends one node holding its output value and enough
//! cached state to run its backward rule. Nodes are only ever appended, so the
//! tape is always in topological order and [`Tape::backward`] is a single
//! reverse sweep.

use super::kernels;
use super::tensor::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Exp(Var),
    LogSigmoid(Var),
    Softmax {
        x: Var,
        inner: usize,
        n: usize,
    },
    CausalSoftmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ClippedSurrogate {
        logp: Var,
        ratio: Vec<T>,
        adv: Vec<T>,
        unclipped_active: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Ordered record of primitive operations. Confined to one thread.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn check_finite<T: Scalar>(op: &str, v: &[T]) -> Result<()> {
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        let what = if v[i].is_nan() { "NaN" } else { "infinite value" };
        return Err(Error::Numeric(format!("{op}: {what} at flat index {i}")));
    }
    Ok(())
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let n = *shape.last().unwrap_or(&1);
    (numel(shape) / n.max(1), n)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a copy of `t`; it receives a gradient iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], value: Vec<T>) -> Result<Var> {
        if numel(shape) != value.len() {
            return Err(Error::Dimension(format!(
                "constant of shape {shape:?} given {} values",
                value.len()
            )));
        }
        Ok(self.push(shape.to_vec(), value, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad.as_deref()
    }

    /// Drops every node recorded after the first `len`, so leaves bound once
    /// can be reused by many forward passes without the tape growing.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    // ---- linear algebra ----------------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `x[m×k] · w[n×k]ᵀ`, the layout of a dense layer whose weight maps
    /// `k` inputs to `n` outputs.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(shape_err("linear", sx, sw));
        }
        let (m, k, n) = (sx[0], sx[1], sw[0]);
        let out = kernels::matmul_nt(self.value(x), self.value(w), m, k, n);
        let rg = self.rg(&[x, w]);
        Ok(self.push(vec![m, n], out, Op::Linear(x, w), rg))
    }

    // ---- elementwise -----------------------------------------------------

    fn binary(&mut self, name: &str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    /// Adds a row vector `b[n]` to every row of `x[..×n]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, n) = rows_cols(self.shape(x));
        if self.shape(b) != [n] {
            return Err(shape_err("add_row", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b);
        let out: Vec<T> = self
            .value(x)
            .chunks(n)
            .flat_map(|r| r.iter().zip(bv).map(|(&u, &v)| u + v))
            .collect();
        let rg = self.rg(&[x, b]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.exp()).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Exp(x), rg)
    }

    /// `log σ(x)`, evaluated without overflow for large |x|.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| log_sigmoid(v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::LogSigmoid(x), rg)
    }

    // ---- normalisation ---------------------------------------------------

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        check_finite("softmax", self.value(x))?;
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.value(x);
        let mut out = src.to_vec();
        let mut buf = vec![T::zero(); n];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                for j in 0..n {
                    buf[j] = src[base + j * inner];
                }
                kernels::softmax_in_place(&mut buf);
                for j in 0..n {
                    out[base + j * inner] = buf[j];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Softmax { x, inner, n }, rg))
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::Dimension(format!(
                "causal_softmax needs a square matrix, got {shape:?}"
            )));
        }
        check_finite("causal_softmax", self.value(x))?;
        let t = shape[0];
        let mut out = vec![T::zero(); t * t];
        let src = self.value(x);
        for i in 0..t {
            let row = &mut out[i * t..i * t + i + 1];
            row.copy_from_slice(&src[i * t..i * t + i + 1]);
            kernels::softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::CausalSoftmax(x), rg))
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        check_finite("log_softmax", self.value(x))?;
        let (_, n) = rows_cols(self.shape(x));
        let out: Vec<T> = self
            .value(x)
            .chunks(n)
            .flat_map(|r| {
                let lse = kernels::logsumexp(r);
                r.iter().map(move |&v| v - lse)
            })
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::LogSoftmax(x), rg))
    }

    /// Normalises each row over the last axis, then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&0);
        if n == 0 {
            return Err(Error::Dimension("layernorm over a zero-length row".into()));
        }
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::Dimension(format!(
                "layernorm: gain {:?} / bias {:?} must both be [{n}]",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        check_finite("layernorm", self.value(x))?;
        let nt = T::from_f64(n as f64);
        let src = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = src.len() / n;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        check_finite("layernorm", &out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean over masked positions of `−log softmax(logits)[t, target_t]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || targets.len() != mask.len() {
            return Err(Error::Dimension(format!(
                "cross_entropy: logits {shape:?}, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let (t, v) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::Contract(format!(
                "cross_entropy: target {bad} outside vocabulary of {v}"
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy: mask selects no positions".into()));
        }
        check_finite("cross_entropy", self.value(logits))?;
        let src = self.value(logits);
        let mut probs = vec![T::zero(); t * v];
        let mut total = T::zero();
        for i in 0..t {
            let row = &src[i * v..(i + 1) * v];
            let lse = kernels::logsumexp(row);
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
            if mask[i] {
                total += lse - row[targets[i]];
            }
        }
        let loss = total / T::from_f64(count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    // ---- indexing and layout ---------------------------------------------

    /// Rows `ids` of a 2-D table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!("gather_rows on shape {shape:?}")));
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!("row index {bad} out of range for {rows} rows")));
        }
        if ids.is_empty() {
            return Err(Error::Dimension("gather_rows with no indices".into()));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Columns `start..start+len` of a 2-D value.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || start + len > shape[1] || len == 0 {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{} of shape {shape:?}",
                start + len
            )));
        }
        let (m, n) = (shape[0], shape[1]);
        let src = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![m, len], out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat_cols of nothing".into()))?;
        let m = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != m {
                return Err(shape_err("concat_cols", self.shape(*first), s));
            }
            widths.push(s[1]);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![m, n], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat_rows of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(shape_err("concat_rows", self.shape(*first), s));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(shape, out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// `out[r] = x[r, idx[r]]` for a 2-D `x`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != idx.len() {
            return Err(Error::Dimension(format!(
                "pick {} indices from shape {shape:?}",
                idx.len()
            )));
        }
        let n = shape[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!("pick index {bad} out of range {n}")));
        }
        let src = self.value(x);
        let out = idx.iter().enumerate().map(|(r, &c)| src[r * n + c]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![idx.len()],
            out,
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().copied().sum::<T>() / T::from_f64(v.len() as f64);
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Mean(x), rg)
    }

    /// Elementwise `min(ρ·A, clip(ρ, 1−ε, 1+ε)·A)` with `ρ = exp(logp − old)`.
    pub fn clipped_surrogate(&mut self, logp: Var, old: &[T], adv: &[T], eps: T) -> Result<Var> {
        let n = self.value(logp).len();
        if old.len() != n || adv.len() != n {
            return Err(Error::Dimension(format!(
                "clipped_surrogate: {n} log-probs, {} old, {} advantages",
                old.len(),
                adv.len()
            )));
        }
        let (lo, hi) = (T::one() - eps, T::one() + eps);
        let mut ratio = Vec::with_capacity(n);
        let mut active = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let r = (self.value(logp)[i] - old[i]).exp();
            let un = r * adv[i];
            let cl = r.max(lo).min(hi) * adv[i];
            ratio.push(r);
            active.push(un <= cl);
            out.push(un.min(cl));
        }
        check_finite("clipped_surrogate", &out)?;
        let rg = self.rg(&[logp]);
        Ok(self.push(
            self.shape(logp).to_vec(),
            out,
            Op::ClippedSurrogate {
                logp,
                ratio,
                adv: adv.to_vec(),
                unclipped_active: active,
            },
            rg,
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Propagates d(loss)/d(node) to every leaf that requires a gradient.
    /// Leaf gradients accumulate across calls until [`Tape::zero_grads`];
    /// reachable-or-not, every such leaf ends with a gradient (zeros if unused).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<(usize, Vec<T>)> = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |v: Var, contrib: Vec<T>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(a) => a.iter_mut().zip(&contrib).for_each(|(x, &y)| *x += y),
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |v: Var| &self.nodes[v.0].value;
            let shp = |v: Var| &self.nodes[v.0].shape;
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::MatMul(a, b) => {
                    let (m, k, n) = (shp(*a)[0], shp(*a)[1], shp(*b)[1]);
                    acc(*a, kernels::matmul_nt(&g, val(*b), m, n, k));
                    acc(*b, kernels::matmul_tn(val(*a), &g, m, k, n));
                }
                Op::Linear(x, w) => {
                    let (m, k, n) = (shp(*x)[0], shp(*x)[1], shp(*w)[0]);
                    acc(*x, kernels::matmul(&g, val(*w), m, n, k));
                    acc(*w, kernels::matmul_tn(&g, val(*x), m, n, k));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.iter().map(|&v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let ga = g.iter().zip(val(*b)).map(|(&u, &v)| u * v).collect();
                    let gb = g.iter().zip(val(*a)).map(|(&u, &v)| u * v).collect();
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::AddRow(x, b) => {
                    let n = shp(*b)[0];
                    let mut gb = vec![T::zero(); n];
                    for r in g.chunks(n) {
                        gb.iter_mut().zip(r).for_each(|(a, &v)| *a += v);
                    }
                    acc(*x, g);
                    acc(*b, gb);
                }
                Op::Scale(x, c) => acc(*x, g.iter().map(|&v| v * *c).collect()),
                Op::Gelu(x) => {
                    let gx = g.iter().zip(val(*x)).map(|(&u, &v)| u * gelu_grad(v)).collect();
                    acc(*x, gx);
                }
                Op::Exp(x) => {
                    let gx = g.iter().zip(&node.value).map(|(&u, &y)| u * y).collect();
                    acc(*x, gx);
                }
                Op::LogSigmoid(x) => {
                    let gx = g
                        .iter()
                        .zip(val(*x))
                        .map(|(&u, &v)| u * sigmoid(-v))
                        .collect();
                    acc(*x, gx);
                }
                Op::Softmax { x, inner, n } => {
                    let y = &node.value;
                    let (inner, n) = (*inner, *n);
                    let outer = y.len() / (inner * n);
                    let mut gx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let dotp: T = (0..n)
                                .map(|j| g[base + j * inner] * y[base + j * inner])
                                .sum();
                            for j in 0..n {
                                let p = base + j * inner;
                                gx[p] = y[p] * (g[p] - dotp);
                            }
                        }
                    }
                    acc(*x, gx);
                }
                Op::CausalSoftmax(x) => {
                    let y = &node.value;
                    let t = node.shape[0];
                    let mut gx = vec![T::zero(); y.len()];
                    for i in 0..t {
                        let r = i * t..i * t + i + 1;
                        let dotp = kernels::dot(&g[r.clone()], &y[r.clone()]);
                        for p in r {
                            gx[p] = y[p] * (g[p] - dotp);
                        }
                    }
                    acc(*x, gx);
                }
                Op::LogSoftmax(x) => {
                    let n = *node.shape.last().unwrap();
                    let mut gx = vec![T::zero(); g.len()];
                    for ((gr, yr), out) in g.chunks(n).zip(node.value.chunks(n)).zip(gx.chunks_mut(n)) {
                        let s: T = gr.iter().copied().sum();
                        for j in 0..n {
                            out[j] = gr[j] - yr[j].exp() * s;
                        }
                    }
                    acc(*x, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let n = shp(*gain)[0];
                    let gv = val(*gain);
                    let nt = T::from_f64(n as f64);
                    let mut dgain = vec![T::zero(); n];
                    let mut dbias = vec![T::zero(); n];
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..n {
                            dgain[j] += gr[j] * hr[j];
                            dbias[j] += gr[j];
                            let gg = gr[j] * gv[j];
                            m1 += gg;
                            m2 += gg * hr[j];
                        }
                        m1 = m1 / nt;
                        m2 = m2 / nt;
                        for j in 0..n {
                            dx[r * n + j] = rs * (gr[j] * gv[j] - m1 - hr[j] * m2);
                        }
                    }
                    acc(*x, dx);
                    acc(*gain, dgain);
                    acc(*bias, dbias);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    mask,
                    probs,
                    count,
                } => {
                    let v = shp(*logits)[1];
                    let scale = g[0] / T::from_f64(*count as f64);
                    let mut gx = vec![T::zero(); probs.len()];
                    for (i, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..v {
                            gx[i * v + j] = probs[i * v + j] * scale;
                        }
                        gx[i * v + targets[i]] -= scale;
                    }
                    acc(*logits, gx);
                }
                Op::GatherRows { table, ids } => {
                    let d = shp(*table)[1];
                    let mut gt = vec![T::zero(); val(*table).len()];
                    for (r, &id) in ids.iter().enumerate() {
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, &b)| *a += b);
                    }
                    acc(*table, gt);
                }
                Op::SliceCols { x, start } => {
                    let (m, n) = (shp(*x)[0], shp(*x)[1]);
                    let len = node.shape[1];
                    let mut gx = vec![T::zero(); m * n];
                    for i in 0..m {
                        gx[i * n + start..i * n + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    acc(*x, gx);
                }
                Op::ConcatCols(parts) => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let mut off = 0;
                    for &p in parts {
                        let w = shp(p)[1];
                        let mut gp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            gp.extend_from_slice(&g[i * n + off..i * n + off + w]);
                        }
                        off += w;
                        acc(p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = val(p).len();
                        acc(p, g[off..off + len].to_vec());
                        off += len;
                    }
                }
                Op::Pick { x, idx } => {
                    let n = shp(*x)[1];
                    let mut gx = vec![T::zero(); val(*x).len()];
                    for (r, &c) in idx.iter().enumerate() {
                        gx[r * n + c] += g[r];
                    }
                    acc(*x, gx);
                }
                Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
                Op::Mean(x) => {
                    let n = val(*x).len();
                    acc(*x, vec![g[0] / T::from_f64(n as f64); n]);
                }
                Op::Reshape(x) => acc(*x, g),
                Op::ClippedSurrogate {
                    logp,
                    ratio,
                    adv,
                    unclipped_active,
                } => {
                    let gx = (0..g.len())
                        .map(|i| {
                            if unclipped_active[i] {
                                g[i] * ratio[i] * adv[i]
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    acc(*logp, gx);
                }
            }
        }

        for (i, g) in leaf_grads {
            let slot = &mut self.nodes[i].grad;
            match slot {
                Some(a) => a.iter_mut().zip(&g).for_each(|(x, &y)| *x += y),
                None => *slot = Some(g),
            }
        }
        for n in &mut self.nodes {
            if n.requires_grad && matches!(n.op, Op::Leaf) && n.grad.is_none() {
                n.grad = Some(vec![T::zero(); n.value.len()]);
            }
        }
        Ok(())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + T::from_f64(3.0) * a * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
