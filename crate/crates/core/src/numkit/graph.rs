//! Reverse-mode differentiation over a recorded graph.
//!
//! A [`Graph`] records every op applied during a forward pass. Parameters are
//! borrowed from a [`ParamStore`] without copying. [`Graph::backward`] walks
//! the record in reverse; gradients of leaves and parameters accumulate across
//! calls until the graph is dropped or [`Graph::zero_grads`] is called.

use std::borrow::Cow;
use std::collections::HashMap;

use super::kernels;
use super::tensor::numel;
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Exp(Var),
    /// Keeps `tanh` of the inner argument for the backward pass.
    Gelu(Var, Vec<T>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanPool {
        x: Var,
        weights: Vec<T>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    ReplaceRows {
        x: Var,
        fill: Var,
        mask: Vec<bool>,
    },
}

struct Node<'a, T: Clone> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. `'a` is the lifetime of the borrowed parameter store.
pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    grads: HashMap<usize, Vec<T>>,
    store: Option<&'a ParamStore<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<'static, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<'static, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: HashMap::new(),
            store: None,
            param_vars: HashMap::new(),
        }
    }
}

fn check_finite<T: Real>(op: &'static str, v: &[T]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn last_dim(op: &'static str, shape: &[usize]) -> Result<usize> {
    match shape.last() {
        Some(&d) if d > 0 => Ok(d),
        _ => shape_err(op, format!("needs a non-empty last axis, got {shape:?}")),
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn with_params(store: &'a ParamStore<T>) -> Self {
        Self {
            nodes: Vec::new(),
            grads: HashMap::new(),
            store: Some(store),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    pub fn item(&self, v: Var) -> Result<T> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(Error::NotScalar(n.shape.clone()));
        }
        Ok(n.value[0])
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a leaf or parameter node.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(&v.0).map(|g| g.as_slice())
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [T]>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        check_finite(op_name, &value)?;
        Ok(self.push(shape, Cow::Owned(value), op, needs_grad))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ----- leaves ------------------------------------------------------------

    /// Leaf from a tensor; it receives a gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        check_finite("leaf", t.data())?;
        Ok(self.push(
            t.shape().to_vec(),
            Cow::Owned(t.data().to_vec()),
            Op::Leaf,
            t.requires_grad(),
        ))
    }

    pub fn leaf_owned(&mut self, t: Tensor<T>) -> Result<Var> {
        check_finite("leaf", t.data())?;
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        Ok(self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, rg))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        let t = t.with_requires_grad(false);
        self.leaf_owned(t)
    }

    /// Node for a parameter of the attached store (created once per graph).
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::Invalid("graph has no parameter store".into()))?;
        if id.0 >= store.len() {
            return Err(Error::Index {
                op: "param",
                index: id.0,
                bound: store.len(),
            });
        }
        let t = store.tensor(id);
        let v = self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Param, true);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    /// Parameter gradients collected by backward, consuming the graph so the
    /// store borrow ends.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Vec<T>)> {
        let mut out: Vec<(ParamId, Vec<T>)> = self
            .param_vars
            .iter()
            .filter_map(|(&id, &v)| self.grads.remove(&v.0).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    // ----- ops ---------------------------------------------------------------

    /// `a[.., k] · b[k, n] -> [.., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return shape_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = numel(&sa) / k.max(1);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(a) || self.ng(b);
        self.push_checked("matmul", shape, out, Op::MatMul(a, b), ng)
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return shape_err(op, format!("{sb:?} does not broadcast onto {sa:?}"));
        }
        Ok(())
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.check_suffix(op_name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let nb = bv.len();
        let out: Vec<T> = av
            .chunks(nb)
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push_checked(op_name, shape, out, op, ng)
    }

    /// `a + b`, where `b`'s shape is a suffix of `a`'s (bias broadcasting).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out: Vec<T> = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push_checked("scale", shape, out, Op::Scale(a, c), ng)
    }

    /// `s · a` with `s` a scalar node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.item(s)?;
        let out: Vec<T> = self.value(a).iter().map(|&x| x * sv).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(s);
        self.push_checked("scale_by", shape, out, Op::ScaleBy(a, s), ng)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out: Vec<T> = self.value(a).iter().map(|x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push_checked("exp", shape, out, Op::Exp(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let xv = self.value(a);
        let tanh: Vec<T> = xv.iter().map(|&x| kernels::gelu_tanh(x)).collect();
        let out: Vec<T> = xv.iter().zip(&tanh).map(|(&x, &t)| T::of(0.5) * x * (T::one() + t)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push_checked("gelu", shape, out, Op::Gelu(a, tanh), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        check_finite("softmax", self.value(a))?;
        let d = last_dim("softmax", self.shape(a))?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(d) {
            kernels::softmax_row(row);
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push_checked("softmax", shape, out, Op::Softmax(a), ng)
    }

    /// Softmax over an arbitrary axis (moved to the end and back).
    pub fn softmax_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return shape_err("softmax", format!("axis {axis} for shape {shape:?}"));
        }
        if axis + 1 == shape.len() {
            return self.softmax(a);
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut moved_shape = shape.clone();
        moved_shape.remove(axis);
        moved_shape.push(len);
        // element (o, j, i) -> (o, i, j)
        let mut fwd = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..len {
                    fwd.push((o * len + j) * inner + i);
                }
            }
        }
        let flat = self.reshape(a, vec![numel(&shape), 1])?;
        let moved = self.gather_rows(flat, fwd.clone(), {
            let mut s = moved_shape.clone();
            s.push(1);
            s
        })?;
        let moved = self.reshape(moved, moved_shape)?;
        let soft = self.softmax(moved)?;
        let mut back = vec![0usize; fwd.len()];
        for (dst, &src) in fwd.iter().enumerate() {
            back[src] = dst;
        }
        let flat = self.reshape(soft, vec![numel(&shape), 1])?;
        let mut out_shape = shape.clone();
        out_shape.push(1);
        let out = self.gather_rows(flat, back, out_shape)?;
        self.reshape(out, shape)
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = last_dim("layer_norm", self.shape(x))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return shape_err("layer_norm", format!("gain/bias must be [{d}]"));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        let inv_d = T::of(1.0 / d as f64);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push_checked(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Rows of `table[V, D]` selected by `ids`; output shape `ids_shape ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return shape_err("embedding", format!("table must be 2-D, got {ts:?}"));
        }
        if numel(ids_shape) != ids.len() {
            return shape_err("embedding", format!("{} ids for shape {ids_shape:?}", ids.len()));
        }
        let (vocab, d) = (ts[0], ts[1]);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    op: "embedding",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let ng = self.ng(table);
        self.push_checked(
            "embedding",
            shape,
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Rows (last-axis vectors) of `x` picked by index and laid out
    /// consecutively; `out_shape` must hold exactly `rows.len()` rows.
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>, out_shape: Vec<usize>) -> Result<Var> {
        let d = last_dim("gather_rows", self.shape(x))?;
        if numel(&out_shape) != rows.len() * d {
            return shape_err(
                "gather_rows",
                format!("{} rows of width {d} into {out_shape:?}", rows.len()),
            );
        }
        let xv = self.value(x);
        let n_rows = xv.len() / d;
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            if r >= n_rows {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: r,
                    bound: n_rows,
                });
            }
            out.extend_from_slice(&xv[r * d..(r + 1) * d]);
        }
        let ng = self.ng(x);
        self.push_checked("gather_rows", out_shape, out, Op::GatherRows { x, rows }, ng)
    }

    /// Transpose of a 2-D node.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return shape_err("transpose", format!("needs 2-D, got {s:?}"));
        }
        let (r, c) = (s[0], s[1]);
        let flat = self.reshape(x, vec![r * c, 1])?;
        let mut idx = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                idx.push(i * c + j);
            }
        }
        let t = self.gather_rows(flat, idx, vec![c * r, 1])?;
        self.reshape(t, vec![c, r])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {axis} for shape {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let v = self.value(p);
                out.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push_checked(
            "concat",
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return shape_err("slice", format!("[{start}, {}) on axis {axis} of {s:?}", start + len));
        }
        let (outer, full, inner) = split_axis(&s, axis);
        let v = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.ng(x);
        self.push_checked("slice", shape, out, Op::Slice { x, axis, start }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x)));
        }
        let value = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(shape, Cow::Owned(value), Op::Reshape(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = kernels::pairwise_sum(self.value(x));
        let ng = self.ng(x);
        self.push_checked("sum", vec![], vec![s], Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return shape_err("mean", "empty tensor");
        }
        let s = kernels::pairwise_sum(self.value(x)) / T::of(n as f64);
        let ng = self.ng(x);
        self.push_checked("mean", vec![], vec![s], Op::MeanAll(x), ng)
    }

    /// Mean over axis 1 of `x[B, N, D]`, skipping positions whose `valid` flag
    /// is false. Returns `[B, D]`.
    pub fn mean_pool(&mut self, x: Var, valid: Option<&[bool]>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return shape_err("mean_pool", format!("needs [B, N, D], got {s:?}"));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        if let Some(m) = valid {
            if m.len() != b * n {
                return shape_err("mean_pool", format!("mask of {} for {b}x{n}", m.len()));
            }
        }
        let mut weights = vec![T::zero(); b * n];
        for bi in 0..b {
            let count = (0..n)
                .filter(|&j| valid.map_or(true, |m| m[bi * n + j]))
                .count();
            if count == 0 {
                return Err(Error::Invalid(format!(
                    "mean_pool: example {bi} has no valid positions"
                )));
            }
            let w = T::one() / T::of(count as f64);
            for j in 0..n {
                if valid.map_or(true, |m| m[bi * n + j]) {
                    weights[bi * n + j] = w;
                }
            }
        }
        let xv = self.value(x);
        let mut out = vec![T::zero(); b * d];
        for bi in 0..b {
            let orow = &mut out[bi * d..(bi + 1) * d];
            for j in 0..n {
                let w = weights[bi * n + j];
                if w == T::zero() {
                    continue;
                }
                let xrow = &xv[(bi * n + j) * d..(bi * n + j + 1) * d];
                for (o, &xv) in orow.iter_mut().zip(xrow) {
                    *o += w * xv;
                }
            }
        }
        let ng = self.ng(x);
        self.push_checked("mean_pool", vec![b, d], out, Op::MeanPool { x, weights }, ng)
    }

    /// Each last-axis row scaled to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let d = last_dim("l2_normalize", self.shape(x))?;
        let xv = self.value(x);
        let rows = xv.len() / d;
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let nrm = kernels::dot(row, row).sqrt();
            if nrm == T::zero() {
                return Err(Error::Invalid("l2_normalize: zero-norm row".into()));
            }
            norms.push(nrm);
            out.extend(row.iter().map(|&v| v / nrm));
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push_checked("l2_normalize", shape, out, Op::L2Normalize { x, norms }, ng)
    }

    /// Mean over `rows` of `-log softmax(logits[row])[target]`, with logits
    /// viewed as `[n_rows, K]`.
    pub fn cross_entropy(&mut self, logits: Var, rows: &[usize], targets: &[usize]) -> Result<Var> {
        let k = last_dim("cross_entropy", self.shape(logits))?;
        if rows.len() != targets.len() {
            return shape_err("cross_entropy", "rows and targets differ in length");
        }
        if rows.is_empty() {
            return Err(Error::Invalid("cross_entropy: empty target set".into()));
        }
        let lv = self.value(logits);
        check_finite("cross_entropy", lv)?;
        let n_rows = lv.len() / k;
        let mut probs = Vec::with_capacity(rows.len() * k);
        let mut terms = Vec::with_capacity(rows.len());
        for (&r, &t) in rows.iter().zip(targets) {
            if r >= n_rows {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: r,
                    bound: n_rows,
                });
            }
            if t >= k {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: k,
                });
            }
            let row = &lv[r * k..(r + 1) * k];
            let lse = kernels::log_sum_exp(row);
            terms.push(lse - row[t]);
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = kernels::pairwise_sum(&terms) / T::of(rows.len() as f64);
        let ng = self.ng(logits);
        self.push_checked(
            "cross_entropy",
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                rows: rows.to_vec(),
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q[B, Nq, D]`, `k, v[B, Nk, D]`; heads split `D` into contiguous column
    /// blocks. `key_mask[B·Nk]` marks keys that may be attended to.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, key_mask: Option<&[bool]>) -> Result<Var> {
        let (sq, sk, sv) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return shape_err("attention", format!("q {sq:?}, k {sk:?}, v {sv:?}"));
        }
        let (b, nq, d) = (sq[0], sq[1], sq[2]);
        let nk = sk[1];
        if heads == 0 || d % heads != 0 {
            return shape_err("attention", format!("width {d} not divisible by {heads} heads"));
        }
        if let Some(m) = key_mask {
            if m.len() != b * nk {
                return shape_err("attention", format!("key mask of {} for {b}x{nk}", m.len()));
            }
            for bi in 0..b {
                if !m[bi * nk..(bi + 1) * nk].iter().any(|&x| x) {
                    return Err(Error::Invalid(format!(
                        "attention: example {bi} has no valid keys"
                    )));
                }
            }
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); b * heads * nq * nk];
        let mut out = vec![T::zero(); b * nq * d];
        for bi in 0..b {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..nq {
                    let qrow = &qv[(bi * nq + i) * d + c0..(bi * nq + i) * d + c0 + dh];
                    let prow = &mut probs[((bi * heads + h) * nq + i) * nk..((bi * heads + h) * nq + i + 1) * nk];
                    let mut max = T::neg_infinity();
                    for j in 0..nk {
                        if key_mask.map_or(true, |m| m[bi * nk + j]) {
                            let krow = &kv[(bi * nk + j) * d + c0..(bi * nk + j) * d + c0 + dh];
                            let s = kernels::dot(qrow, krow) * scale;
                            prow[j] = s;
                            if s > max {
                                max = s;
                            }
                        }
                    }
                    let mut sum = T::zero();
                    for j in 0..nk {
                        if key_mask.map_or(true, |m| m[bi * nk + j]) {
                            let e = (prow[j] - max).exp();
                            prow[j] = e;
                            sum += e;
                        } else {
                            prow[j] = T::zero();
                        }
                    }
                    for p in prow.iter_mut() {
                        *p /= sum;
                    }
                    let orow = &mut out[(bi * nq + i) * d + c0..(bi * nq + i) * d + c0 + dh];
                    for (j, &p) in prow.iter().enumerate() {
                        if p == T::zero() {
                            continue;
                        }
                        let vrow = &vv[(bi * nk + j) * d + c0..(bi * nk + j) * d + c0 + dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push_checked(
            "attention",
            vec![b, nq, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Attention probabilities `[B, heads, Nq, Nk]` recorded by an attention node.
    pub fn attention_probs(&self, node: Var) -> Option<&[T]> {
        match &self.nodes[node.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Rows of `x` flagged in `mask` replaced by the vector `fill`.
    pub fn replace_rows(&mut self, x: Var, fill: Var, mask: &[bool]) -> Result<Var> {
        let d = last_dim("replace_rows", self.shape(x))?;
        if self.shape(fill) != [d] {
            return shape_err("replace_rows", format!("fill {:?} for width {d}", self.shape(fill)));
        }
        let xv = self.value(x);
        if mask.len() * d != xv.len() {
            return shape_err("replace_rows", format!("mask of {} for {} rows", mask.len(), xv.len() / d));
        }
        let fv = self.value(fill);
        let mut out = xv.to_vec();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out[r * d..(r + 1) * d].copy_from_slice(fv);
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(fill);
        self.push_checked(
            "replace_rows",
            shape,
            out,
            Op::ReplaceRows {
                x,
                fill,
                mask: mask.to_vec(),
            },
            ng,
        )
    }

    // ----- backward ----------------------------------------------------------

    /// Reverse pass from a scalar output.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        let shape = self.shape(out).to_vec();
        if numel(&shape) != 1 {
            return Err(Error::NotScalar(shape));
        }
        self.backward_seeded(out, &[T::one()])
    }

    /// Reverse pass from an arbitrary node with an explicit upstream gradient.
    pub fn backward_seeded(&mut self, out: Var, seed: &[T]) -> Result<()> {
        if seed.len() != self.value(out).len() {
            return shape_err("backward", format!("seed of {} for {:?}", seed.len(), self.shape(out)));
        }
        check_finite("backward", seed)?;
        let mut adj: Vec<Option<Vec<T>>> = (0..=out.0).map(|_| None).collect();
        adj[out.0] = Some(seed.to_vec());
        for i in (0..=out.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut adj)?;
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param) {
                match self.grads.get_mut(&i) {
                    Some(acc) => add_into(acc, &g),
                    None => {
                        self.grads.insert(i, g);
                    }
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let want = |v: Var| nodes[v.0].needs_grad;
        fn slot<'s, T: Real>(adj: &'s mut [Option<Vec<T>>], nodes: &[Node<'_, T>], v: Var) -> &'s mut Vec<T> {
            let n = nodes[v.0].value.len();
            adj[v.0].get_or_insert_with(|| vec![T::zero(); n])
        }
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let sb = &nodes[b.0].shape;
                let (k, n) = (sb[0], sb[1]);
                let m = g.len() / n;
                if want(a) {
                    let bv = nodes[b.0].value.as_ref();
                    kernels::matmul_a_bt_acc(g, bv, slot(adj, nodes, a), m, n, k);
                }
                if want(b) {
                    let av = nodes[a.0].value.as_ref();
                    kernels::matmul_at_b_acc(av, g, slot(adj, nodes, b), m, k, n);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                let neg = matches!(node.op, Op::Sub(..));
                if want(a) {
                    add_into(slot(adj, nodes, a), g);
                }
                if want(b) {
                    let nb = nodes[b.0].value.len();
                    let db = slot(adj, nodes, b);
                    for chunk in g.chunks(nb) {
                        for (d, &x) in db.iter_mut().zip(chunk) {
                            if neg {
                                *d -= x;
                            } else {
                                *d += x;
                            }
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let nb = nodes[b.0].value.len();
                if want(a) {
                    let bv = nodes[b.0].value.as_ref();
                    let da = slot(adj, nodes, a);
                    for (dchunk, gchunk) in da.chunks_mut(nb).zip(g.chunks(nb)) {
                        for ((d, &x), &y) in dchunk.iter_mut().zip(gchunk).zip(bv) {
                            *d += x * y;
                        }
                    }
                }
                if want(b) {
                    let av = nodes[a.0].value.as_ref();
                    let db = slot(adj, nodes, b);
                    for (achunk, gchunk) in av.chunks(nb).zip(g.chunks(nb)) {
                        for ((d, &x), &y) in db.iter_mut().zip(gchunk).zip(achunk) {
                            *d += x * y;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                if want(a) {
                    for (d, &x) in slot(adj, nodes, a).iter_mut().zip(g) {
                        *d += x * c;
                    }
                }
            }
            Op::ScaleBy(a, s) => {
                let (a, s) = (*a, *s);
                let sv = nodes[s.0].value[0];
                if want(a) {
                    for (d, &x) in slot(adj, nodes, a).iter_mut().zip(g) {
                        *d += x * sv;
                    }
                }
                if want(s) {
                    let ds = kernels::dot(g, &nodes[a.0].value);
                    slot(adj, nodes, s)[0] += ds;
                }
            }
            Op::Exp(a) => {
                let a = *a;
                if want(a) {
                    let y = node.value.as_ref();
                    for ((d, &x), &yv) in slot(adj, nodes, a).iter_mut().zip(g).zip(y) {
                        *d += x * yv;
                    }
                }
            }
            Op::Gelu(a, tanh) => {
                let a = *a;
                if want(a) {
                    let xv = nodes[a.0].value.as_ref();
                    for (((d, &x), &xi), &t) in slot(adj, nodes, a).iter_mut().zip(g).zip(xv).zip(tanh) {
                        *d += x * kernels::gelu_grad_with(xi, t);
                    }
                }
            }
            Op::Softmax(a) => {
                let a = *a;
                if want(a) {
                    let d = *node.shape.last().unwrap();
                    let y = node.value.as_ref();
                    let da = slot(adj, nodes, a);
                    for ((drow, grow), yrow) in da.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let s = kernels::dot(grow, yrow);
                        for ((dv, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv += yv * (gv - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = *node.shape.last().unwrap();
                if want(gain) {
                    let dg = slot(adj, nodes, gain);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((dv, &gv), &hv) in dg.iter_mut().zip(grow).zip(hrow) {
                            *dv += gv * hv;
                        }
                    }
                }
                if want(bias) {
                    let db = slot(adj, nodes, bias);
                    for grow in g.chunks(d) {
                        add_into(db, grow);
                    }
                }
                if want(x) {
                    let gv = nodes[gain.0].value.as_ref();
                    let inv_d = T::of(1.0 / d as f64);
                    let dx = slot(adj, nodes, x);
                    let mut dxhat = vec![T::zero(); d];
                    for (r, (drow, grow)) in dx.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                        let hrow = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            dxhat[j] = grow[j] * gv[j];
                            mean_dh += dxhat[j];
                            mean_dh_h += dxhat[j] * hrow[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        let rs = rstd[r];
                        for j in 0..d {
                            drow[j] += rs * (dxhat[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                if want(table) {
                    let d = nodes[table.0].shape[1];
                    let dt = slot(adj, nodes, table);
                    for (pos, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[pos * d..(pos + 1) * d]);
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let x = *x;
                if want(x) {
                    let d = *nodes[x.0].shape.last().unwrap();
                    let dx = slot(adj, nodes, x);
                    for (pos, &r) in rows.iter().enumerate() {
                        add_into(&mut dx[r * d..(r + 1) * d], &g[pos * d..(pos + 1) * d]);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let (outer, total, inner) = split_axis(&node.shape, axis);
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].shape[axis];
                    if want(p) {
                        let dp = slot(adj, nodes, p);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            add_into(&mut dp[o * len * inner..(o + 1) * len * inner], &g[src..src + len * inner]);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (x, axis, start) = (*x, *axis, *start);
                if want(x) {
                    let xs = &nodes[x.0].shape;
                    let (outer, full, inner) = split_axis(xs, axis);
                    let len = node.shape[axis];
                    let dx = slot(adj, nodes, x);
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        add_into(&mut dx[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            }
            Op::Reshape(x) => {
                let x = *x;
                if want(x) {
                    add_into(slot(adj, nodes, x), g);
                }
            }
            Op::SumAll(x) | Op::MeanAll(x) => {
                let x = *x;
                if want(x) {
                    let n = nodes[x.0].value.len();
                    let gv = if matches!(node.op, Op::MeanAll(_)) {
                        g[0] / T::of(n as f64)
                    } else {
                        g[0]
                    };
                    for d in slot(adj, nodes, x).iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::MeanPool { x, weights } => {
                let x = *x;
                if want(x) {
                    let s = &nodes[x.0].shape;
                    let (b, n, d) = (s[0], s[1], s[2]);
                    let dx = slot(adj, nodes, x);
                    for bi in 0..b {
                        let grow = &g[bi * d..(bi + 1) * d];
                        for j in 0..n {
                            let w = weights[bi * n + j];
                            if w == T::zero() {
                                continue;
                            }
                            let drow = &mut dx[(bi * n + j) * d..(bi * n + j + 1) * d];
                            for (dv, &gv) in drow.iter_mut().zip(grow) {
                                *dv += w * gv;
                            }
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let x = *x;
                if want(x) {
                    let d = *node.shape.last().unwrap();
                    let y = node.value.as_ref();
                    let dx = slot(adj, nodes, x);
                    for (r, &nrm) in norms.iter().enumerate() {
                        let yrow = &y[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let s = kernels::dot(yrow, grow);
                        for j in 0..d {
                            dx[r * d + j] += (grow[j] - yrow[j] * s) / nrm;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                rows,
                targets,
                probs,
            } => {
                let logits = *logits;
                if want(logits) {
                    let k = *nodes[logits.0].shape.last().unwrap();
                    let scale = g[0] / T::of(rows.len() as f64);
                    let dl = slot(adj, nodes, logits);
                    for (idx, (&r, &t)) in rows.iter().zip(targets).enumerate() {
                        let prow = &probs[idx * k..(idx + 1) * k];
                        let drow = &mut dl[r * k..(r + 1) * k];
                        for (dv, &p) in drow.iter_mut().zip(prow) {
                            *dv += scale * p;
                        }
                        drow[t] -= scale;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (q, k, v, heads) = (*q, *k, *v, *heads);
                let sq = &nodes[q.0].shape;
                let (b, nq, d) = (sq[0], sq[1], sq[2]);
                let nk = nodes[k.0].shape[1];
                let dh = d / heads;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let (qv, kv, vv) = (
                    nodes[q.0].value.as_ref(),
                    nodes[k.0].value.as_ref(),
                    nodes[v.0].value.as_ref(),
                );
                let mut dq = vec![T::zero(); qv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut dv = vec![T::zero(); vv.len()];
                let mut dp = vec![T::zero(); nk];
                for bi in 0..b {
                    for h in 0..heads {
                        let c0 = h * dh;
                        for i in 0..nq {
                            let base = ((bi * heads + h) * nq + i) * nk;
                            let prow = &probs[base..base + nk];
                            let orow_g = &g[(bi * nq + i) * d + c0..(bi * nq + i) * d + c0 + dh];
                            let mut s = T::zero();
                            for j in 0..nk {
                                let p = prow[j];
                                if p == T::zero() {
                                    dp[j] = T::zero();
                                    continue;
                                }
                                let vrow = &vv[(bi * nk + j) * d + c0..(bi * nk + j) * d + c0 + dh];
                                dp[j] = kernels::dot(orow_g, vrow);
                                s += p * dp[j];
                                let dvrow = &mut dv[(bi * nk + j) * d + c0..(bi * nk + j) * d + c0 + dh];
                                for (x, &gv) in dvrow.iter_mut().zip(orow_g) {
                                    *x += p * gv;
                                }
                            }
                            let qrow = &qv[(bi * nq + i) * d + c0..(bi * nq + i) * d + c0 + dh];
                            for j in 0..nk {
                                let p = prow[j];
                                if p == T::zero() {
                                    continue;
                                }
                                let ds = p * (dp[j] - s) * scale;
                                let krow = &kv[(bi * nk + j) * d + c0..(bi * nk + j) * d + c0 + dh];
                                let dqrow = &mut dq[(bi * nq + i) * d + c0..(bi * nq + i) * d + c0 + dh];
                                for (x, &kvv) in dqrow.iter_mut().zip(krow) {
                                    *x += ds * kvv;
                                }
                                let dkrow = &mut dk[(bi * nk + j) * d + c0..(bi * nk + j) * d + c0 + dh];
                                for (x, &qvv) in dkrow.iter_mut().zip(qrow) {
                                    *x += ds * qvv;
                                }
                            }
                        }
                    }
                }
                if want(q) {
                    add_into(slot(adj, nodes, q), &dq);
                }
                if want(k) {
                    add_into(slot(adj, nodes, k), &dk);
                }
                if want(v) {
                    add_into(slot(adj, nodes, v), &dv);
                }
            }
            Op::ReplaceRows { x, fill, mask } => {
                let (x, fill) = (*x, *fill);
                let d = *node.shape.last().unwrap();
                if want(x) {
                    let dx = slot(adj, nodes, x);
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            add_into(&mut dx[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        }
                    }
                }
                if want(fill) {
                    let df = slot(adj, nodes, fill);
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            add_into(df, &g[r * d..(r + 1) * d]);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
