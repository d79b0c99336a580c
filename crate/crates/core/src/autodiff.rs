//! Reverse-mode automatic differentiation over a fixed vocabulary of dense
//! tensor operations.
//!
//! A [`Graph`] is built eagerly: every builder method evaluates its output
//! immediately and records the operation so that [`Graph::backward`] can
//! propagate gradients from any scalar node back to the requested leaves.
//! Forward values are `f32`; the backward pass accumulates in `f64` and
//! casts the final leaf gradients to `f32`.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower/upper clamp applied to probabilities inside the BCE reduction.
pub const BCE_CLAMP: f32 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Param,
    Input,
    Constant,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf(LeafKind),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    AddRow(NodeId, NodeId),
    SoftmaxRows(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Mean(NodeId, usize),
    Concat(Vec<NodeId>, usize),
    SliceCols(NodeId, usize),
    Frobenius(NodeId),
    L2Norm(NodeId),
    Bce(NodeId, NodeId),
    Sum(NodeId),
    Pick(NodeId, usize),
    HeadAttention(NodeId, NodeId, usize, f32),
    HeadMix(NodeId, NodeId),
    MeanHeads(NodeId),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf(_) => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::Bce(a, b)
            | Op::HeadAttention(a, b, ..)
            | Op::HeadMix(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::SoftmaxRows(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Mean(a, _)
            | Op::SliceCols(a, _)
            | Op::Frobenius(a)
            | Op::L2Norm(a)
            | Op::Sum(a)
            | Op::Pick(a, _)
            | Op::MeanHeads(a) => vec![*a],
            Op::Concat(xs, _) => xs.clone(),
        }
    }
}

/// Gradients of a scalar node with respect to a set of leaves.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.grads.get(&leaf)
    }

    pub fn take(&mut self, leaf: NodeId) -> Option<Tensor> {
        self.grads.remove(&leaf)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor)> {
        self.grads.iter()
    }
}

/// Tape of evaluated operations, topologically ordered by construction.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Tensor>,
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn leaf_kind(&self, id: NodeId) -> Option<LeafKind> {
        match self.ops.get(id.0) {
            Some(Op::Leaf(k)) => Some(*k),
            _ => None,
        }
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.ops.push(op);
        self.values.push(value);
        Ok(NodeId(self.ops.len() - 1))
    }

    fn leaf(&mut self, kind: LeafKind, t: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf(kind), t, "leaf")
    }

    pub fn param(&mut self, t: Tensor) -> Result<NodeId> {
        self.leaf(LeafKind::Param, t)
    }

    pub fn input(&mut self, t: Tensor) -> Result<NodeId> {
        self.leaf(LeafKind::Input, t)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<NodeId> {
        self.leaf(LeafKind::Constant, t)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let (m, k) = dims2(ta, "matmul")?;
        let (k2, n) = dims2(tb, "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (ad, bd) = (ta.data(), tb.data());
        let bw: Vec<f64> = bd.iter().map(|&v| f64::from(v)).collect();
        let mut out = vec![0f32; m * n];
        // blocks of four rows share each pass over a row of `b`
        let mut acc = vec![0f64; 4 * n];
        for (ablk, oblk) in ad.chunks(4 * k).zip(out.chunks_mut(4 * n)) {
            let rows = ablk.len() / k;
            acc.iter_mut().for_each(|v| *v = 0.0);
            if rows == 4 {
                let (a0, rest) = acc.split_at_mut(n);
                let (a1, rest) = rest.split_at_mut(n);
                let (a2, a3) = rest.split_at_mut(n);
                for (p, brow) in bw.chunks_exact(n).enumerate() {
                    let x = [ablk[p], ablk[k + p], ablk[2 * k + p], ablk[3 * k + p]].map(f64::from);
                    for j in 0..n {
                        let bv = brow[j];
                        a0[j] += x[0] * bv;
                        a1[j] += x[1] * bv;
                        a2[j] += x[2] * bv;
                        a3[j] += x[3] * bv;
                    }
                }
            } else {
                for (r, arow) in ablk.chunks_exact(k).enumerate() {
                    let ar = &mut acc[r * n..(r + 1) * n];
                    for (&av, brow) in arow.iter().zip(bw.chunks_exact(n)) {
                        let av = f64::from(av);
                        for (s, &bv) in ar.iter_mut().zip(brow) {
                            *s += av * bv;
                        }
                    }
                }
            }
            for (o, &s) in oblk.iter_mut().zip(&acc) {
                *o = s as f32;
            }
        }
        self.push(Op::MatMul(a, b), Tensor::new(&[m, n], out)?, "matmul")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.values[a.0];
        let (r, c) = dims2(ta, "transpose")?;
        let d = ta.data();
        let mut out = vec![0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push(Op::Transpose(a), Tensor::new(&[c, r], out)?, "transpose")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.values[a.0].add(&self.values[b.0])?;
        self.push(Op::Add(a, b), v, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.values[a.0].sub(&self.values[b.0])?;
        self.push(Op::Sub(a, b), v, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.values[a.0].zip_map(&self.values[b.0], "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), v, "mul")
    }

    pub fn scale(&mut self, a: NodeId, s: f32) -> Result<NodeId> {
        let v = self.values[a.0].scale(s);
        self.push(Op::Scale(a, s), v, "scale")
    }

    /// Adds a `1 x c` row vector to every row of an `r x c` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.values[a.0], &self.values[row.0]);
        let (r, c) = dims2(ta, "add_row")?;
        let (br, bc) = dims2(tb, "add_row")?;
        if br != 1 || bc != c {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = ta.data().to_vec();
        for i in 0..r {
            for (o, &b) in out[i * c..(i + 1) * c].iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let shape = ta.shape().to_vec();
        self.push(Op::AddRow(a, row), Tensor::new(&shape, out)?, "add_row")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.values[a.0];
        let (r, c) = dims2(ta, "softmax_rows")?;
        let mut out = ta.data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0f64;
            for v in row.iter_mut() {
                let e = f64::from(*v - max).exp();
                *v = e as f32;
                sum += e;
            }
            for v in row.iter_mut() {
                *v = (f64::from(*v) / sum) as f32;
            }
        }
        let shape = ta.shape().to_vec();
        self.push(Op::SoftmaxRows(a), Tensor::new(&shape, out)?, "softmax_rows")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.values[a.0].map(|x| (1.0 / (1.0 + f64::from(-x).exp())) as f32);
        self.push(Op::Sigmoid(a), v, "sigmoid")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.values[a.0].map(|x| x.max(0.0));
        self.push(Op::Relu(a), v, "relu")
    }

    /// Mean over `axis` of a matrix: axis 0 gives `1 x c`, axis 1 gives `r x 1`.
    pub fn mean(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let ta = &self.values[a.0];
        let (r, c) = dims2(ta, "mean")?;
        let d = ta.data();
        let v = match axis {
            0 => {
                let mut acc = vec![0f64; c];
                for i in 0..r {
                    for (s, &x) in acc.iter_mut().zip(&d[i * c..(i + 1) * c]) {
                        *s += f64::from(x);
                    }
                }
                let out = acc.into_iter().map(|s| (s / r as f64) as f32).collect();
                Tensor::new(&[1, c], out)?
            }
            1 => {
                let out = (0..r)
                    .map(|i| {
                        let s: f64 = d[i * c..(i + 1) * c].iter().map(|&x| f64::from(x)).sum();
                        (s / c as f64) as f32
                    })
                    .collect();
                Tensor::new(&[r, 1], out)?
            }
            _ => return Err(Error::shape("mean", format!("axis {axis} out of range"))),
        };
        self.push(Op::Mean(a, axis), v, "mean")
    }

    /// Concatenates matrices along rows (axis 0) or columns (axis 1).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let dims = parts
            .iter()
            .map(|p| dims2(&self.values[p.0], "concat"))
            .collect::<Result<Vec<_>>>()?;
        let v = match axis {
            0 => {
                let c = dims[0].1;
                if dims.iter().any(|d| d.1 != c) {
                    return Err(Error::shape("concat", format!("column extents {dims:?}")));
                }
                let r: usize = dims.iter().map(|d| d.0).sum();
                let data = parts
                    .iter()
                    .flat_map(|p| self.values[p.0].data().iter().copied())
                    .collect();
                Tensor::new(&[r, c], data)?
            }
            1 => {
                let r = dims[0].0;
                if dims.iter().any(|d| d.0 != r) {
                    return Err(Error::shape("concat", format!("row extents {dims:?}")));
                }
                let c: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    for p in parts {
                        data.extend_from_slice(self.values[p.0].row(i));
                    }
                }
                Tensor::new(&[r, c], data)?
            }
            _ => return Err(Error::shape("concat", format!("axis {axis} out of range"))),
        };
        self.push(Op::Concat(parts.to_vec(), axis), v, "concat")
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ta = &self.values[a.0];
        let (r, c) = dims2(ta, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} of {:?}", start + len, ta.shape()),
            ));
        }
        let d = ta.data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + start + len]);
        }
        self.push(Op::SliceCols(a, start), Tensor::new(&[r, len], out)?, "slice_cols")
    }

    /// Row-softmax attention of every head: `q` and `k` are `T x d` with
    /// head `h` owning columns `h*d/heads..(h+1)*d/heads`. Returns the
    /// `heads x T x T` stack of `softmax(scale * q_h k_hᵀ)`.
    pub fn head_attention(&mut self, q: NodeId, k: NodeId, heads: usize, scale: f32) -> Result<NodeId> {
        let (tq, tk) = (&self.values[q.0], &self.values[k.0]);
        let (t, d) = dims2(tq, "head_attention")?;
        if tk.shape() != tq.shape() || heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "head_attention",
                format!("{:?} and {:?} with {heads} heads", tq.shape(), tk.shape()),
            ));
        }
        let dh = d / heads;
        let (qd, kd) = (tq.data(), tk.data());
        let sc = f64::from(scale);
        let mut out = vec![0f32; heads * t * t];
        let qf: Vec<f64> = qd.iter().map(|&v| f64::from(v)).collect();
        let kf: Vec<f64> = kd.iter().map(|&v| f64::from(v)).collect();
        let mut prod = vec![0f64; d];
        let mut scores = vec![0f64; heads * t];
        for i in 0..t {
            let qi = &qf[i * d..(i + 1) * d];
            for j in 0..t {
                for ((pr, &a), &b) in prod.iter_mut().zip(qi).zip(&kf[j * d..(j + 1) * d]) {
                    *pr = a * b;
                }
                for (h, block) in prod.chunks_exact(dh).enumerate() {
                    scores[h * t + j] = block.iter().fold(0.0, |s, &x| s + x) * sc;
                }
            }
            for (h, srow) in scores.chunks_exact(t).enumerate() {
                let o = &mut out[(h * t + i) * t..(h * t + i + 1) * t];
                let max = srow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0f64;
                for (v, &x) in o.iter_mut().zip(srow) {
                    *v = ((x - max) as f32).exp();
                    sum += f64::from(*v);
                }
                let inv = 1.0 / sum;
                for v in o.iter_mut() {
                    *v = (f64::from(*v) * inv) as f32;
                }
            }
        }
        self.push(
            Op::HeadAttention(q, k, heads, scale),
            Tensor::new(&[heads, t, t], out)?,
            "head_attention",
        )
    }

    /// Applies a `heads x T x T` attention stack to `v` (`T x d`): head `h`
    /// mixes its own column block of `v`, blocks are concatenated.
    pub fn head_mix(&mut self, attn: NodeId, v: NodeId) -> Result<NodeId> {
        let (ta, tv) = (&self.values[attn.0], &self.values[v.0]);
        let (t, d) = dims2(tv, "head_mix")?;
        let &[heads, t1, t2] = ta.shape() else {
            return Err(Error::shape("head_mix", format!("attention shape {:?}", ta.shape())));
        };
        if t1 != t || t2 != t || d % heads != 0 {
            return Err(Error::shape(
                "head_mix",
                format!("{:?} applied to {:?}", ta.shape(), tv.shape()),
            ));
        }
        let dh = d / heads;
        let (ad, vd) = (ta.data(), tv.data());
        let mut out = vec![0f32; t * d];
        let vf: Vec<f64> = vd.iter().map(|&x| f64::from(x)).collect();
        let mut acc = vec![0f64; d];
        let mut w = vec![0f64; d];
        for (i, orow) in out.chunks_exact_mut(d).enumerate() {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (j, vrow) in vf.chunks_exact(d).enumerate() {
                for (h, wb) in w.chunks_exact_mut(dh).enumerate() {
                    wb.fill(f64::from(ad[(h * t + i) * t + j]));
                }
                for ((s, &a), &x) in acc.iter_mut().zip(&w).zip(vrow) {
                    *s += a * x;
                }
            }
            for (o, &s) in orow.iter_mut().zip(&acc) {
                *o = s as f32;
            }
        }
        self.push(Op::HeadMix(attn, v), Tensor::new(&[t, d], out)?, "head_mix")
    }

    /// Elementwise mean over the leading axis of an `H x R x C` stack.
    pub fn mean_heads(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.values[a.0];
        let &[h, r, c] = ta.shape() else {
            return Err(Error::shape("mean_heads", format!("expected rank 3, got {:?}", ta.shape())));
        };
        let mut acc = vec![0f64; r * c];
        for chunk in ta.data().chunks(r * c) {
            for (s, &x) in acc.iter_mut().zip(chunk) {
                *s += f64::from(x);
            }
        }
        let out = acc.into_iter().map(|s| (s / h as f64) as f32).collect();
        self.push(Op::MeanHeads(a), Tensor::new(&[r, c], out)?, "mean_heads")
    }

    /// Frobenius norm of a matrix, as a scalar node.
    pub fn frobenius(&mut self, a: NodeId) -> Result<NodeId> {
        dims2(&self.values[a.0], "frobenius")?;
        let n = self.values[a.0].l2_norm();
        self.push(Op::Frobenius(a), Tensor::scalar(n as f32), "frobenius")
    }

    /// L2 norm over every entry of a tensor of any rank.
    pub fn l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.values[a.0].l2_norm();
        self.push(Op::L2Norm(a), Tensor::scalar(n as f32), "l2_norm")
    }

    /// Mean binary cross-entropy between probabilities and 0/1 targets, with
    /// probabilities clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn bce(&mut self, probs: NodeId, targets: NodeId) -> Result<NodeId> {
        let (tp, ty) = (&self.values[probs.0], &self.values[targets.0]);
        if tp.len() != ty.len() {
            return Err(Error::shape(
                "bce",
                format!("probs {:?} vs targets {:?}", tp.shape(), ty.shape()),
            ));
        }
        let loss = bce_value(tp.data(), ty.data());
        self.push(Op::Bce(probs, targets), Tensor::scalar(loss as f32), "bce")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.values[a.0].data().iter().map(|&x| f64::from(x)).sum();
        self.push(Op::Sum(a), Tensor::scalar(s as f32), "sum")
    }

    /// Selects one flat element as a scalar node.
    pub fn pick(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let ta = &self.values[a.0];
        let v = *ta.data().get(index).ok_or_else(|| {
            Error::shape("pick", format!("index {index} out of {:?}", ta.shape()))
        })?;
        self.push(Op::Pick(a, index), Tensor::scalar(v), "pick")
    }

    /// Reverse-mode gradients of the scalar node `output` with respect to the
    /// leaves in `wrt`. Leaves that do not influence `output` are absent from
    /// the result.
    pub fn backward(&self, output: NodeId, wrt: &[NodeId]) -> Result<GradientMap> {
        let out_len = self
            .values
            .get(output.0)
            .ok_or_else(|| Error::Contract(format!("unknown output node {}", output.0)))?
            .len();
        if out_len != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, node {} has shape {:?}",
                output.0,
                self.values[output.0].shape()
            )));
        }
        for w in wrt {
            if self.leaf_kind(*w).is_none() {
                return Err(Error::Contract(format!("node {} is not a leaf", w.0)));
            }
        }
        if wrt.is_empty() {
            return Ok(GradientMap::default());
        }

        // Only nodes on a path from a requested leaf need gradients.
        let mut needs = vec![false; output.0 + 1];
        for w in wrt {
            if w.0 <= output.0 {
                needs[w.0] = true;
            }
        }
        for i in 0..=output.0 {
            if !needs[i] && self.ops[i].inputs().iter().any(|p| needs[p.0]) {
                needs[i] = true;
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        if needs[output.0] {
            grads[output.0] = Some(vec![1.0]);
        }
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf(_) = self.ops[i] {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &needs, &mut grads);
        }

        let mut map = GradientMap::default();
        for w in wrt {
            if let Some(Some(g)) = grads.get(w.0) {
                let shape = self.values[w.0].shape().to_vec();
                let t = Tensor::new(&shape, g.iter().map(|&v| v as f32).collect())?;
                if !t.is_finite() {
                    return Err(Error::NonFinite { op: "backward" });
                }
                map.grads.insert(*w, t);
            }
        }
        Ok(map)
    }

    fn backprop_node(&self, i: usize, g: &[f64], needs: &[bool], grads: &mut [Option<Vec<f64>>]) {
        fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
            grads[id.0].get_or_insert_with(|| vec![0.0; len])
        }
        let val = |id: NodeId| self.values[id.0].data();
        let out = self.values[i].data();
        match &self.ops[i] {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.values[a.0].rows_cols();
                let n = self.values[b.0].rows_cols().1;
                let (ad, bd) = (val(*a), val(*b));
                if needs[a.0] {
                    let ga = acc(grads, *a, m * k);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            ga[r * k + p] += dot_f64_f32(grow, &bd[p * n..(p + 1) * n]);
                        }
                    }
                }
                if needs[b.0] {
                    let gb = acc(grads, *b, k * n);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = f64::from(ad[r * k + p]);
                            for (o, &x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * x;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if needs[a.0] {
                    let (r, c) = self.values[a.0].rows_cols();
                    let ga = acc(grads, *a, r * c);
                    for x in 0..r {
                        for y in 0..c {
                            ga[x * c + y] += g[y * r + x];
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.ops[i], Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs[a.0] {
                    for (o, &x) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                        *o += x;
                    }
                }
                if needs[b.0] {
                    for (o, &x) in acc(grads, *b, g.len()).iter_mut().zip(g) {
                        *o += sign * x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs[a.0] {
                    let bd = val(*b);
                    for ((o, &x), &y) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(bd) {
                        *o += x * f64::from(y);
                    }
                }
                if needs[b.0] {
                    let ad = val(*a);
                    for ((o, &x), &y) in acc(grads, *b, g.len()).iter_mut().zip(g).zip(ad) {
                        *o += x * f64::from(y);
                    }
                }
            }
            Op::Scale(a, s) => {
                if needs[a.0] {
                    let s = f64::from(*s);
                    for (o, &x) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                        *o += s * x;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if needs[a.0] {
                    for (o, &x) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                        *o += x;
                    }
                }
                if needs[row.0] {
                    let c = self.values[row.0].len();
                    let gr = acc(grads, *row, c);
                    for chunk in g.chunks(c) {
                        for (o, &x) in gr.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if needs[a.0] {
                    let (_, c) = self.values[a.0].rows_cols();
                    let ga = acc(grads, *a, g.len());
                    for ((gar, gr), yr) in ga.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(&x, &y)| x * f64::from(y)).sum();
                        for ((o, &x), &y) in gar.iter_mut().zip(gr).zip(yr) {
                            *o += f64::from(y) * (x - dot);
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if needs[a.0] {
                    for ((o, &x), &y) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(out) {
                        let y = f64::from(y);
                        *o += x * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(a) => {
                if needs[a.0] {
                    let ad = val(*a);
                    for ((o, &x), &v) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(ad) {
                        if v > 0.0 {
                            *o += x;
                        }
                    }
                }
            }
            Op::Mean(a, axis) => {
                if needs[a.0] {
                    let (r, c) = self.values[a.0].rows_cols();
                    let ga = acc(grads, *a, r * c);
                    for x in 0..r {
                        for y in 0..c {
                            ga[x * c + y] += if *axis == 0 {
                                g[y] / r as f64
                            } else {
                                g[x] / c as f64
                            };
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let (_, total_c) = self.values[i].rows_cols();
                let mut row_off = 0;
                let mut col_off = 0;
                for p in parts {
                    let (r, c) = self.values[p.0].rows_cols();
                    if needs[p.0] {
                        let gp = acc(grads, *p, r * c);
                        for x in 0..r {
                            for y in 0..c {
                                let src = if *axis == 0 {
                                    (row_off + x) * total_c + y
                                } else {
                                    x * total_c + col_off + y
                                };
                                gp[x * c + y] += g[src];
                            }
                        }
                    }
                    row_off += r;
                    col_off += c;
                }
            }
            Op::SliceCols(a, start) => {
                if needs[a.0] {
                    let (r, c) = self.values[a.0].rows_cols();
                    let len = self.values[i].rows_cols().1;
                    let ga = acc(grads, *a, r * c);
                    for x in 0..r {
                        for y in 0..len {
                            ga[x * c + start + y] += g[x * len + y];
                        }
                    }
                }
            }
            Op::Frobenius(a) | Op::L2Norm(a) => {
                if needs[a.0] {
                    let ad = val(*a);
                    let norm = self.values[a.0].l2_norm();
                    if norm > 0.0 {
                        let s = g[0] / norm;
                        for (o, &x) in acc(grads, *a, ad.len()).iter_mut().zip(ad) {
                            *o += s * f64::from(x);
                        }
                    } else {
                        acc(grads, *a, ad.len());
                    }
                }
            }
            Op::Bce(p, y) => {
                let (pd, yd) = (val(*p), val(*y));
                let k = pd.len() as f64;
                if needs[p.0] {
                    let gp = acc(grads, *p, pd.len());
                    for ((o, &pv), &yv) in gp.iter_mut().zip(pd).zip(yd) {
                        if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&pv) {
                            continue;
                        }
                        let (pv, yv) = (f64::from(pv), f64::from(yv));
                        *o += g[0] * (-yv / pv + (1.0 - yv) / (1.0 - pv)) / k;
                    }
                }
                if needs[y.0] {
                    let gy = acc(grads, *y, yd.len());
                    for (o, &pv) in gy.iter_mut().zip(pd) {
                        let pv = f64::from(pv.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP));
                        *o += g[0] * (-(pv.ln()) + (1.0 - pv).ln()) / k;
                    }
                }
            }
            Op::Sum(a) => {
                if needs[a.0] {
                    let n = self.values[a.0].len();
                    for o in acc(grads, *a, n).iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::HeadAttention(q, k, heads, scale) => {
                let (t, d) = self.values[q.0].rows_cols();
                let dh = d / heads;
                let (qd, kd) = (val(*q), val(*k));
                let scale = f64::from(*scale);
                // gradient w.r.t. the pre-softmax scores, already scaled
                let mut ds = vec![0f64; g.len()];
                for ((dr, gr), yr) in ds.chunks_mut(t).zip(g.chunks(t)).zip(out.chunks(t)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(&x, &y)| x * f64::from(y)).sum();
                    for ((o, &x), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = scale * f64::from(y) * (x - dot);
                    }
                }
                let pack = |src: &[f32], h: usize| -> Vec<f64> {
                    (0..t)
                        .flat_map(|r| src[r * d + h * dh..r * d + (h + 1) * dh].iter().map(|&x| f64::from(x)))
                        .collect()
                };
                let mut gq = vec![0f64; t * dh];
                let mut gk = vec![0f64; t * dh];
                for h in 0..*heads {
                    let (qh, kh) = (pack(qd, h), pack(kd, h));
                    gq.iter_mut().for_each(|v| *v = 0.0);
                    gk.iter_mut().for_each(|v| *v = 0.0);
                    for i in 0..t {
                        let dsr = &ds[(h * t + i) * t..(h * t + i + 1) * t];
                        let (gqi, qi) = (&mut gq[i * dh..(i + 1) * dh], &qh[i * dh..(i + 1) * dh]);
                        for ((&s, kj), gkj) in dsr.iter().zip(kh.chunks_exact(dh)).zip(gk.chunks_exact_mut(dh)) {
                            for p in 0..dh {
                                gqi[p] += s * kj[p];
                                gkj[p] += s * qi[p];
                            }
                        }
                    }
                    for (node, src) in [(*q, &gq), (*k, &gk)] {
                        if needs[node.0] {
                            let gd = acc(grads, node, t * d);
                            for (r, row) in src.chunks_exact(dh).enumerate() {
                                for (o, &x) in gd[r * d + h * dh..r * d + (h + 1) * dh].iter_mut().zip(row) {
                                    *o += x;
                                }
                            }
                        }
                    }
                }
            }
            Op::HeadMix(attn, v) => {
                let (t, d) = self.values[v.0].rows_cols();
                let heads = self.values[attn.0].shape()[0];
                let dh = d / heads;
                let (ad, vd) = (val(*attn), val(*v));
                let mut gv = vec![0f64; t * dh];
                for h in 0..heads {
                    let vh: Vec<f64> = (0..t)
                        .flat_map(|r| vd[r * d + h * dh..r * d + (h + 1) * dh].iter().map(|&x| f64::from(x)))
                        .collect();
                    let gh: Vec<f64> = (0..t).flat_map(|r| g[r * d + h * dh..r * d + (h + 1) * dh].iter().copied()).collect();
                    if needs[attn.0] {
                        let ga = acc(grads, *attn, heads * t * t);
                        for (i, gi) in gh.chunks_exact(dh).enumerate() {
                            let row = &mut ga[(h * t + i) * t..(h * t + i + 1) * t];
                            for (o, vj) in row.iter_mut().zip(vh.chunks_exact(dh)) {
                                let mut s = 0f64;
                                for p in 0..dh {
                                    s += gi[p] * vj[p];
                                }
                                *o += s;
                            }
                        }
                    }
                    if needs[v.0] {
                        gv.iter_mut().for_each(|x| *x = 0.0);
                        for (i, gi) in gh.chunks_exact(dh).enumerate() {
                            let arow = &ad[(h * t + i) * t..(h * t + i + 1) * t];
                            for (&a, gvj) in arow.iter().zip(gv.chunks_exact_mut(dh)) {
                                let a = f64::from(a);
                                for p in 0..dh {
                                    gvj[p] += a * gi[p];
                                }
                            }
                        }
                        let out_v = acc(grads, *v, t * d);
                        for (r, row) in gv.chunks_exact(dh).enumerate() {
                            for (o, &x) in out_v[r * d + h * dh..r * d + (h + 1) * dh].iter_mut().zip(row) {
                                *o += x;
                            }
                        }
                    }
                }
            }
            Op::MeanHeads(a) => {
                if needs[a.0] {
                    let n = self.values[a.0].len();
                    let h = self.values[a.0].shape()[0] as f64;
                    let ga = acc(grads, *a, n);
                    for chunk in ga.chunks_mut(g.len()) {
                        for (o, &x) in chunk.iter_mut().zip(g) {
                            *o += x / h;
                        }
                    }
                }
            }
            Op::Pick(a, index) => {
                if needs[a.0] {
                    let n = self.values[a.0].len();
                    acc(grads, *a, n)[*index] += g[0];
                }
            }
        }
    }
}

/// Dot product with eight independent partial sums, combined pairwise.
fn dot_f64_f32(a: &[f64], b: &[f32]) -> f64 {
    let mut lanes = [0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in ca.by_ref().zip(cb.by_ref()) {
        for i in 0..8 {
            lanes[i] += x[i] * f64::from(y[i]);
        }
    }
    let mut tail = 0f64;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * f64::from(*y);
    }
    let l = lanes;
    ((l[0] + l[4]) + (l[1] + l[5])) + ((l[2] + l[6]) + (l[3] + l[7])) + tail
}

/// Mean clamped binary cross-entropy, evaluated in `f64`.
pub fn bce_value(probs: &[f32], targets: &[f32]) -> f64 {
    let k = probs.len() as f64;
    probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let p = f64::from(p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP));
            let y = f64::from(y);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / k
}

/// Builds a graph with `leaves` registered as parameter leaves, runs
/// `build` on it and returns the graph together with its output value.
pub fn build_and_eval<F>(leaves: &[Tensor], build: F) -> Result<(Graph, NodeId, Vec<NodeId>)>
where
    F: FnOnce(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids = leaves
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &ids)?;
    Ok((g, out, ids))
}

impl Graph {
    /// Re-evaluates node `n` from the current values of its inputs.
    fn recompute(&mut self, n: usize) -> Result<()> {
        let op = self.ops[n].clone();
        match op {
            Op::Leaf(_) => return Ok(()),
            Op::MatMul(a, b) => self.matmul(a, b)?,
            Op::Transpose(a) => self.transpose(a)?,
            Op::Add(a, b) => self.add(a, b)?,
            Op::Sub(a, b) => self.sub(a, b)?,
            Op::Mul(a, b) => self.mul(a, b)?,
            Op::Scale(a, s) => self.scale(a, s)?,
            Op::AddRow(a, b) => self.add_row(a, b)?,
            Op::SoftmaxRows(a) => self.softmax_rows(a)?,
            Op::Sigmoid(a) => self.sigmoid(a)?,
            Op::Relu(a) => self.relu(a)?,
            Op::Mean(a, axis) => self.mean(a, axis)?,
            Op::Concat(xs, axis) => self.concat(&xs, axis)?,
            Op::SliceCols(a, start) => {
                let len = self.values[n].rows_cols().1;
                self.slice_cols(a, start, len)?
            }
            Op::Frobenius(a) => self.frobenius(a)?,
            Op::L2Norm(a) => self.l2_norm(a)?,
            Op::Bce(a, b) => self.bce(a, b)?,
            Op::Sum(a) => self.sum(a)?,
            Op::Pick(a, i) => self.pick(a, i)?,
            Op::HeadAttention(q, k, h, sc) => self.head_attention(q, k, h, sc)?,
            Op::HeadMix(a, v) => self.head_mix(a, v)?,
            Op::MeanHeads(a) => self.mean_heads(a)?,
        };
        self.ops.pop();
        self.values[n] = self.values.pop().expect("recompute pushed a node");
        Ok(())
    }

    /// Nodes whose value depends on `leaf`, in evaluation order.
    fn downstream(&self, leaf: NodeId) -> Vec<usize> {
        let mut dirty = vec![false; self.ops.len()];
        dirty[leaf.0] = true;
        for n in leaf.0 + 1..self.ops.len() {
            dirty[n] = self.ops[n].inputs().iter().any(|i| dirty[i.0]);
        }
        (leaf.0 + 1..self.ops.len()).filter(|&n| dirty[n]).collect()
    }
}

/// Maximum over every leaf coordinate of
/// `|analytic - central difference| / max(1, |central difference|)`.
///
/// Perturbed losses are obtained by replaying only the nodes downstream of
/// the perturbed leaf, with the same op code as a fresh build, so `build`
/// must not branch on leaf values.
pub fn grad_check<F>(build: F, leaves: &[Tensor], step: f32) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if step <= 0.0 {
        return Err(Error::Contract(format!("grad_check step must be positive, got {step}")));
    }
    if leaves.is_empty() {
        return Ok(0.0);
    }
    let (base, out, ids) = build_and_eval(leaves, &build)?;
    let analytic = base.backward(out, &ids)?;

    const CHUNK: usize = 256;
    let tasks: Vec<(usize, usize)> = leaves
        .iter()
        .enumerate()
        .flat_map(|(li, t)| (0..t.len()).step_by(CHUNK).map(move |j| (li, j)))
        .collect();
    let errors = tasks
        .par_iter()
        .map(|&(li, first)| -> Result<f64> {
            let id = ids[li];
            let mut g = base.clone();
            let replay = g.downstream(id);
            let eval = |g: &mut Graph, j: usize, x: f32| -> Result<f64> {
                g.values[id.0].data_mut()[j] = x;
                for &n in &replay {
                    g.recompute(n)?;
                }
                Ok(f64::from(g.value(out).data()[0]))
            };
            let mut worst = 0f64;
            for j in first..(first + CHUNK).min(leaves[li].len()) {
                let x0 = leaves[li].data()[j];
                let plus = x0 + step;
                let minus = x0 - step;
                let fp = eval(&mut g, j, plus)?;
                let fm = eval(&mut g, j, minus)?;
                g.values[id.0].data_mut()[j] = x0;
                let fd = (fp - fm) / (f64::from(plus) - f64::from(minus));
                let an = analytic.get(id).map_or(0.0, |t| f64::from(t.data()[j]));
                worst = worst.max((an - fd).abs() / fd.abs().max(1.0));
            }
            Ok(worst)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(errors.into_iter().fold(0.0, f64::max))
}
