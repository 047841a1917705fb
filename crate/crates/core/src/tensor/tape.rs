//! Reverse-mode autodiff tape.
//!
//! Ops evaluate eagerly and append a record to the tape; `backward` walks
//! the records in reverse. Nodes whose inputs all have `requires_grad ==
//! false` skip the record entirely, so inference pays only for the values.
//!
//! Every op output is scanned for non-finite values; NaN/Inf is an error,
//! never a silent state.
//!
//! Broadcast rule for elementwise binary ops: the right operand's shape
//! must be a suffix of the left's (scalars broadcast everywhere). The
//! commutative ops accept either order.

use std::sync::Arc;

use super::kernels;
use super::param::{ParamId, ParamStore};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

struct Node<E: Scalar> {
    value: Tensor<E>,
    requires_grad: bool,
    op: Option<Op<E>>,
}

enum Op<E: Scalar> {
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: E },
    Matmul { a: NodeId, b: NodeId },
    BatchMatmul { a: NodeId, b: NodeId },
    Transpose { a: NodeId, ax0: usize, ax1: usize },
    Reshape { a: NodeId },
    Embed { table: NodeId, indices: Arc<Vec<usize>> },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<E>, inv_std: Vec<E> },
    Gelu { a: NodeId },
    Softmax { a: NodeId, axis: usize, delta: E },
    Mse { a: NodeId, b: NodeId },
    Sum { a: NodeId },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { a: NodeId, axis: usize, start: usize },
    RepeatRows { a: NodeId, n: usize },
    UpsampleNearest { a: NodeId, factor: usize },
    UpsampleBilinear { a: NodeId },
    QuantizeSt { z: NodeId },
    Patchify { a: NodeId, p: usize },
    Unpatchify { a: NodeId, p: usize, h: usize, w: usize, c: usize },
}

/// Single-owner gradient tape. Create one per forward pass; `backward`
/// consumes accumulated structure explicitly via [`GradTape::into_param_grads`]
/// or [`GradTape::backward_into`].
pub struct GradTape<E: Scalar> {
    nodes: Vec<Node<E>>,
    params: Vec<(NodeId, ParamId)>,
}

impl<E: Scalar> Default for GradTape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> GradTape<E> {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Insert a leaf. Finite data is part of the tape invariant, so leaves
    /// are checked on entry.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::numeric("non-finite values in leaf tensor"));
        }
        Ok(self.push(value, requires_grad, None))
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Result<NodeId> {
        self.leaf(value, false)
    }

    /// Bind a stored parameter as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, pid: ParamId) -> Result<NodeId> {
        let value: Tensor<E> = E::tensor_from_f32(store.value(pid));
        let id = self.leaf(value, true)?;
        self.params.push((id, pid));
        Ok(id)
    }

    /// Value copied out of the graph: same numbers, no gradient.
    pub fn stop_grad(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).clone();
        self.leaf(v, false)
    }

    fn push(&mut self, value: Tensor<E>, requires_grad: bool, op: Option<Op<E>>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, requires_grad, op });
        id
    }

    /// Append an op output; drops the record when no input needs grad.
    fn push_op(&mut self, name: &str, value: Tensor<E>, requires_grad: bool, op: Op<E>) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::numeric(format!("non-finite values in output of {name}")));
        }
        let op = if requires_grad { Some(op) } else { None };
        Ok(self.push(value, requires_grad, op))
    }

    // ---- elementwise binary ----------------------------------------------

    /// Check `small` is a suffix of `big`; returns chunk length (= small numel).
    fn suffix_len(big: &[usize], small: &[usize]) -> Option<usize> {
        if small.len() > big.len() {
            return None;
        }
        if big[big.len() - small.len()..] != *small {
            return None;
        }
        Some(small.iter().product())
    }

    fn binary_shapes(&self, name: &str, a: NodeId, b: NodeId, commutative: bool) -> Result<(NodeId, NodeId, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if Self::suffix_len(sa, sb).is_some() {
            return Ok((a, b, false));
        }
        if commutative && Self::suffix_len(sb, sa).is_some() {
            return Ok((b, a, true));
        }
        Err(Error::shape(format!(
            "{name}: shape {sb:?} does not broadcast onto {sa:?}"
        )))
    }

    fn ew_forward(&self, a: NodeId, b: NodeId, f: impl Fn(E, E) -> E) -> Tensor<E> {
        let av = self.value(a);
        let bv = self.value(b);
        let bn = bv.numel().max(1);
        let mut out = Vec::with_capacity(av.numel());
        let bd = bv.data();
        for (i, &x) in av.data().iter().enumerate() {
            out.push(f(x, bd[i % bn]));
        }
        Tensor::from_parts(av.shape().to_vec(), out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b, _) = self.binary_shapes("add", a, b, true)?;
        let v = self.ew_forward(a, b, |x, y| x + y);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_op("add", v, rg, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a2, b2, swapped) = self.binary_shapes("sub", a, b, false)?;
        debug_assert!(!swapped);
        let v = self.ew_forward(a2, b2, |x, y| x - y);
        let rg = self.requires_grad(a2) || self.requires_grad(b2);
        self.push_op("sub", v, rg, Op::Sub { a: a2, b: b2 })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b, _) = self.binary_shapes("mul", a, b, true)?;
        let v = self.ew_forward(a, b, |x, y| x * y);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_op("mul", v, rg, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a2, _, _) = self.binary_shapes("div", a, b, false)?;
        debug_assert_eq!(a2, a);
        if self.value(b).data().iter().any(|v| *v == E::zero()) {
            return Err(Error::domain("div: zero divisor"));
        }
        let v = self.ew_forward(a, b, |x, y| x / y);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_op("div", v, rg, Op::Div { a, b })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let c = E::from_f64(c);
        let av = self.value(a);
        let out: Vec<E> = av.data().iter().map(|&x| x * c).collect();
        let v = Tensor::from_parts(av.shape().to_vec(), out);
        let rg = self.requires_grad(a);
        self.push_op("scale", v, rg, Op::Scale { a, c })
    }

    // ---- matmul ------------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul: {sa:?} @ {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::zero(); m * n];
        kernels::matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let v = Tensor::from_parts(vec![m, n], out);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_op("matmul", v, rg, Op::Matmul { a, b })
    }

    /// Batched matmul over identical leading dimensions:
    /// `[batch.., m, k] @ [batch.., k, n] -> [batch.., m, n]`.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 3 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape(format!("batch_matmul: {sa:?} @ {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape(format!("batch_matmul: {sa:?} @ {sb:?}")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![E::zero(); batch * m * n];
        let ad = self.value(a).data().to_vec();
        let bd = self.value(b).data().to_vec();
        for i in 0..batch {
            kernels::matmul_into(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let v = Tensor::from_parts(shape, out);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_op("batch_matmul", v, rg, Op::BatchMatmul { a, b })
    }

    // ---- structure ----------------------------------------------------------

    pub fn transpose(&mut self, a: NodeId, ax0: usize, ax1: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if ax0 >= shape.len() || ax1 >= shape.len() {
            return Err(Error::shape(format!(
                "transpose axes ({ax0},{ax1}) out of range for {shape:?}"
            )));
        }
        let v = transpose_copy(self.value(a), ax0, ax1);
        let rg = self.requires_grad(a);
        self.push_op("transpose", v, rg, Op::Transpose { a, ax0, ax1 })
    }

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let v = self.value(a).reshaped(shape)?;
        let rg = self.requires_grad(a);
        self.push_op("reshape", v, rg, Op::Reshape { a })
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat: empty part list"));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::shape(format!("concat: incompatible {s:?} vs {first:?}")));
            }
            axis_total += s[axis];
        }
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let mut out = vec![E::zero(); outer * axis_total * inner];
        let mut offset = 0;
        for &p in parts {
            let s_axis = self.shape(p)[axis];
            let pd = self.value(p).data();
            for o in 0..outer {
                let src = &pd[o * s_axis * inner..(o + 1) * s_axis * inner];
                let dst_base = (o * axis_total + offset) * inner;
                out[dst_base..dst_base + s_axis * inner].copy_from_slice(src);
            }
            offset += s_axis;
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        let v = Tensor::from_parts(shape, out);
        self.push_op("concat", v, rg, Op::Concat { parts: parts.to_vec(), axis })
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "slice [{start}..{}] on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let ad = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&ad[base..base + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        let rg = self.requires_grad(a);
        let v = Tensor::from_parts(oshape, out);
        self.push_op("slice", v, rg, Op::Slice { a, axis, start })
    }

    /// Tile a row vector `(d,)` or `(1, d)` into `(n, d)`.
    pub fn repeat_rows(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let d = match shape.as_slice() {
            [d] => *d,
            [1, d] => *d,
            other => return Err(Error::shape(format!("repeat_rows on {other:?}"))),
        };
        let ad = self.value(a).data();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(ad);
        }
        let rg = self.requires_grad(a);
        let v = Tensor::from_parts(vec![n, d], out);
        self.push_op("repeat_rows", v, rg, Op::RepeatRows { a, n })
    }

    // ---- nonlinearities -------------------------------------------------------

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let out: Vec<E> = av.data().iter().map(|&x| kernels::gelu_scalar(x)).collect();
        let v = Tensor::from_parts(av.shape().to_vec(), out);
        let rg = self.requires_grad(a);
        self.push_op("gelu", v, rg, Op::Gelu { a })
    }

    /// Softmax along `axis` of logits scaled by `1/delta`; `delta > 0`.
    pub fn softmax(&mut self, a: NodeId, axis: usize, delta: f64) -> Result<NodeId> {
        if !(delta > 0.0) {
            return Err(Error::domain(format!("softmax temperature {delta} must be > 0")));
        }
        let delta = E::from_f64(delta);
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let ad = self.value(a).data();
        let mut out = vec![E::zero(); ad.len()];
        let mut src = vec![E::zero(); lane];
        let mut dst = vec![E::zero(); lane];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                for l in 0..lane {
                    src[l] = ad[base + l * inner];
                }
                kernels::softmax_lane(&src, &mut dst, delta);
                for l in 0..lane {
                    out[base + l * inner] = dst[l];
                }
            }
        }
        let rg = self.requires_grad(a);
        let v = Tensor::from_parts(shape, out);
        self.push_op("softmax", v, rg, Op::Softmax { a, axis, delta })
    }

    /// Layer norm over the last axis with learnable `gamma`, `beta`
    /// (both 1-D of the last-axis length). Epsilon fixed at 1e-5.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm on rank-0"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(format!(
                "layer_norm: gamma/beta must be ({d},), got {:?}/{:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let eps = E::from_f64(1e-5);
        let lanes = self.value(x).numel() / d;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut out = vec![E::zero(); xd.len()];
        let mut xhat = vec![E::zero(); xd.len()];
        let mut inv_std = vec![E::zero(); lanes];
        let dn = E::from_f64(d as f64);
        for l in 0..lanes {
            let row = &xd[l * d..(l + 1) * d];
            let mut mean = E::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / dn;
            let mut var = E::zero();
            for &v in row {
                let c = v - mean;
                var = var + c * c;
            }
            var = var / dn;
            // An overflowed variance would normalize to innocent zeros;
            // surface it instead of laundering the blowup.
            if !var.is_finite() {
                return Err(Error::numeric("layer_norm: non-finite variance"));
            }
            let istd = E::one() / (var + eps).sqrt();
            inv_std[l] = istd;
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                xhat[l * d + j] = xh;
                out[l * d + j] = gd[j] * xh + bd[j];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        let v = Tensor::from_parts(shape, out);
        self.push_op("layer_norm", v, rg, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    // ---- lookups & quantization -------------------------------------------------

    /// Row lookup: `table (k, d)`, `indices (len)` -> `(len, d)`.
    pub fn embed(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape(format!("embed table must be 2-D, got {ts:?}")));
        }
        let (k, d) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::domain(format!("embed index {bad} out of range 0..{k}")));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let rg = self.requires_grad(table);
        let v = Tensor::from_parts(vec![indices.len(), d], out);
        self.push_op("embed", v, rg, Op::Embed { table, indices: Arc::new(indices.to_vec()) })
    }

    /// Nearest-codebook-row quantization with straight-through gradient.
    ///
    /// `z (l, d)` is replaced row-wise by its nearest codebook row in
    /// squared L2; ties resolve to the lowest index. The backward pass
    /// copies the output gradient to `z` unchanged; the codebook receives
    /// no gradient through this op (codebook training goes through the
    /// embedding losses instead).
    pub fn quantize_st(&mut self, z: NodeId, codebook: &Tensor<E>) -> Result<(NodeId, Vec<usize>)> {
        let zs = self.shape(z).to_vec();
        let cs = codebook.shape();
        if zs.len() != 2 || cs.len() != 2 || zs[1] != cs[1] {
            return Err(Error::shape(format!("quantize_st: z {zs:?} vs codebook {cs:?}")));
        }
        if cs[0] == 0 {
            return Err(Error::contract("quantize_st: empty codebook"));
        }
        let (l, d) = (zs[0], zs[1]);
        let indices = nearest_rows(self.value(z), codebook)?;
        let cd = codebook.data();
        let mut out = Vec::with_capacity(l * d);
        for &best in &indices {
            out.extend_from_slice(&cd[best * d..(best + 1) * d]);
        }
        let rg = self.requires_grad(z);
        let v = Tensor::from_parts(vec![l, d], out);
        let id = self.push_op("quantize_st", v, rg, Op::QuantizeSt { z })?;
        Ok((id, indices))
    }

    // ---- reductions ---------------------------------------------------------------

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let mut acc = E::zero();
        for &v in self.value(a).data() {
            acc = acc + v;
        }
        let rg = self.requires_grad(a);
        self.push_op("sum", Tensor::scalar(acc), rg, Op::Sum { a })
    }

    /// Mean squared error between equal-shaped tensors; scalar output.
    /// Gradient convention: d/da mse = 2 (a - b) / numel.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "mse: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut acc = E::zero();
        for i in 0..ad.len() {
            let d = ad[i] - bd[i];
            acc = acc + d * d;
        }
        let v = Tensor::scalar(acc / E::from_f64(ad.len() as f64));
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_op("mse", v, rg, Op::Mse { a, b })
    }

    // ---- resampling ------------------------------------------------------------------

    /// Nearest-neighbor upsampling of an `(h, w, c)` tensor by an integer factor.
    pub fn upsample_nearest(&mut self, a: NodeId, factor: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::shape(format!("upsample_nearest expects (h,w,c), got {s:?}")));
        }
        if factor == 0 {
            return Err(Error::domain("upsample_nearest: factor must be >= 1"));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * factor, w * factor);
        let ad = self.value(a).data();
        let mut out = vec![E::zero(); oh * ow * c];
        for i in 0..oh {
            for j in 0..ow {
                let src = ((i / factor) * w + (j / factor)) * c;
                let dst = (i * ow + j) * c;
                out[dst..dst + c].copy_from_slice(&ad[src..src + c]);
            }
        }
        let rg = self.requires_grad(a);
        let v = Tensor::from_parts(vec![oh, ow, c], out);
        self.push_op("upsample_nearest", v, rg, Op::UpsampleNearest { a, factor })
    }

    /// Bilinear upsampling of an `(h, w, c)` tensor to `(oh, ow, c)`,
    /// half-pixel centers, borders clamped.
    pub fn upsample_bilinear(&mut self, a: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::shape(format!("upsample_bilinear expects (h,w,c), got {s:?}")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let ad = self.value(a).data();
        let mut out = vec![E::zero(); oh * ow * c];
        for i in 0..oh {
            let (r0, r1, fr) = kernels::bilinear_axis(i, h, oh);
            let (fr0, fr1) = (E::from_f64(1.0 - fr), E::from_f64(fr));
            for j in 0..ow {
                let (c0, c1, fc) = kernels::bilinear_axis(j, w, ow);
                let (fc0, fc1) = (E::from_f64(1.0 - fc), E::from_f64(fc));
                for ch in 0..c {
                    let v = fr0 * (fc0 * ad[(r0 * w + c0) * c + ch] + fc1 * ad[(r0 * w + c1) * c + ch])
                        + fr1 * (fc0 * ad[(r1 * w + c0) * c + ch] + fc1 * ad[(r1 * w + c1) * c + ch]);
                    out[(i * ow + j) * c + ch] = v;
                }
            }
        }
        let rg = self.requires_grad(a);
        let v = Tensor::from_parts(vec![oh, ow, c], out);
        self.push_op("upsample_bilinear", v, rg, Op::UpsampleBilinear { a })
    }

    // ---- patch layout -------------------------------------------------------------------

    /// `(h, w, c)` image -> `(h/p * w/p, p*p*c)` patch rows, row-major
    /// patch grid, row-major pixels within each patch.
    pub fn patchify(&mut self, a: NodeId, p: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[0] % p != 0 || s[1] % p != 0 {
            return Err(Error::shape(format!("patchify p={p} on {s:?}")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (gh, gw) = (h / p, w / p);
        let ad = self.value(a).data();
        let mut out = Vec::with_capacity(h * w * c);
        for gi in 0..gh {
            for gj in 0..gw {
                for pi in 0..p {
                    for pj in 0..p {
                        let src = ((gi * p + pi) * w + gj * p + pj) * c;
                        out.extend_from_slice(&ad[src..src + c]);
                    }
                }
            }
        }
        let rg = self.requires_grad(a);
        let v = Tensor::from_parts(vec![gh * gw, p * p * c], out);
        self.push_op("patchify", v, rg, Op::Patchify { a, p })
    }

    /// Inverse of [`GradTape::patchify`]: `(gh*gw, p*p*c)` -> `(h, w, c)`.
    pub fn unpatchify(&mut self, a: NodeId, p: usize, h: usize, w: usize, c: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        let (gh, gw) = (h / p, w / p);
        if s.len() != 2 || h % p != 0 || w % p != 0 || s[0] != gh * gw || s[1] != p * p * c {
            return Err(Error::shape(format!("unpatchify p={p} to ({h},{w},{c}) from {s:?}")));
        }
        let ad = self.value(a).data();
        let mut out = vec![E::zero(); h * w * c];
        for gi in 0..gh {
            for gj in 0..gw {
                let row = &ad[(gi * gw + gj) * p * p * c..(gi * gw + gj + 1) * p * p * c];
                for pi in 0..p {
                    for pj in 0..p {
                        let dst = ((gi * p + pi) * w + gj * p + pj) * c;
                        let src = (pi * p + pj) * c;
                        out[dst..dst + c].copy_from_slice(&row[src..src + c]);
                    }
                }
            }
        }
        let rg = self.requires_grad(a);
        let v = Tensor::from_parts(vec![h, w, c], out);
        self.push_op("unpatchify", v, rg, Op::Unpatchify { a, p, h, w, c })
    }

    // ---- backward --------------------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns per-node gradient slots.
    fn backward_pass(&self, loss: NodeId) -> Result<Vec<Option<Vec<E>>>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::contract(
                "backward: loss does not depend on any differentiable leaf",
            ));
        }
        let mut grads: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![E::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(op) = &node.op {
                self.backprop_op(op, &node.value, &g, &mut grads)?;
            }
            // Leaf gradients stay available to the caller.
            if node.op.is_none() && node.requires_grad {
                grads[idx] = Some(g);
            }
        }
        Ok(grads)
    }

    /// Backward, returning accumulated gradients for bound parameters in
    /// binding order. Consumes the tape.
    pub fn into_param_grads(self, loss: NodeId) -> Result<Vec<(ParamId, Tensor<E>)>> {
        let mut grads = self.backward_pass(loss)?;
        let mut out = Vec::with_capacity(self.params.len());
        for &(nid, pid) in &self.params {
            let g = grads[nid.0]
                .take()
                .map(|g| Tensor::from_parts(self.shape(nid).to_vec(), g))
                .unwrap_or_else(|| Tensor::zeros(self.shape(nid).to_vec()));
            out.push((pid, g));
        }
        Ok(out)
    }

    /// Backward accumulating (+=) into `store` parameter gradients,
    /// scaled by `scale`. Consumes the tape.
    pub fn backward_into(self, loss: NodeId, store: &mut ParamStore, scale: f32) -> Result<()> {
        let grads = self.into_param_grads(loss)?;
        for (pid, g) in grads {
            store.accumulate_scaled(pid, &g.cast::<f32>(), scale)?;
        }
        Ok(())
    }

    /// Backward for non-parameter workflows (gradient checking): gradient
    /// of `loss` with respect to leaf `x`.
    pub fn grad_of(&self, loss: NodeId, x: NodeId) -> Result<Tensor<E>> {
        let mut grads = self.backward_pass(loss)?;
        Ok(grads[x.0]
            .take()
            .map(|g| Tensor::from_parts(self.shape(x).to_vec(), g))
            .unwrap_or_else(|| Tensor::zeros(self.shape(x).to_vec())))
    }

    fn accumulate(dst: &mut Option<Vec<E>>, src: &[E], n: usize) {
        match dst {
            Some(buf) => {
                for (d, &s) in buf.iter_mut().zip(src.iter()) {
                    *d = *d + s;
                }
            }
            None => {
                debug_assert_eq!(src.len(), n);
                *dst = Some(src.to_vec());
            }
        }
    }

    /// Add `src` (full-shape gradient) into the smaller suffix-broadcast
    /// operand's slot by folding leading chunks.
    fn accumulate_reduced(dst: &mut Option<Vec<E>>, src: &[E], small_n: usize) {
        let buf = dst.get_or_insert_with(|| vec![E::zero(); small_n]);
        if small_n == 0 {
            return;
        }
        for (i, &s) in src.iter().enumerate() {
            buf[i % small_n] = buf[i % small_n] + s;
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_op(
        &self,
        op: &Op<E>,
        out_value: &Tensor<E>,
        g: &[E],
        grads: &mut [Option<Vec<E>>],
    ) -> Result<()> {
        match op {
            Op::Add { a, b } => {
                if self.requires_grad(*a) {
                    Self::accumulate(&mut grads[a.0], g, self.value(*a).numel());
                }
                if self.requires_grad(*b) {
                    if self.value(*b).numel() == g.len() {
                        Self::accumulate(&mut grads[b.0], g, g.len());
                    } else {
                        Self::accumulate_reduced(&mut grads[b.0], g, self.value(*b).numel());
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.requires_grad(*a) {
                    Self::accumulate(&mut grads[a.0], g, self.value(*a).numel());
                }
                if self.requires_grad(*b) {
                    let neg: Vec<E> = g.iter().map(|&v| -v).collect();
                    if self.value(*b).numel() == g.len() {
                        Self::accumulate(&mut grads[b.0], &neg, g.len());
                    } else {
                        Self::accumulate_reduced(&mut grads[b.0], &neg, self.value(*b).numel());
                    }
                }
            }
            Op::Mul { a, b } => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let bn = bd.len().max(1);
                if self.requires_grad(*a) {
                    let da: Vec<E> = g.iter().enumerate().map(|(i, &gv)| gv * bd[i % bn]).collect();
                    Self::accumulate(&mut grads[a.0], &da, ad.len());
                }
                if self.requires_grad(*b) {
                    let db: Vec<E> = g.iter().enumerate().map(|(i, &gv)| gv * ad[i]).collect();
                    if bd.len() == g.len() {
                        Self::accumulate(&mut grads[b.0], &db, bd.len());
                    } else {
                        Self::accumulate_reduced(&mut grads[b.0], &db, bd.len());
                    }
                }
            }
            Op::Div { a, b } => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let bn = bd.len().max(1);
                if self.requires_grad(*a) {
                    let da: Vec<E> = g.iter().enumerate().map(|(i, &gv)| gv / bd[i % bn]).collect();
                    Self::accumulate(&mut grads[a.0], &da, ad.len());
                }
                if self.requires_grad(*b) {
                    let db: Vec<E> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| {
                            let bv = bd[i % bn];
                            -gv * ad[i] / (bv * bv)
                        })
                        .collect();
                    if bd.len() == g.len() {
                        Self::accumulate(&mut grads[b.0], &db, bd.len());
                    } else {
                        Self::accumulate_reduced(&mut grads[b.0], &db, bd.len());
                    }
                }
            }
            Op::Scale { a, c } => {
                if self.requires_grad(*a) {
                    let da: Vec<E> = g.iter().map(|&v| v * *c).collect();
                    Self::accumulate(&mut grads[a.0], &da, da.len());
                }
            }
            Op::Matmul { a, b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    // dA = dC @ B^T
                    let mut da = vec![E::zero(); m * k];
                    kernels::matmul_bt_into(g, self.value(*b).data(), &mut da, m, n, k);
                    Self::accumulate(&mut grads[a.0], &da, da.len());
                }
                if self.requires_grad(*b) {
                    // dB = A^T @ dC
                    let mut db = vec![E::zero(); k * n];
                    kernels::matmul_at_into(self.value(*a).data(), g, &mut db, k, m, n);
                    Self::accumulate(&mut grads[b.0], &db, db.len());
                }
            }
            Op::BatchMatmul { a, b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                if self.requires_grad(*a) {
                    let mut da = vec![E::zero(); batch * m * k];
                    let bd = self.value(*b).data();
                    for i in 0..batch {
                        kernels::matmul_bt_into(
                            &g[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    Self::accumulate(&mut grads[a.0], &da, da.len());
                }
                if self.requires_grad(*b) {
                    let mut db = vec![E::zero(); batch * k * n];
                    let ad = self.value(*a).data();
                    for i in 0..batch {
                        kernels::matmul_at_into(
                            &ad[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    Self::accumulate(&mut grads[b.0], &db, db.len());
                }
            }
            Op::Transpose { a, ax0, ax1 } => {
                if self.requires_grad(*a) {
                    let gt = Tensor::from_parts(out_value.shape().to_vec(), g.to_vec());
                    let da = transpose_copy(&gt, *ax0, *ax1);
                    Self::accumulate(&mut grads[a.0], da.data(), da.numel());
                }
            }
            Op::Reshape { a } => {
                if self.requires_grad(*a) {
                    Self::accumulate(&mut grads[a.0], g, self.value(*a).numel());
                }
            }
            Op::Embed { table, indices } => {
                if self.requires_grad(*table) {
                    let ts = self.shape(*table);
                    let (k, d) = (ts[0], ts[1]);
                    let buf = grads[table.0].get_or_insert_with(|| vec![E::zero(); k * d]);
                    for (row, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            buf[i * d + j] = buf[i * d + j] + g[row * d + j];
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = *self.shape(*x).last().unwrap();
                let lanes = xhat.len() / d;
                let gd = self.value(*gamma).data();
                let dn = E::from_f64(d as f64);
                if self.requires_grad(*x) {
                    let mut dx = vec![E::zero(); xhat.len()];
                    for l in 0..lanes {
                        let base = l * d;
                        let mut sum_gy = E::zero();
                        let mut sum_gyx = E::zero();
                        for j in 0..d {
                            let gy = g[base + j] * gd[j];
                            sum_gy = sum_gy + gy;
                            sum_gyx = sum_gyx + gy * xhat[base + j];
                        }
                        let mean_gy = sum_gy / dn;
                        let mean_gyx = sum_gyx / dn;
                        for j in 0..d {
                            let gy = g[base + j] * gd[j];
                            dx[base + j] = (gy - mean_gy - xhat[base + j] * mean_gyx) * inv_std[l];
                        }
                    }
                    Self::accumulate(&mut grads[x.0], &dx, dx.len());
                }
                if self.requires_grad(*gamma) {
                    let mut dg = vec![E::zero(); d];
                    for l in 0..lanes {
                        for j in 0..d {
                            dg[j] = dg[j] + g[l * d + j] * xhat[l * d + j];
                        }
                    }
                    Self::accumulate(&mut grads[gamma.0], &dg, d);
                }
                if self.requires_grad(*beta) {
                    let mut db = vec![E::zero(); d];
                    for l in 0..lanes {
                        for j in 0..d {
                            db[j] = db[j] + g[l * d + j];
                        }
                    }
                    Self::accumulate(&mut grads[beta.0], &db, d);
                }
            }
            Op::Gelu { a } => {
                if self.requires_grad(*a) {
                    let ad = self.value(*a).data();
                    let da: Vec<E> = g
                        .iter()
                        .zip(ad.iter())
                        .map(|(&gv, &x)| gv * kernels::gelu_grad_scalar(x))
                        .collect();
                    Self::accumulate(&mut grads[a.0], &da, da.len());
                }
            }
            Op::Softmax { a, axis, delta } => {
                if self.requires_grad(*a) {
                    let shape = out_value.shape();
                    let lane = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let y = out_value.data();
                    let mut da = vec![E::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * lane * inner + i;
                            let mut dot = E::zero();
                            for l in 0..lane {
                                let p = base + l * inner;
                                dot = dot + g[p] * y[p];
                            }
                            for l in 0..lane {
                                let p = base + l * inner;
                                da[p] = (g[p] - dot) * y[p] / *delta;
                            }
                        }
                    }
                    Self::accumulate(&mut grads[a.0], &da, da.len());
                }
            }
            Op::Mse { a, b } => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let n = E::from_f64(ad.len() as f64);
                let two = E::from_f64(2.0);
                let gs = g[0];
                if self.requires_grad(*a) {
                    let da: Vec<E> = ad
                        .iter()
                        .zip(bd.iter())
                        .map(|(&x, &y)| gs * two * (x - y) / n)
                        .collect();
                    Self::accumulate(&mut grads[a.0], &da, da.len());
                }
                if self.requires_grad(*b) {
                    let db: Vec<E> = ad
                        .iter()
                        .zip(bd.iter())
                        .map(|(&x, &y)| -(gs * two * (x - y) / n))
                        .collect();
                    Self::accumulate(&mut grads[b.0], &db, db.len());
                }
            }
            Op::Sum { a } => {
                if self.requires_grad(*a) {
                    let da = vec![g[0]; self.value(*a).numel()];
                    Self::accumulate(&mut grads[a.0], &da, da.len());
                }
            }
            Op::Concat { parts, axis } => {
                let shape = out_value.shape();
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let p_axis = self.shape(p)[*axis];
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(p_axis * inner * outer);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&g[base..base + p_axis * inner]);
                        }
                        Self::accumulate(&mut grads[p.0], &dp, dp.len());
                    }
                    offset += p_axis;
                }
            }
            Op::Slice { a, axis, start } => {
                if self.requires_grad(*a) {
                    let ashape = self.shape(*a);
                    let oshape = out_value.shape();
                    let inner: usize = ashape[*axis + 1..].iter().product();
                    let outer: usize = ashape[..*axis].iter().product();
                    let len = oshape[*axis];
                    let buf = grads[a.0]
                        .get_or_insert_with(|| vec![E::zero(); self.value(*a).numel()]);
                    for o in 0..outer {
                        let dst = (o * ashape[*axis] + start) * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            buf[dst + i] = buf[dst + i] + g[src + i];
                        }
                    }
                }
            }
            Op::RepeatRows { a, n } => {
                if self.requires_grad(*a) {
                    let d = self.value(*a).numel();
                    let mut da = vec![E::zero(); d];
                    for r in 0..*n {
                        for j in 0..d {
                            da[j] = da[j] + g[r * d + j];
                        }
                    }
                    Self::accumulate(&mut grads[a.0], &da, d);
                }
            }
            Op::UpsampleNearest { a, factor } => {
                if self.requires_grad(*a) {
                    let s = self.shape(*a);
                    let (h, w, c) = (s[0], s[1], s[2]);
                    let ow = w * factor;
                    let mut da = vec![E::zero(); h * w * c];
                    for i in 0..h * factor {
                        for j in 0..ow {
                            let src = (i * ow + j) * c;
                            let dst = ((i / factor) * w + (j / factor)) * c;
                            for ch in 0..c {
                                da[dst + ch] = da[dst + ch] + g[src + ch];
                            }
                        }
                    }
                    Self::accumulate(&mut grads[a.0], &da, da.len());
                }
            }
            Op::UpsampleBilinear { a } => {
                if self.requires_grad(*a) {
                    let s = self.shape(*a);
                    let (h, w, c) = (s[0], s[1], s[2]);
                    let os = out_value.shape();
                    let (oh, ow) = (os[0], os[1]);
                    let mut da = vec![E::zero(); h * w * c];
                    for i in 0..oh {
                        let (r0, r1, fr) = kernels::bilinear_axis(i, h, oh);
                        let (fr0, fr1) = (E::from_f64(1.0 - fr), E::from_f64(fr));
                        for j in 0..ow {
                            let (c0, c1, fc) = kernels::bilinear_axis(j, w, ow);
                            let (fc0, fc1) = (E::from_f64(1.0 - fc), E::from_f64(fc));
                            for ch in 0..c {
                                let gv = g[(i * ow + j) * c + ch];
                                da[(r0 * w + c0) * c + ch] = da[(r0 * w + c0) * c + ch] + gv * fr0 * fc0;
                                da[(r0 * w + c1) * c + ch] = da[(r0 * w + c1) * c + ch] + gv * fr0 * fc1;
                                da[(r1 * w + c0) * c + ch] = da[(r1 * w + c0) * c + ch] + gv * fr1 * fc0;
                                da[(r1 * w + c1) * c + ch] = da[(r1 * w + c1) * c + ch] + gv * fr1 * fc1;
                            }
                        }
                    }
                    Self::accumulate(&mut grads[a.0], &da, da.len());
                }
            }
            Op::QuantizeSt { z } => {
                if self.requires_grad(*z) {
                    // Straight-through: gradient passes unchanged.
                    Self::accumulate(&mut grads[z.0], g, self.value(*z).numel());
                }
            }
            Op::Patchify { a, p } => {
                if self.requires_grad(*a) {
                    let s = self.shape(*a);
                    let (h, w, c) = (s[0], s[1], s[2]);
                    let (gw, pp) = (w / p, *p);
                    let mut da = vec![E::zero(); h * w * c];
                    let mut src = 0;
                    for gi in 0..h / pp {
                        for gj in 0..gw {
                            for pi in 0..pp {
                                for pj in 0..pp {
                                    let dst = ((gi * pp + pi) * w + gj * pp + pj) * c;
                                    for ch in 0..c {
                                        da[dst + ch] = da[dst + ch] + g[src];
                                        src += 1;
                                    }
                                }
                            }
                        }
                    }
                    Self::accumulate(&mut grads[a.0], &da, da.len());
                }
            }
            Op::Unpatchify { a, p, h, w, c } => {
                if self.requires_grad(*a) {
                    let (gw, pp) = (w / p, *p);
                    let mut da = vec![E::zero(); h * w * c];
                    let mut dst = 0;
                    for gi in 0..h / pp {
                        for gj in 0..gw {
                            for pi in 0..pp {
                                for pj in 0..pp {
                                    let src = ((gi * pp + pi) * w + gj * pp + pj) * c;
                                    for ch in 0..*c {
                                        da[dst] = da[dst] + g[src + ch];
                                        dst += 1;
                                    }
                                }
                            }
                        }
                    }
                    Self::accumulate(&mut grads[a.0], &da, da.len());
                }
            }
        }
        Ok(())
    }
}

/// Index of the nearest codebook row (squared L2) for each row of `z`.
/// Exact ties keep the lowest index, making the map a total deterministic
/// function. Single source of truth for `quantize_st` and the tokenizer's
/// tape-free quantization path.
pub fn nearest_rows<E: Scalar>(z: &Tensor<E>, codebook: &Tensor<E>) -> Result<Vec<usize>> {
    let zs = z.shape();
    let cs = codebook.shape();
    if zs.len() != 2 || cs.len() != 2 || zs[1] != cs[1] {
        return Err(Error::shape(format!("nearest_rows: z {zs:?} vs codebook {cs:?}")));
    }
    if cs[0] == 0 {
        return Err(Error::contract("nearest_rows: empty codebook"));
    }
    let (l, d) = (zs[0], zs[1]);
    let zd = z.data();
    let cd = codebook.data();
    let mut indices = Vec::with_capacity(l);
    for row in 0..l {
        let zr = &zd[row * d..(row + 1) * d];
        let mut best = 0usize;
        let mut best_d = E::infinity();
        for (ci, cr) in cd.chunks_exact(d).enumerate() {
            let mut dist = E::zero();
            for j in 0..d {
                let df = zr[j] - cr[j];
                dist = dist + df * df;
            }
            // Strict `<` keeps the lowest index on exact ties.
            if dist < best_d {
                best_d = dist;
                best = ci;
            }
        }
        indices.push(best);
    }
    Ok(indices)
}

fn transpose_copy<E: Scalar>(t: &Tensor<E>, ax0: usize, ax1: usize) -> Tensor<E> {
    let shape = t.shape().to_vec();
    let mut oshape = shape.clone();
    oshape.swap(ax0, ax1);
    if ax0 == ax1 {
        return t.clone();
    }
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        out_strides[i] = out_strides[i + 1] * oshape[i + 1];
    }
    let data = t.data();
    let mut out = vec![E::zero(); data.len()];
    let mut idx = vec![0usize; rank];
    for (pos, &v) in data.iter().enumerate() {
        // Decode the input multi-index, swap, re-encode.
        let mut rem = pos;
        for i in 0..rank {
            idx[i] = rem / in_strides[i];
            rem %= in_strides[i];
        }
        idx.swap(ax0, ax1);
        let mut opos = 0;
        for i in 0..rank {
            opos += idx[i] * out_strides[i];
        }
        out[opos] = v;
    }
    Tensor::from_parts(oshape, out)
}
