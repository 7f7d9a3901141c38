//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. Node ids are handed out in creation order, so the node
//! list is already topologically sorted and [`Tape::backward`] is a single
//! reverse sweep that visits each node once.
//!
//! Sequence tensors use the `[batch, channels, length]` layout throughout.

use rayon::prelude::*;

use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// Returns one optional gradient per input, in the order the inputs were
/// passed to [`Tape::custom`].
pub trait Backward: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Conv1d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
    },
    Depthwise {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
    },
    Relu(NodeId),
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Concat(Vec<NodeId>),
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Exp(NodeId),
    Log(NodeId),
    Embedding {
        table: NodeId,
        ids: Vec<u32>,
    },
    ScaleChannels {
        x: NodeId,
        scale: NodeId,
    },
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Custom {
        inputs: Vec<NodeId>,
        rule: Box<dyn Backward>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Start offset of the centered "same" window: `⌊(k−1)/2⌋`.
pub fn same_offset(k: usize) -> isize {
    ((k - 1) / 2) as isize
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Valid output range `[t0, t1)` for tap offset `shift` on a length-`len` signal.
fn tap_range(shift: isize, len: usize) -> (usize, usize) {
    let t0 = (-shift).max(0) as usize;
    let t1 = (len as isize - shift).clamp(0, len as isize) as usize;
    (t0.min(t1), t1)
}

fn sum_in_order(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for p in parts {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Parameter or constant input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_with(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_with(self.value(b), "multiply", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0) {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let out = matmul_raw(va.data(), vb.data(), va.dim(0), va.dim(1), vb.dim(1));
        let v = Tensor::new(&[va.dim(0), vb.dim(1)], out)?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// Cross-correlation with centered zero padding:
    /// `out[b,o,t] = bias[o] + Σ_c Σ_j w[o,c,j]·x[b,c,t+j−⌊(k−1)/2⌋]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.rank() != 3 || vw.rank() != 3 || vx.dim(1) != vw.dim(1) {
            return Err(Error::shape("conv1d", vx.shape(), vw.shape()));
        }
        let (batch, cin, len) = (vx.dim(0), vx.dim(1), vx.dim(2));
        let (cout, k) = (vw.dim(0), vw.dim(2));
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape("conv1d bias", self.value(b).shape(), &[cout]));
            }
        }
        let bias_v = bias.map(|b| self.value(b).data().to_vec());
        let xd = vx.data();
        let wd = vw.data();
        let off = same_offset(k);
        let mut out = vec![0.0; batch * cout * len];
        out.par_chunks_mut(cout * len).enumerate().for_each(|(b, ob)| {
            let xb = &xd[b * cin * len..(b + 1) * cin * len];
            for o in 0..cout {
                let row = &mut ob[o * len..(o + 1) * len];
                if let Some(bv) = &bias_v {
                    row.iter_mut().for_each(|r| *r = bv[o]);
                }
                for c in 0..cin {
                    let xr = &xb[c * len..(c + 1) * len];
                    for j in 0..k {
                        let wv = wd[(o * cin + c) * k + j];
                        let shift = j as isize - off;
                        let (t0, t1) = tap_range(shift, len);
                        if t0 < t1 {
                            let s0 = (t0 as isize + shift) as usize;
                            axpy(wv, &xr[s0..s0 + (t1 - t0)], &mut row[t0..t1]);
                        }
                    }
                }
            }
        });
        let v = Tensor::new(&[batch, cout, len], out)?;
        Ok(self.push(v, Op::Conv1d { x, w, bias }))
    }

    /// Per-channel cross-correlation, weight `[channels, k]`, same alignment as [`Tape::conv1d`].
    pub fn depthwise_conv1d(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.rank() != 3 || vw.rank() != 2 || vx.dim(1) != vw.dim(0) {
            return Err(Error::shape("depthwise_conv1d", vx.shape(), vw.shape()));
        }
        let (batch, ch, len) = (vx.dim(0), vx.dim(1), vx.dim(2));
        let k = vw.dim(1);
        if let Some(b) = bias {
            if self.value(b).shape() != [ch] {
                return Err(Error::shape("depthwise bias", self.value(b).shape(), &[ch]));
            }
        }
        let bias_v = bias.map(|b| self.value(b).data().to_vec());
        let off = same_offset(k);
        let (xd, wd) = (vx.data(), vw.data());
        let mut out = vec![0.0; batch * ch * len];
        out.par_chunks_mut(len).enumerate().for_each(|(row_idx, row)| {
            let c = row_idx % ch;
            let xr = &xd[row_idx * len..(row_idx + 1) * len];
            if let Some(bv) = &bias_v {
                row.iter_mut().for_each(|r| *r = bv[c]);
            }
            for j in 0..k {
                let shift = j as isize - off;
                let (t0, t1) = tap_range(shift, len);
                if t0 < t1 {
                    let s0 = (t0 as isize + shift) as usize;
                    axpy(wd[c * k + j], &xr[s0..s0 + (t1 - t0)], &mut row[t0..t1]);
                }
            }
        });
        let v = Tensor::new(&[batch, ch, len], out)?;
        Ok(self.push(v, Op::Depthwise { x, w, bias }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x))
    }

    /// Max over the time axis of `[batch, channels, length]`; ties go to the lowest index.
    pub fn global_max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.rank() != 3 || vx.dim(2) == 0 {
            return Err(Error::shape("global_max_pool", vx.shape(), &[0, 0, 1]));
        }
        let len = vx.dim(2);
        let mut out = Vec::with_capacity(vx.dim(0) * vx.dim(1));
        let mut argmax = Vec::with_capacity(out.capacity());
        for row in vx.data().chunks(len) {
            let mut best = 0;
            for (t, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = t;
                }
            }
            out.push(row[best]);
            argmax.push(best);
        }
        let v = Tensor::new(&[vx.dim(0), vx.dim(1)], out)?;
        Ok(self.push(v, Op::MaxPool { x, argmax }))
    }

    pub fn max_pool_argmax(&self, id: NodeId) -> Option<&[usize]> {
        match &self.nodes[id.0].op {
            Op::MaxPool { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    /// Concatenate along axis 1; every other axis must agree.
    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = self.value(*inputs.first().ok_or_else(|| Error::InvalidConfig("concat of nothing".into()))?);
        if first.rank() < 2 {
            return Err(Error::shape("concat", first.shape(), &[0, 0]));
        }
        let outer = first.dim(0);
        let inner: usize = first.shape()[2..].iter().product();
        let mut channels = 0;
        for &id in inputs {
            let v = self.value(id);
            if v.rank() != first.rank() || v.dim(0) != outer || v.shape()[2..] != first.shape()[2..] {
                return Err(Error::shape("concat", first.shape(), v.shape()));
            }
            channels += v.dim(1);
        }
        let mut out = Vec::with_capacity(outer * channels * inner);
        for b in 0..outer {
            for &id in inputs {
                let v = self.value(id);
                let block = v.dim(1) * inner;
                out.extend_from_slice(&v.data()[b * block..(b + 1) * block]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[1] = channels;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Concat(inputs.to_vec())))
    }

    /// Inverted dropout. Identity when `train` is false or `p == 0`.
    pub fn dropout(&mut self, x: NodeId, p: f64, train: bool, rng: &mut Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let vx = self.value(x);
        let mask: Vec<f64> = (0..vx.len()).map(|_| if rng.bernoulli(p) { 0.0 } else { keep }).collect();
        let out = vx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let v = Tensor::new(vx.shape(), out)?;
        Ok(self.push(v, Op::Dropout { x, mask }))
    }

    /// Fully connected layer: `x [batch, in]`, `w [out, in]`, `b [out]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.rank() != 2 || vw.rank() != 2 || vx.dim(1) != vw.dim(1) {
            return Err(Error::shape("affine", vx.shape(), vw.shape()));
        }
        if vb.shape() != [vw.dim(0)] {
            return Err(Error::shape("affine bias", vb.shape(), &[vw.dim(0)]));
        }
        let (batch, din, dout) = (vx.dim(0), vx.dim(1), vw.dim(0));
        let mut out = vec![0.0; batch * dout];
        for r in 0..batch {
            let xr = &vx.data()[r * din..(r + 1) * din];
            for o in 0..dout {
                out[r * dout + o] = vb.data()[o] + dot(xr, &vw.data()[o * din..(o + 1) * din]);
            }
        }
        let v = Tensor::new(&[batch, dout], out)?;
        Ok(self.push(v, Op::Affine { x, w, b }))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(f64::exp);
        v.ensure_finite("exp")?;
        Ok(self.push(v, Op::Exp(x)))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(f64::ln);
        v.ensure_finite("log")?;
        Ok(self.push(v, Op::Log(x)))
    }

    /// Table lookup: `table [vocab, dim]`, ids `[batch, len]` → `[batch, dim, len]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[u32], batch: usize, len: usize) -> Result<NodeId> {
        let vt = self.value(table);
        if vt.rank() != 2 || ids.len() != batch * len {
            return Err(Error::shape("embedding", vt.shape(), &[batch, len]));
        }
        let (vocab, dim) = (vt.dim(0), vt.dim(1));
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(Error::InvalidConfig(format!("token id {bad} >= vocab size {vocab}")));
        }
        let mut out = vec![0.0; batch * dim * len];
        for b in 0..batch {
            for t in 0..len {
                let row = &vt.data()[ids[b * len + t] as usize * dim..][..dim];
                for (e, &v) in row.iter().enumerate() {
                    out[(b * dim + e) * len + t] = v;
                }
            }
        }
        let v = Tensor::new(&[batch, dim, len], out)?;
        Ok(self.push(v, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// `x [batch, channels, length]` times a per-channel gain `[channels]`.
    pub fn scale_channels(&mut self, x: NodeId, scale: NodeId) -> Result<NodeId> {
        let (vx, vs) = (self.value(x), self.value(scale));
        if vx.rank() != 3 || vs.shape() != [vx.dim(1)] {
            return Err(Error::shape("scale_channels", vx.shape(), vs.shape()));
        }
        let (ch, len) = (vx.dim(1), vx.dim(2));
        let out = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * vs.data()[(i / len) % ch])
            .collect();
        let v = Tensor::new(vx.shape(), out)?;
        Ok(self.push(v, Op::ScaleChannels { x, scale }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let v = Tensor::scalar(vx.sum() / vx.len().max(1) as f64);
        self.push(v, Op::Mean(x))
    }

    /// Record an externally defined operation whose output has already been computed.
    pub fn custom(&mut self, inputs: &[NodeId], output: Tensor, rule: Box<dyn Backward>) -> NodeId {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    /// Gradients of the scalar `loss` with respect to every node recorded before it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::BackwardBeforeForward(format!(
                "node {} not on a tape of {} nodes",
                loss.0,
                self.nodes.len()
            )));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward (loss must be scalar)", lv.shape(), &[]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.node_backward(idx, &g)?;
            grads[idx] = Some(g);
            for (id, delta) in contributions {
                match &mut grads[id.0] {
                    Some(acc) => acc.add_assign(&delta)?,
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, idx: usize, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let node = &self.nodes[idx];
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                vec![
                    (*a, g.zip_with(vb, "multiply", |x, y| x * y)?),
                    (*b, g.zip_with(va, "multiply", |x, y| x * y)?),
                ]
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
                let bt = transpose(vb.data(), k, n);
                let at = transpose(va.data(), m, k);
                let ga = matmul_raw(g.data(), &bt, m, n, k);
                let gb = matmul_raw(&at, g.data(), k, m, n);
                vec![
                    (*a, Tensor::new(&[m, k], ga)?),
                    (*b, Tensor::new(&[k, n], gb)?),
                ]
            }
            Op::Conv1d { x, w, bias } => self.conv1d_backward(*x, *w, *bias, g)?,
            Op::Depthwise { x, w, bias } => self.depthwise_backward(*x, *w, *bias, g)?,
            Op::Relu(x) => {
                let vx = self.value(*x);
                vec![(*x, g.zip_with(vx, "relu", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?)]
            }
            Op::MaxPool { x, argmax } => {
                let vx = self.value(*x);
                let len = vx.dim(2);
                let mut gx = Tensor::zeros(vx.shape());
                for (row, &t) in argmax.iter().enumerate() {
                    gx.data_mut()[row * len + t] = g.data()[row];
                }
                vec![(*x, gx)]
            }
            Op::Concat(inputs) => {
                let outer = g.dim(0);
                let inner: usize = g.shape()[2..].iter().product();
                let total = g.dim(1) * inner;
                let mut start = 0;
                let mut res = Vec::with_capacity(inputs.len());
                for &id in inputs {
                    let v = self.value(id);
                    let block = v.dim(1) * inner;
                    let mut part = Vec::with_capacity(v.len());
                    for b in 0..outer {
                        part.extend_from_slice(&g.data()[b * total + start..b * total + start + block]);
                    }
                    start += block;
                    res.push((id, Tensor::new(v.shape(), part)?));
                }
                res
            }
            Op::Dropout { x, mask } => {
                let gx = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                vec![(*x, Tensor::new(g.shape(), gx)?)]
            }
            Op::Affine { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (batch, din, dout) = (vx.dim(0), vx.dim(1), vw.dim(0));
                let gx = matmul_raw(g.data(), vw.data(), batch, dout, din);
                let gt = transpose(g.data(), batch, dout);
                let gw = matmul_raw(&gt, vx.data(), dout, batch, din);
                let mut gb = vec![0.0; dout];
                for r in 0..batch {
                    for o in 0..dout {
                        gb[o] += g.data()[r * dout + o];
                    }
                }
                vec![
                    (*x, Tensor::new(&[batch, din], gx)?),
                    (*w, Tensor::new(&[dout, din], gw)?),
                    (*b, Tensor::vector(gb)),
                ]
            }
            Op::Exp(x) => vec![(*x, g.zip_with(&node.value, "exp", |a, e| a * e)?)],
            Op::Log(x) => vec![(*x, g.zip_with(self.value(*x), "log", |a, v| a / v)?)],
            Op::Embedding { table, ids } => {
                let vt = self.value(*table);
                let (dim, len) = (g.dim(1), g.dim(2));
                let mut gt = Tensor::zeros(vt.shape());
                let gtd = gt.data_mut();
                for b in 0..g.dim(0) {
                    for t in 0..len {
                        let row = ids[b * len + t] as usize * dim;
                        for e in 0..dim {
                            gtd[row + e] += g.data()[(b * dim + e) * len + t];
                        }
                    }
                }
                vec![(*table, gt)]
            }
            Op::ScaleChannels { x, scale } => {
                let (vx, vs) = (self.value(*x), self.value(*scale));
                let (ch, len) = (vx.dim(1), vx.dim(2));
                let mut gx = vec![0.0; vx.len()];
                let mut gs = vec![0.0; ch];
                for (i, (&gv, &xv)) in g.data().iter().zip(vx.data()).enumerate() {
                    let c = (i / len) % ch;
                    gx[i] = gv * vs.data()[c];
                    gs[c] += gv * xv;
                }
                vec![(*x, Tensor::new(vx.shape(), gx)?), (*scale, Tensor::vector(gs))]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(self.value(*x).shape())?)],
            Op::Sum(x) => vec![(*x, Tensor::full(self.value(*x).shape(), g.item()))],
            Op::Mean(x) => {
                let vx = self.value(*x);
                vec![(*x, Tensor::full(vx.shape(), g.item() / vx.len().max(1) as f64))]
            }
            Op::Custom { inputs, rule } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                let gs = rule.backward(g, &values, &node.value)?;
                if gs.len() != inputs.len() {
                    return Err(Error::shape(rule.name(), &[gs.len()], &[inputs.len()]));
                }
                inputs
                    .iter()
                    .zip(gs)
                    .filter_map(|(&id, gi)| gi.map(|t| (id, t)))
                    .collect()
            }
        };
        Ok(out)
    }

    fn conv1d_backward(&self, x: NodeId, w: NodeId, bias: Option<NodeId>, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (batch, cin, len) = (vx.dim(0), vx.dim(1), vx.dim(2));
        let (cout, k) = (vw.dim(0), vw.dim(2));
        let off = same_offset(k);
        let (xd, wd, gd) = (vx.data(), vw.data(), g.data());

        let per_example: Vec<(Vec<f64>, Vec<f64>)> = (0..batch)
            .into_par_iter()
            .map(|b| {
                let xb = &xd[b * cin * len..(b + 1) * cin * len];
                let gb = &gd[b * cout * len..(b + 1) * cout * len];
                let mut gx = vec![0.0; cin * len];
                let mut gw = vec![0.0; cout * cin * k];
                for o in 0..cout {
                    let grow = &gb[o * len..(o + 1) * len];
                    for c in 0..cin {
                        let xr = &xb[c * len..(c + 1) * len];
                        let gxr = &mut gx[c * len..(c + 1) * len];
                        for j in 0..k {
                            let shift = j as isize - off;
                            let (t0, t1) = tap_range(shift, len);
                            if t0 >= t1 {
                                continue;
                            }
                            let s0 = (t0 as isize + shift) as usize;
                            let n = t1 - t0;
                            let widx = (o * cin + c) * k + j;
                            gw[widx] = dot(&grow[t0..t1], &xr[s0..s0 + n]);
                            axpy(wd[widx], &grow[t0..t1], &mut gxr[s0..s0 + n]);
                        }
                    }
                }
                (gx, gw)
            })
            .collect();

        let mut gx_all = Vec::with_capacity(batch * cin * len);
        let mut gw_parts = Vec::with_capacity(batch);
        for (gx, gw) in per_example {
            gx_all.extend(gx);
            gw_parts.push(gw);
        }
        let mut res = vec![
            (x, Tensor::new(vx.shape(), gx_all)?),
            (w, Tensor::new(vw.shape(), sum_in_order(gw_parts, cout * cin * k))?),
        ];
        if let Some(bid) = bias {
            let mut gbias = vec![0.0; cout];
            for b in 0..batch {
                for o in 0..cout {
                    gbias[o] += gd[(b * cout + o) * len..][..len].iter().sum::<f64>();
                }
            }
            res.push((bid, Tensor::vector(gbias)));
        }
        Ok(res)
    }

    fn depthwise_backward(&self, x: NodeId, w: NodeId, bias: Option<NodeId>, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (batch, ch, len) = (vx.dim(0), vx.dim(1), vx.dim(2));
        let k = vw.dim(1);
        let off = same_offset(k);
        let (xd, wd, gd) = (vx.data(), vw.data(), g.data());
        let mut gx = vec![0.0; vx.len()];
        let mut gw = vec![0.0; ch * k];
        let mut gbias = vec![0.0; ch];
        for b in 0..batch {
            for c in 0..ch {
                let base = (b * ch + c) * len;
                let xr = &xd[base..base + len];
                let grow = &gd[base..base + len];
                gbias[c] += grow.iter().sum::<f64>();
                for j in 0..k {
                    let shift = j as isize - off;
                    let (t0, t1) = tap_range(shift, len);
                    if t0 >= t1 {
                        continue;
                    }
                    let s0 = (t0 as isize + shift) as usize;
                    let n = t1 - t0;
                    gw[c * k + j] += dot(&grow[t0..t1], &xr[s0..s0 + n]);
                    axpy(wd[c * k + j], &grow[t0..t1], &mut gx[base + s0..base + s0 + n]);
                }
            }
        }
        let mut res = vec![
            (x, Tensor::new(vx.shape(), gx)?),
            (w, Tensor::new(vw.shape(), gw)?),
        ];
        if let Some(bid) = bias {
            res.push((bid, Tensor::vector(gbias)));
        }
        Ok(res)
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], row);
        }
    }
    out
}
