//! Tape-based reverse-mode differentiation over a fixed op set.
//!
//! A [`Tape`] records one forward pass as a linear sequence of nodes; since
//! every op constructor only consumes already-recorded [`VarId`]s, the tape is
//! topologically ordered by construction and `backward` replays it in reverse
//! exactly once. Gradients accumulate (`+=`) into [`Parameter::grad`] so
//! several losses can backpropagate before one optimizer step.

pub mod gradcheck;
mod kernels;

use crate::tensor::{Precision, Tensor};
use std::collections::BTreeMap;
use thiserror::Error;

pub use gradcheck::{gradient_check, GradCheckReport};

/// Label value excluded from every loss.
pub const IGNORE_LABEL: i64 = 255;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called before any forward node was recorded")]
    EmptyTape,
    #[error("loss has no valid (non-ignored) pixels")]
    NoValidPixels,
}

pub type AdResult<T> = Result<T, AdError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A trainable value with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub requires_grad: bool,
}

/// Named parameter registry. Insertion order is the canonical order for
/// checkpoints and optimizer sweeps, so identical construction code yields
/// identical layouts.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub(crate) params: Vec<Parameter>,
    names: Vec<String>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.add_with(name, value, true)
    }

    pub fn add_with(&mut self, name: &str, value: Tensor, requires_grad: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        let grad = Tensor::zeros(&value.shape);
        self.params.push(Parameter { value, grad, requires_grad });
        self.names.push(name.to_string());
        self.by_name.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
struct ConvDims {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul { a: VarId, b: VarId, m: usize, k: usize, n: usize },
    Add { a: VarId, b: VarId },
    /// (rows, n) + bias (n,), broadcast over rows.
    AddRows { a: VarId, bias: VarId },
    Scale { a: VarId, factor: f64 },
    Sum { a: VarId },
    Relu { a: VarId },
    Sin { a: VarId },
    Cos { a: VarId },
    ConcatLastDim { parts: Vec<VarId>, widths: Vec<usize>, rows: usize },
    GatherRows { a: VarId, indices: Vec<usize>, row_len: usize },
    /// (C,H,W) -> (H*W, C)
    ChwToRows { a: VarId, c: usize, h: usize, w: usize },
    /// (H*W, C) -> (C,H,W)
    RowsToChw { a: VarId, c: usize, h: usize, w: usize },
    Conv2d { x: VarId, w: VarId, dims: ConvDims },
    /// 1x1 convolution with bias; weight (co, ci), bias (co,).
    Conv1x1 { x: VarId, w: VarId, b: VarId, ci: usize, co: usize, hw: usize },
    Deconv2d { x: VarId, w: VarId, dims: ConvDims },
    AvgPool2d { a: VarId, k: usize, c: usize, h: usize, w: usize },
    MaxPool2d { a: VarId, c: usize, oh: usize, ow: usize, argmax: Vec<usize> },
    BilinearResize { a: VarId, c: usize, h: usize, w: usize, oh: usize, ow: usize },
    NearestResize { a: VarId, c: usize, h: usize, w: usize, oh: usize, ow: usize },
    /// Per-channel scale + bias on (C,H,W).
    ChannelAffine { x: VarId, scale: VarId, bias: VarId, c: usize, hw: usize },
    /// Sinusoidal encoding of fixed per-query deltas with frequency bank omega.
    PosEnc { omega: VarId, deltas: Vec<f64>, use_sin: bool, use_cos: bool, l: usize },
    /// Per-row cross entropy of (Q,N) logits; rows with IGNORE_LABEL get 0.
    SoftmaxXent { logits: VarId, labels: Vec<i64>, n: usize, probs: Vec<f64> },
}

struct Node {
    op: Op,
}

/// One recorded forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
    precision: Precision,
}

fn err(op: &'static str, detail: String) -> AdError {
    AdError::ShapeMismatch { op, detail }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape { nodes: Vec::new(), values: Vec::new(), precision }
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.values[v.0]
    }

    fn push(&mut self, op: Op, mut value: Tensor) -> VarId {
        value.round_to(self.precision);
        let id = VarId(self.nodes.len());
        self.nodes.push(Node { op });
        self.values.push(value);
        id
    }

    pub fn constant(&mut self, t: Tensor) -> VarId {
        self.push(Op::Constant, t)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> VarId {
        let value = store.get(id).value.clone();
        self.push(Op::Param(id), value)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> AdResult<VarId> {
        let (sa, sb) = (&self.values[a.0].shape, &self.values[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(&self.values[a.0].data, &self.values[b.0].data, &mut out, m, k, n);
        Ok(self.push(Op::MatMul { a, b, m, k, n }, Tensor::new(vec![m, n], out)))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> AdResult<VarId> {
        if self.values[a.0].shape != self.values[b.0].shape {
            return Err(err(
                "add",
                format!("{:?} vs {:?}", self.values[a.0].shape, self.values[b.0].shape),
            ));
        }
        let data = self.values[a.0]
            .data
            .iter()
            .zip(&self.values[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.values[a.0].shape.clone();
        Ok(self.push(Op::Add { a, b }, Tensor::new(shape, data)))
    }

    pub fn add_rows(&mut self, a: VarId, bias: VarId) -> AdResult<VarId> {
        let sa = self.values[a.0].shape.clone();
        let sb = &self.values[bias.0].shape;
        if sa.len() != 2 || sb.len() != 1 || sb[0] != sa[1] {
            return Err(err("add-rows", format!("{sa:?} + bias {sb:?}")));
        }
        let n = sa[1];
        let bdat = &self.values[bias.0].data;
        let data = self.values[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + bdat[i % n])
            .collect();
        Ok(self.push(Op::AddRows { a, bias }, Tensor::new(sa, data)))
    }

    pub fn scale(&mut self, a: VarId, factor: f64) -> VarId {
        let t = &self.values[a.0];
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|x| x * factor).collect());
        self.push(Op::Scale { a, factor }, out)
    }

    pub fn sum(&mut self, a: VarId) -> VarId {
        let s: f64 = self.values[a.0].data.iter().sum();
        self.push(Op::Sum { a }, Tensor::scalar(s))
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let t = &self.values[a.0];
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|x| x.max(0.0)).collect());
        self.push(Op::Relu { a }, out)
    }

    pub fn sin(&mut self, a: VarId) -> VarId {
        let t = &self.values[a.0];
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|x| x.sin()).collect());
        self.push(Op::Sin { a }, out)
    }

    pub fn cos(&mut self, a: VarId) -> VarId {
        let t = &self.values[a.0];
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|x| x.cos()).collect());
        self.push(Op::Cos { a }, out)
    }

    pub fn concat_lastdim(&mut self, parts: &[VarId]) -> AdResult<VarId> {
        if parts.is_empty() {
            return Err(err("concat-lastdim", "no parts".into()));
        }
        let rows = self.values[parts[0].0].rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = &self.values[p.0];
            if t.shape.len() != 2 || t.shape[0] != rows {
                return Err(err(
                    "concat-lastdim",
                    format!("expected ({rows}, _), got {:?}", t.shape),
                ));
            }
            widths.push(t.shape[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (pi, &p) in parts.iter().enumerate() {
            let w = widths[pi];
            let src = &self.values[p.0].data;
            for r in 0..rows {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(
            Op::ConcatLastDim { parts: parts.to_vec(), widths, rows },
            Tensor::new(vec![rows, total], data),
        ))
    }

    pub fn gather_rows(&mut self, a: VarId, indices: &[usize]) -> AdResult<VarId> {
        let t = &self.values[a.0];
        let rows = t.rows();
        let row_len = t.row_len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(err("gather-rows", format!("index {bad} out of {rows} rows")));
        }
        let mut data = vec![0.0; indices.len() * row_len];
        for (q, &i) in indices.iter().enumerate() {
            data[q * row_len..(q + 1) * row_len]
                .copy_from_slice(&t.data[i * row_len..(i + 1) * row_len]);
        }
        let shape = if t.shape.len() == 1 {
            vec![indices.len()]
        } else {
            vec![indices.len(), row_len]
        };
        Ok(self.push(
            Op::GatherRows { a, indices: indices.to_vec(), row_len },
            Tensor::new(shape, data),
        ))
    }

    pub fn chw_to_rows(&mut self, a: VarId) -> AdResult<VarId> {
        let t = &self.values[a.0];
        if t.shape.len() != 3 {
            return Err(err("chw-to-rows", format!("expected (C,H,W), got {:?}", t.shape)));
        }
        let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
        let hw = h * w;
        let mut data = vec![0.0; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                data[p * c + ch] = t.data[ch * hw + p];
            }
        }
        Ok(self.push(Op::ChwToRows { a, c, h, w }, Tensor::new(vec![hw, c], data)))
    }

    pub fn rows_to_chw(&mut self, a: VarId, h: usize, w: usize) -> AdResult<VarId> {
        let t = &self.values[a.0];
        if t.shape.len() != 2 || t.shape[0] != h * w {
            return Err(err(
                "rows-to-chw",
                format!("expected ({}, _), got {:?}", h * w, t.shape),
            ));
        }
        let c = t.shape[1];
        let hw = h * w;
        let mut data = vec![0.0; c * hw];
        for p in 0..hw {
            for ch in 0..c {
                data[ch * hw + p] = t.data[p * c + ch];
            }
        }
        Ok(self.push(Op::RowsToChw { a, c, h, w }, Tensor::new(vec![c, h, w], data)))
    }

    pub fn conv2d(&mut self, x: VarId, w: VarId, stride: usize, pad: usize) -> AdResult<VarId> {
        let (sx, sw) = (&self.values[x.0].shape, &self.values[w.0].shape);
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(err("conv2d", format!("input {sx:?}, kernel {sw:?}")));
        }
        let (ci, h, wd) = (sx[0], sx[1], sx[2]);
        let (co, k) = (sw[0], sw[2]);
        let (oh, ow) = match (
            kernels::conv_out_dim(h, k, stride, pad),
            kernels::conv_out_dim(wd, k, stride, pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(err("conv2d", format!("kernel {k} too large for {h}x{wd} pad {pad}"))),
        };
        let mut out = vec![0.0; co * oh * ow];
        kernels::conv2d(
            &self.values[x.0].data,
            &self.values[w.0].data,
            &mut out,
            ci,
            h,
            wd,
            co,
            k,
            stride,
            pad,
            oh,
            ow,
        );
        let dims = ConvDims { ci, h, w: wd, co, k, stride, pad, oh, ow };
        Ok(self.push(Op::Conv2d { x, w, dims }, Tensor::new(vec![co, oh, ow], out)))
    }

    pub fn conv1x1(&mut self, x: VarId, w: VarId, b: VarId) -> AdResult<VarId> {
        let (sx, sw, sb) = (
            &self.values[x.0].shape,
            &self.values[w.0].shape,
            &self.values[b.0].shape,
        );
        if sx.len() != 3 || sw.len() != 2 || sw[1] != sx[0] || sb != &vec![sw[0]] {
            return Err(err("conv1x1", format!("input {sx:?}, weight {sw:?}, bias {sb:?}")));
        }
        let (ci, h, wd) = (sx[0], sx[1], sx[2]);
        let co = sw[0];
        let hw = h * wd;
        let mut out = vec![0.0; co * hw];
        kernels::matmul_acc(&self.values[w.0].data, &self.values[x.0].data, &mut out, co, ci, hw);
        let bdat = &self.values[b.0].data;
        for c in 0..co {
            let bv = bdat[c];
            for v in &mut out[c * hw..(c + 1) * hw] {
                *v += bv;
            }
        }
        Ok(self.push(
            Op::Conv1x1 { x, w, b, ci, co, hw },
            Tensor::new(vec![co, h, wd], out),
        ))
    }

    pub fn deconv2d(&mut self, x: VarId, w: VarId, stride: usize, pad: usize) -> AdResult<VarId> {
        let (sx, sw) = (&self.values[x.0].shape, &self.values[w.0].shape);
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sx[0] || sw[2] != sw[3] {
            return Err(err("transposed-conv2d", format!("input {sx:?}, kernel {sw:?}")));
        }
        let (ci, h, wd) = (sx[0], sx[1], sx[2]);
        let (co, k) = (sw[1], sw[2]);
        let oh = (h - 1) * stride + k;
        let ow = (wd - 1) * stride + k;
        if oh < 2 * pad || ow < 2 * pad {
            return Err(err("transposed-conv2d", format!("pad {pad} exceeds output {oh}x{ow}")));
        }
        let (oh, ow) = (oh - 2 * pad, ow - 2 * pad);
        let mut out = vec![0.0; co * oh * ow];
        kernels::deconv2d(
            &self.values[x.0].data,
            &self.values[w.0].data,
            &mut out,
            ci,
            h,
            wd,
            co,
            k,
            stride,
            pad,
            oh,
            ow,
        );
        let dims = ConvDims { ci, h, w: wd, co, k, stride, pad, oh, ow };
        Ok(self.push(Op::Deconv2d { x, w, dims }, Tensor::new(vec![co, oh, ow], out)))
    }

    pub fn avgpool2d(&mut self, a: VarId, k: usize) -> AdResult<VarId> {
        let t = &self.values[a.0];
        if t.shape.len() != 3 || t.shape[1] % k != 0 || t.shape[2] % k != 0 {
            return Err(err("avgpool2d", format!("{:?} not divisible by {k}", t.shape)));
        }
        let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
        let (oh, ow) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for r in 0..oh {
                for cc in 0..ow {
                    let mut s = 0.0;
                    for dr in 0..k {
                        for dc in 0..k {
                            s += t.data[ch * h * w + (r * k + dr) * w + cc * k + dc];
                        }
                    }
                    out[ch * oh * ow + r * ow + cc] = s * inv;
                }
            }
        }
        Ok(self.push(
            Op::AvgPool2d { a, k, c, h, w },
            Tensor::new(vec![c, oh, ow], out),
        ))
    }

    pub fn maxpool2d(&mut self, a: VarId, k: usize) -> AdResult<VarId> {
        let t = &self.values[a.0];
        if t.shape.len() != 3 || t.shape[1] % k != 0 || t.shape[2] % k != 0 {
            return Err(err("maxpool-select", format!("{:?} not divisible by {k}", t.shape)));
        }
        let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
        let (oh, ow) = (h / k, w / k);
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for r in 0..oh {
                for cc in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut bidx = 0;
                    for dr in 0..k {
                        for dc in 0..k {
                            let idx = ch * h * w + (r * k + dr) * w + cc * k + dc;
                            if t.data[idx] > best {
                                best = t.data[idx];
                                bidx = idx;
                            }
                        }
                    }
                    out[ch * oh * ow + r * ow + cc] = best;
                    argmax[ch * oh * ow + r * ow + cc] = bidx;
                }
            }
        }
        Ok(self.push(
            Op::MaxPool2d { a, c, oh, ow, argmax },
            Tensor::new(vec![c, oh, ow], out),
        ))
    }

    pub fn bilinear_resize(&mut self, a: VarId, oh: usize, ow: usize) -> AdResult<VarId> {
        let t = &self.values[a.0];
        if t.shape.len() != 3 || oh == 0 || ow == 0 {
            return Err(err("bilinear-upsample", format!("{:?} -> {oh}x{ow}", t.shape)));
        }
        let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
        let ys = kernels::bilinear_axis(h, oh);
        let xs = kernels::bilinear_axis(w, ow);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let base = ch * h * w;
            for (r, &(y0, y1, wy)) in ys.iter().enumerate() {
                for (cc, &(x0, x1, wx)) in xs.iter().enumerate() {
                    let v00 = t.data[base + y0 * w + x0];
                    let v01 = t.data[base + y0 * w + x1];
                    let v10 = t.data[base + y1 * w + x0];
                    let v11 = t.data[base + y1 * w + x1];
                    let top = v00 + (v01 - v00) * wx;
                    let bot = v10 + (v11 - v10) * wx;
                    out[ch * oh * ow + r * ow + cc] = top + (bot - top) * wy;
                }
            }
        }
        Ok(self.push(
            Op::BilinearResize { a, c, h, w, oh, ow },
            Tensor::new(vec![c, oh, ow], out),
        ))
    }

    pub fn nearest_resize(&mut self, a: VarId, oh: usize, ow: usize) -> AdResult<VarId> {
        let t = &self.values[a.0];
        if t.shape.len() != 3 || oh == 0 || ow == 0 {
            return Err(err("nearest-upsample", format!("{:?} -> {oh}x{ow}", t.shape)));
        }
        let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
        let ys = kernels::nearest_axis(h, oh);
        let xs = kernels::nearest_axis(w, ow);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let base = ch * h * w;
            for (r, &sy) in ys.iter().enumerate() {
                for (cc, &sx) in xs.iter().enumerate() {
                    out[ch * oh * ow + r * ow + cc] = t.data[base + sy * w + sx];
                }
            }
        }
        Ok(self.push(
            Op::NearestResize { a, c, h, w, oh, ow },
            Tensor::new(vec![c, oh, ow], out),
        ))
    }

    pub fn channel_affine(&mut self, x: VarId, scale: VarId, bias: VarId) -> AdResult<VarId> {
        let (sx, ss, sb) = (
            &self.values[x.0].shape,
            &self.values[scale.0].shape,
            &self.values[bias.0].shape,
        );
        if sx.len() != 3 || ss != &vec![sx[0]] || sb != &vec![sx[0]] {
            return Err(err(
                "channel-affine",
                format!("input {sx:?}, scale {ss:?}, bias {sb:?}"),
            ));
        }
        let (c, hw) = (sx[0], sx[1] * sx[2]);
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            let s = self.values[scale.0].data[ch];
            let b = self.values[bias.0].data[ch];
            for p in 0..hw {
                out[ch * hw + p] = s * self.values[x.0].data[ch * hw + p] + b;
            }
        }
        let shape = sx.clone();
        Ok(self.push(Op::ChannelAffine { x, scale, bias, c, hw }, Tensor::new(shape, out)))
    }

    /// Sinusoidal position encoding of per-query 2-vector deltas.
    ///
    /// Per query row, per axis (x then y), per frequency l: the requested
    /// subset of (sin(omega_l * a), cos(omega_l * a)), interleaved sin-first
    /// when both are present.
    pub fn pos_enc(
        &mut self,
        omega: VarId,
        deltas: &[f64],
        use_sin: bool,
        use_cos: bool,
    ) -> AdResult<VarId> {
        let so = &self.values[omega.0].shape;
        if so.len() != 1 || deltas.len() % 2 != 0 || (!use_sin && !use_cos) {
            return Err(err(
                "pos-enc",
                format!("omega {so:?}, deltas len {}, sin={use_sin} cos={use_cos}", deltas.len()),
            ));
        }
        let l = so[0];
        let q = deltas.len() / 2;
        let per_axis = l * (use_sin as usize + use_cos as usize);
        let width = 2 * per_axis;
        let om = &self.values[omega.0].data;
        let mut out = vec![0.0; q * width];
        for qi in 0..q {
            let mut o = qi * width;
            for axis in 0..2 {
                let a = deltas[qi * 2 + axis];
                for &f in om.iter() {
                    let t = f * a;
                    if use_sin {
                        out[o] = t.sin();
                        o += 1;
                    }
                    if use_cos {
                        out[o] = t.cos();
                        o += 1;
                    }
                }
            }
        }
        Ok(self.push(
            Op::PosEnc { omega, deltas: deltas.to_vec(), use_sin, use_cos, l },
            Tensor::new(vec![q, width], out),
        ))
    }

    /// Per-row softmax cross entropy. Rows labeled [`IGNORE_LABEL`] produce
    /// zero loss and zero gradient.
    pub fn softmax_xent(&mut self, logits: VarId, labels: &[i64]) -> AdResult<VarId> {
        let s = &self.values[logits.0].shape;
        if s.len() != 2 || s[0] != labels.len() {
            return Err(err(
                "softmax-xent",
                format!("logits {s:?} vs {} labels", labels.len()),
            ));
        }
        let (q, n) = (s[0], s[1]);
        if let Some(&bad) = labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && (l < 0 || l >= n as i64))
        {
            return Err(err("softmax-xent", format!("label {bad} out of range 0..{n}")));
        }
        let dat = &self.values[logits.0].data;
        let mut probs = vec![0.0; q * n];
        let mut losses = vec![0.0; q];
        for r in 0..q {
            let row = &dat[r * n..(r + 1) * n];
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                probs[r * n + j] = e;
                z += e;
            }
            for j in 0..n {
                probs[r * n + j] /= z;
            }
            let lbl = labels[r];
            if lbl != IGNORE_LABEL {
                losses[r] = -(probs[r * n + lbl as usize].max(f64::MIN_POSITIVE)).ln();
            }
        }
        Ok(self.push(
            Op::SoftmaxXent { logits, labels: labels.to_vec(), n, probs },
            Tensor::new(vec![q], losses),
        ))
    }

    /// Reverse sweep from a scalar loss; gradients accumulate into `store`.
    pub fn backward(&self, loss: VarId, store: &mut ParamStore) -> AdResult<()> {
        if self.nodes.is_empty() {
            return Err(AdError::EmptyTape);
        }
        if !self.values[loss.0].is_scalar() {
            return Err(AdError::NonScalarLoss(self.values[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Param(pid) => {
                    let p = store.get_mut(*pid);
                    if p.requires_grad {
                        for (pg, gv) in p.grad.data.iter_mut().zip(&g) {
                            *pg += gv;
                        }
                    }
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    {
                        let da = Self::grad_buf(&mut grads, *a, m * k);
                        kernels::matmul_grad_a(&g, &self.values[b.0].data, da, m, k, n);
                    }
                    let db = Self::grad_buf(&mut grads, *b, k * n);
                    kernels::matmul_grad_b(&self.values[a.0].data, &g, db, m, k, n);
                }
                Op::Add { a, b } => {
                    let da = Self::grad_buf(&mut grads, *a, g.len());
                    for (d, gv) in da.iter_mut().zip(&g) {
                        *d += gv;
                    }
                    let db = Self::grad_buf(&mut grads, *b, g.len());
                    for (d, gv) in db.iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
                Op::AddRows { a, bias } => {
                    let n = self.values[bias.0].shape[0];
                    let da = Self::grad_buf(&mut grads, *a, g.len());
                    for (d, gv) in da.iter_mut().zip(&g) {
                        *d += gv;
                    }
                    let db = Self::grad_buf(&mut grads, *bias, n);
                    for (j, gv) in g.iter().enumerate() {
                        db[j % n] += gv;
                    }
                }
                Op::Scale { a, factor } => {
                    let da = Self::grad_buf(&mut grads, *a, g.len());
                    for (d, gv) in da.iter_mut().zip(&g) {
                        *d += gv * factor;
                    }
                }
                Op::Sum { a } => {
                    let n = self.values[a.0].numel();
                    let da = Self::grad_buf(&mut grads, *a, n);
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::Relu { a } => {
                    let x = &self.values[a.0].data;
                    let da = Self::grad_buf(&mut grads, *a, g.len());
                    for j in 0..g.len() {
                        if x[j] > 0.0 {
                            da[j] += g[j];
                        }
                    }
                }
                Op::Sin { a } => {
                    let x = &self.values[a.0].data;
                    let da = Self::grad_buf(&mut grads, *a, g.len());
                    for j in 0..g.len() {
                        da[j] += g[j] * x[j].cos();
                    }
                }
                Op::Cos { a } => {
                    let x = &self.values[a.0].data;
                    let da = Self::grad_buf(&mut grads, *a, g.len());
                    for j in 0..g.len() {
                        da[j] -= g[j] * x[j].sin();
                    }
                }
                Op::ConcatLastDim { parts, widths, rows } => {
                    let total: usize = widths.iter().sum();
                    let mut off = 0;
                    for (pi, p) in parts.iter().enumerate() {
                        let w = widths[pi];
                        let dp = Self::grad_buf(&mut grads, *p, rows * w);
                        for r in 0..*rows {
                            for j in 0..w {
                                dp[r * w + j] += g[r * total + off + j];
                            }
                        }
                        off += w;
                    }
                }
                Op::GatherRows { a, indices, row_len } => {
                    let da = Self::grad_buf(&mut grads, *a, self.values[a.0].numel());
                    for (q, &idx) in indices.iter().enumerate() {
                        for j in 0..*row_len {
                            da[idx * row_len + j] += g[q * row_len + j];
                        }
                    }
                }
                Op::ChwToRows { a, c, h, w } => {
                    let hw = h * w;
                    let da = Self::grad_buf(&mut grads, *a, c * hw);
                    for ch in 0..*c {
                        for p in 0..hw {
                            da[ch * hw + p] += g[p * c + ch];
                        }
                    }
                }
                Op::RowsToChw { a, c, h, w } => {
                    let hw = h * w;
                    let da = Self::grad_buf(&mut grads, *a, c * hw);
                    for p in 0..hw {
                        for ch in 0..*c {
                            da[p * c + ch] += g[ch * hw + p];
                        }
                    }
                }
                Op::Conv2d { x, w, dims } => {
                    let d = dims.clone();
                    let need_dx = self.wants_grad(*x, store);
                    let need_dw = self.wants_grad(*w, store);
                    let xval = &self.values[x.0].data;
                    let wval = &self.values[w.0].data;
                    // Two passes keep the borrow of `grads` simple.
                    if need_dx {
                        let dx = Self::grad_buf(&mut grads, *x, d.ci * d.h * d.w);
                        kernels::conv2d_grad(
                            xval, wval, &g, Some(dx), None, d.ci, d.h, d.w, d.co, d.k, d.stride,
                            d.pad, d.oh, d.ow,
                        );
                    }
                    if need_dw {
                        let dw = Self::grad_buf(&mut grads, *w, d.co * d.ci * d.k * d.k);
                        kernels::conv2d_grad(
                            xval, wval, &g, None, Some(dw), d.ci, d.h, d.w, d.co, d.k, d.stride,
                            d.pad, d.oh, d.ow,
                        );
                    }
                }
                Op::Conv1x1 { x, w, b, ci, co, hw } => {
                    let (ci, co, hw) = (*ci, *co, *hw);
                    {
                        let dx = Self::grad_buf(&mut grads, *x, ci * hw);
                        // dx = W^T . dout
                        kernels::matmul_grad_b(&self.values[w.0].data, &g, dx, co, ci, hw);
                    }
                    {
                        let dw = Self::grad_buf(&mut grads, *w, co * ci);
                        kernels::matmul_grad_a(&g, &self.values[x.0].data, dw, co, ci, hw);
                    }
                    let db = Self::grad_buf(&mut grads, *b, co);
                    for c in 0..co {
                        db[c] += g[c * hw..(c + 1) * hw].iter().sum::<f64>();
                    }
                }
                Op::Deconv2d { x, w, dims } => {
                    let d = dims.clone();
                    let need_dx = self.wants_grad(*x, store);
                    let need_dw = self.wants_grad(*w, store);
                    let xval = &self.values[x.0].data;
                    let wval = &self.values[w.0].data;
                    if need_dx {
                        let dx = Self::grad_buf(&mut grads, *x, d.ci * d.h * d.w);
                        kernels::deconv2d_grad(
                            xval, wval, &g, Some(dx), None, d.ci, d.h, d.w, d.co, d.k, d.stride,
                            d.pad, d.oh, d.ow,
                        );
                    }
                    if need_dw {
                        let dw = Self::grad_buf(&mut grads, *w, d.ci * d.co * d.k * d.k);
                        kernels::deconv2d_grad(
                            xval, wval, &g, None, Some(dw), d.ci, d.h, d.w, d.co, d.k, d.stride,
                            d.pad, d.oh, d.ow,
                        );
                    }
                }
                Op::AvgPool2d { a, k, c, h, w } => {
                    let (k, c, h, w) = (*k, *c, *h, *w);
                    let (oh, ow) = (h / k, w / k);
                    let inv = 1.0 / (k * k) as f64;
                    let da = Self::grad_buf(&mut grads, *a, c * h * w);
                    for ch in 0..c {
                        for r in 0..oh {
                            for cc in 0..ow {
                                let gv = g[ch * oh * ow + r * ow + cc] * inv;
                                for dr in 0..k {
                                    for dc in 0..k {
                                        da[ch * h * w + (r * k + dr) * w + cc * k + dc] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::MaxPool2d { a, c, oh, ow, argmax, .. } => {
                    let da = Self::grad_buf(&mut grads, *a, self.values[a.0].numel());
                    for o in 0..c * oh * ow {
                        da[argmax[o]] += g[o];
                    }
                }
                Op::BilinearResize { a, c, h, w, oh, ow } => {
                    let (c, h, w, oh, ow) = (*c, *h, *w, *oh, *ow);
                    let ys = kernels::bilinear_axis(h, oh);
                    let xs = kernels::bilinear_axis(w, ow);
                    let da = Self::grad_buf(&mut grads, *a, c * h * w);
                    for ch in 0..c {
                        let base = ch * h * w;
                        for (r, &(y0, y1, wy)) in ys.iter().enumerate() {
                            for (cc, &(x0, x1, wx)) in xs.iter().enumerate() {
                                let gv = g[ch * oh * ow + r * ow + cc];
                                da[base + y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                                da[base + y0 * w + x1] += gv * (1.0 - wy) * wx;
                                da[base + y1 * w + x0] += gv * wy * (1.0 - wx);
                                da[base + y1 * w + x1] += gv * wy * wx;
                            }
                        }
                    }
                }
                Op::NearestResize { a, c, h, w, oh, ow } => {
                    let (c, h, w, oh, ow) = (*c, *h, *w, *oh, *ow);
                    let ys = kernels::nearest_axis(h, oh);
                    let xs = kernels::nearest_axis(w, ow);
                    let da = Self::grad_buf(&mut grads, *a, c * h * w);
                    for ch in 0..c {
                        let base = ch * h * w;
                        for (r, &sy) in ys.iter().enumerate() {
                            for (cc, &sx) in xs.iter().enumerate() {
                                da[base + sy * w + sx] += g[ch * oh * ow + r * ow + cc];
                            }
                        }
                    }
                }
                Op::ChannelAffine { x, scale, bias, c, hw } => {
                    let (c, hw) = (*c, *hw);
                    let sval = self.values[scale.0].data.clone();
                    let xval = &self.values[x.0].data;
                    {
                        let dx = Self::grad_buf(&mut grads, *x, c * hw);
                        for ch in 0..c {
                            for p in 0..hw {
                                dx[ch * hw + p] += g[ch * hw + p] * sval[ch];
                            }
                        }
                    }
                    {
                        let ds = Self::grad_buf(&mut grads, *scale, c);
                        for ch in 0..c {
                            let mut s = 0.0;
                            for p in 0..hw {
                                s += g[ch * hw + p] * xval[ch * hw + p];
                            }
                            ds[ch] += s;
                        }
                    }
                    let db = Self::grad_buf(&mut grads, *bias, c);
                    for ch in 0..c {
                        db[ch] += g[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                    }
                }
                Op::PosEnc { omega, deltas, use_sin, use_cos, l } => {
                    let l = *l;
                    let om = self.values[omega.0].data.clone();
                    let per_axis = l * (*use_sin as usize + *use_cos as usize);
                    let width = 2 * per_axis;
                    let q = deltas.len() / 2;
                    let dom = Self::grad_buf(&mut grads, *omega, l);
                    for qi in 0..q {
                        let mut o = qi * width;
                        for axis in 0..2 {
                            let a = deltas[qi * 2 + axis];
                            for (li, &f) in om.iter().enumerate() {
                                let t = f * a;
                                if *use_sin {
                                    dom[li] += g[o] * a * t.cos();
                                    o += 1;
                                }
                                if *use_cos {
                                    dom[li] -= g[o] * a * t.sin();
                                    o += 1;
                                }
                            }
                        }
                    }
                }
                Op::SoftmaxXent { logits, labels, n, probs } => {
                    let n = *n;
                    let dl = Self::grad_buf(&mut grads, *logits, labels.len() * n);
                    for (r, &lbl) in labels.iter().enumerate() {
                        if lbl == IGNORE_LABEL {
                            continue;
                        }
                        let gv = g[r];
                        for j in 0..n {
                            let p = probs[r * n + j];
                            let t = if j as i64 == lbl { 1.0 } else { 0.0 };
                            dl[r * n + j] += gv * (p - t);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn grad_buf<'g>(grads: &'g mut [Option<Vec<f64>>], v: VarId, len: usize) -> &'g mut Vec<f64> {
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Whether anything reachable from `v` can receive a gradient. Leaves
    /// that are constants (or frozen params) let backward skip heavy kernels.
    fn wants_grad(&self, v: VarId, store: &ParamStore) -> bool {
        match &self.nodes[v.0].op {
            Op::Constant => false,
            Op::Param(pid) => store.get(*pid).requires_grad,
            _ => true,
        }
    }
}
