//! Reverse-mode gradient tape.
//!
//! Nodes append in topological order (every input id precedes its consumer);
//! `backward` sweeps the tape once in reverse. Gradients are accumulated only
//! for nodes that transitively require them, so constant operands (e.g. RAM
//! masks) cost nothing on the way back. A tape and its tensors are confined
//! to one thread for the duration of a pass.

use super::linalg;
use super::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node (and its value) on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C0 * (x + GELU_C1 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
}

enum Op {
    Leaf,
    /// a @ b
    Matmul { a: TensorId, b: TensorId },
    /// a @ b^T (b stored row-major, read transposed)
    MatmulNt { a: TensorId, b: TensorId },
    /// x @ w^T + bias; w is [out, in], bias broadcast over rows
    Linear {
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
    },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, k: f64 },
    Gelu { x: TensorId },
    /// Normalization over the last axis with learnable per-feature scale/shift.
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows { x: TensorId },
    Transpose { x: TensorId },
    ConcatRows { parts: Vec<TensorId> },
    SliceRows { x: TensorId, start: usize },
    Reshape { x: TensorId },
    /// y[i,:] = keep * sum_j x[j,:] — the closed-form mask ensemble.
    RamEnsemble { x: TensorId, keep: f64 },
    SumAll { x: TensorId },
    MeanAll { x: TensorId },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// One tape per forward/backward pass.
#[derive(Default)]
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

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` root w.r.t. this node, if it was
    /// reached and required grad.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> TensorId {
        debug_assert!(value.all_finite(), "non-finite forward value");
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        self.push(Op::Leaf, t, true)
    }

    /// Non-differentiable input (data, masks, targets).
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.push(Op::Leaf, t, false)
    }

    fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
        Error::Shape {
            op,
            lhs: lhs.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(Self::shape_err("matmul", va, vb));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut out = vec![0.0; m * n];
        linalg::gemm(m, k, n, 1.0, va.data(), vb.data(), 0.0, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul { a, b }, Tensor::new(vec![m, n], out)?, needs))
    }

    /// a @ b^T with b stored [n, k] row-major.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.cols() {
            return Err(Self::shape_err("matmul_nt", va, vb));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.rows());
        let mut out = vec![0.0; m * n];
        linalg::gemm_nt(m, k, n, 1.0, va.data(), vb.data(), 0.0, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatmulNt { a, b }, Tensor::new(vec![m, n], out)?, needs))
    }

    /// x @ w^T + bias; x is [r, in], w is [out, in], bias is [out].
    pub fn linear(&mut self, x: TensorId, w: TensorId, bias: Option<TensorId>) -> Result<TensorId> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.shape().len() != 2 || vw.shape().len() != 2 || vx.cols() != vw.cols() {
            return Err(Self::shape_err("linear", vx, vw));
        }
        let (r, i, o) = (vx.rows(), vx.cols(), vw.rows());
        if let Some(b) = bias {
            let vb = self.value(b);
            if vb.shape() != [o] {
                return Err(Self::shape_err("linear bias", self.value(w), vb));
            }
        }
        let mut out = vec![0.0; r * o];
        linalg::gemm_nt(r, i, o, 1.0, vx.data(), vw.data(), 0.0, &mut out);
        if let Some(b) = bias {
            let vb = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (y, &bv) in row.iter_mut().zip(vb) {
                    *y += bv;
                }
            }
        }
        let needs =
            self.needs(x) || self.needs(w) || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            Op::Linear { x, w, bias },
            Tensor::new(vec![r, o], out)?,
            needs,
        ))
    }

    fn broadcast_ok(a: &Tensor, b: &Tensor) -> bool {
        a.shape() == b.shape() || a.len() == 1 || b.len() == 1
    }

    fn ew_shapes<'t>(&'t self, op: &'static str, a: TensorId, b: TensorId) -> Result<(&'t Tensor, &'t Tensor)> {
        let (va, vb) = (self.value(a), self.value(b));
        if !Self::broadcast_ok(va, vb) {
            return Err(Self::shape_err(op, va, vb));
        }
        Ok((va, vb))
    }

    fn ew_forward(va: &Tensor, vb: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        if va.len() == 1 && vb.len() > 1 {
            let s = va.data()[0];
            let data = vb.data().iter().map(|&y| f(s, y)).collect();
            Tensor::new(vb.shape().to_vec(), data).unwrap()
        } else if vb.len() == 1 && va.len() > 1 {
            let s = vb.data()[0];
            let data = va.data().iter().map(|&x| f(x, s)).collect();
            Tensor::new(va.shape().to_vec(), data).unwrap()
        } else {
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(va.shape().to_vec(), data).unwrap()
        }
    }

    /// Elementwise sum; shapes must match, or one side may be a scalar.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = self.ew_shapes("add", a, b)?;
        let out = Self::ew_forward(va, vb, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, out, needs))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = self.ew_shapes("sub", a, b)?;
        let out = Self::ew_forward(va, vb, |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub { a, b }, out, needs))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = self.ew_shapes("mul", a, b)?;
        let out = Self::ew_forward(va, vb, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a, b }, out, needs))
    }

    pub fn scale(&mut self, x: TensorId, k: f64) -> Result<TensorId> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v * k).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(Op::Scale { x, k }, out, needs))
    }

    /// GELU, tanh approximation (a fixed constant of the build).
    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu_scalar(v)).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(Op::Gelu { x }, out, needs))
    }

    /// Layer normalization over the last axis, population variance, eps 1e-5.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *vx.shape().last().unwrap();
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(Self::shape_err("layer_norm", vx, vg));
        }
        let r = vx.len() / d;
        let (g, b) = (vg.data().to_vec(), vb.data().to_vec());
        let mut mean = vec![0.0; r];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; vx.len()];
        for (ri, row) in vx.data().chunks(d).enumerate() {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            mean[ri] = mu;
            rstd[ri] = rs;
            let o = &mut out[ri * d..(ri + 1) * d];
            for j in 0..d {
                o[j] = g[j] * (row[j] - mu) * rs + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let shape = vx.shape().to_vec();
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            Tensor::new(shape, out)?,
            needs,
        ))
    }

    /// Numerically stable softmax over each row of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let vx = self.value(x);
        if vx.shape().len() != 2 {
            return Err(Self::shape_err("softmax_rows", vx, vx));
        }
        let d = vx.cols();
        let mut out = vec![0.0; vx.len()];
        for (row, o) in vx.data().chunks(d).zip(out.chunks_mut(d)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..d {
                o[j] = (row[j] - mx).exp();
                z += o[j];
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        let needs = self.needs(x);
        let shape = vx.shape().to_vec();
        Ok(self.push(Op::SoftmaxRows { x }, Tensor::new(shape, out)?, needs))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let vx = self.value(x);
        if vx.shape().len() != 2 {
            return Err(Self::shape_err("transpose", vx, vx));
        }
        let (r, c) = (vx.rows(), vx.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = vx.data()[i * c + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::Transpose { x }, Tensor::new(vec![c, r], out)?, needs))
    }

    /// Stack 2-D tensors along the row axis; column counts must agree.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        assert!(!parts.is_empty());
        let c = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.cols() != c {
                return Err(Self::shape_err("concat_rows", self.value(parts[0]), v));
            }
            rows += v.rows();
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            Tensor::new(vec![rows, c], data)?,
            needs,
        ))
    }

    /// Rows [start, start+rows) of a 2-D tensor.
    pub fn slice_rows(&mut self, x: TensorId, start: usize, rows: usize) -> Result<TensorId> {
        let vx = self.value(x);
        if vx.shape().len() != 2 || start + rows > vx.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: vx.shape().to_vec(),
                rhs: vec![start, rows],
            });
        }
        let c = vx.cols();
        let data = vx.data()[start * c..(start + rows) * c].to_vec();
        let needs = self.needs(x);
        Ok(self.push(
            Op::SliceRows { x, start },
            Tensor::new(vec![rows, c], data)?,
            needs,
        ))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let vx = self.value(x);
        if shape.iter().product::<usize>() != vx.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: vx.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let t = Tensor::new(shape.to_vec(), vx.data().to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape { x }, t, needs))
    }

    /// Every output row equals `keep` times the column sums of x.
    pub fn ram_ensemble(&mut self, x: TensorId, keep: f64) -> Result<TensorId> {
        let vx = self.value(x);
        if vx.shape().len() != 2 {
            return Err(Self::shape_err("ram_ensemble", vx, vx));
        }
        let (n, d) = (vx.rows(), vx.cols());
        let mut colsum = vec![0.0; d];
        for row in vx.data().chunks(d) {
            for (s, &v) in colsum.iter_mut().zip(row) {
                *s += v;
            }
        }
        let mut out = vec![0.0; n * d];
        for row in out.chunks_mut(d) {
            for (o, &s) in row.iter_mut().zip(&colsum) {
                *o = keep * s;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Op::RamEnsemble { x, keep },
            Tensor::new(vec![n, d], out)?,
            needs,
        ))
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        Ok(self.push(Op::SumAll { x }, Tensor::scalar(s), needs))
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let vx = self.value(x);
        let s = vx.data().iter().sum::<f64>() / vx.len() as f64;
        let needs = self.needs(x);
        Ok(self.push(Op::MeanAll { x }, Tensor::scalar(s), needs))
    }

    /// Mean over all elements of the squared difference.
    pub fn mse(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    /// Sum over all elements of the squared difference.
    pub fn sse(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        self.sum_all(sq)
    }

    fn acc(grads: &mut [Option<Vec<f64>>], id: TensorId, len: usize) -> &mut Vec<f64> {
        grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Reverse sweep from a scalar root. Each node is visited exactly once.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape {
                op: "backward root must be scalar",
                lhs: self.value(root).shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                    if self.nodes[a.0].needs_grad {
                        let ga = Self::acc(&mut grads, a, m * k);
                        linalg::gemm_nt(m, n, k, 1.0, &g, vb.data(), 1.0, ga);
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = Self::acc(&mut grads, b, k * n);
                        linalg::gemm_tn(k, m, n, 1.0, va.data(), &g, 1.0, gb);
                    }
                }
                Op::MatmulNt { a, b } => {
                    let (a, b) = (*a, *b);
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                    if self.nodes[a.0].needs_grad {
                        let ga = Self::acc(&mut grads, a, m * k);
                        linalg::gemm(m, n, k, 1.0, &g, vb.data(), 1.0, ga);
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = Self::acc(&mut grads, b, n * k);
                        linalg::gemm_tn(n, m, k, 1.0, &g, va.data(), 1.0, gb);
                    }
                }
                Op::Linear { x, w, bias } => {
                    let (x, w, bias) = (*x, *w, *bias);
                    let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                    let (r, i, o) = (vx.rows(), vx.cols(), vw.rows());
                    if self.nodes[x.0].needs_grad {
                        let gx = Self::acc(&mut grads, x, r * i);
                        linalg::gemm(r, o, i, 1.0, &g, vw.data(), 1.0, gx);
                    }
                    if self.nodes[w.0].needs_grad {
                        let gw = Self::acc(&mut grads, w, o * i);
                        linalg::gemm_tn(o, r, i, 1.0, &g, vx.data(), 1.0, gw);
                    }
                    if let Some(b) = bias {
                        if self.nodes[b.0].needs_grad {
                            let gb = Self::acc(&mut grads, b, o);
                            for row in g.chunks(o) {
                                for (gbv, &gv) in gb.iter_mut().zip(row) {
                                    *gbv += gv;
                                }
                            }
                        }
                    }
                }
                Op::Add { a, b } | Op::Sub { a, b } => {
                    let negate_b = matches!(self.nodes[idx].op, Op::Sub { .. });
                    let (a, b) = (*a, *b);
                    for (side, sign) in [(a, 1.0), (b, if negate_b { -1.0 } else { 1.0 })] {
                        if !self.nodes[side.0].needs_grad {
                            continue;
                        }
                        let vlen = self.nodes[side.0].value.len();
                        let gs = Self::acc(&mut grads, side, vlen);
                        if vlen == 1 && g.len() > 1 {
                            gs[0] += sign * g.iter().sum::<f64>();
                        } else {
                            for (gv, &gi) in gs.iter_mut().zip(&g) {
                                *gv += sign * gi;
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    for (side, other) in [(a, b), (b, a)] {
                        if !self.nodes[side.0].needs_grad {
                            continue;
                        }
                        let vlen = self.nodes[side.0].value.len();
                        let vo = self.nodes[other.0].value.clone();
                        let gs = Self::acc(&mut grads, side, vlen);
                        if vlen == 1 && g.len() > 1 {
                            // scalar side: sum g * other
                            gs[0] += g.iter().zip(vo.data()).map(|(&gi, &ov)| gi * ov).sum::<f64>();
                        } else if vo.len() == 1 {
                            let ov = vo.data()[0];
                            for (gv, &gi) in gs.iter_mut().zip(&g) {
                                *gv += gi * ov;
                            }
                        } else {
                            for ((gv, &gi), &ov) in gs.iter_mut().zip(&g).zip(vo.data()) {
                                *gv += gi * ov;
                            }
                        }
                    }
                }
                Op::Scale { x, k } => {
                    let (x, k) = (*x, *k);
                    if self.nodes[x.0].needs_grad {
                        let vlen = self.nodes[x.0].value.len();
                        let gx = Self::acc(&mut grads, x, vlen);
                        for (gv, &gi) in gx.iter_mut().zip(&g) {
                            *gv += k * gi;
                        }
                    }
                }
                Op::Gelu { x } => {
                    let x = *x;
                    if self.nodes[x.0].needs_grad {
                        let vx = self.nodes[x.0].value.clone();
                        let gx = Self::acc(&mut grads, x, vx.len());
                        for ((gv, &gi), &xv) in gx.iter_mut().zip(&g).zip(vx.data()) {
                            *gv += gi * gelu_grad_scalar(xv);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    rstd,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let (mean, rstd) = (mean.clone(), rstd.clone());
                    let vx = self.nodes[x.0].value.clone();
                    let vg = self.nodes[gamma.0].value.clone();
                    let d = *vx.shape().last().unwrap();
                    let rows = vx.len() / d;
                    let needs_x = self.nodes[x.0].needs_grad;
                    let needs_g = self.nodes[gamma.0].needs_grad;
                    let needs_b = self.nodes[beta.0].needs_grad;
                    if needs_x {
                        let gx = Self::acc(&mut grads, x, vx.len());
                        for r in 0..rows {
                            let xr = &vx.data()[r * d..(r + 1) * d];
                            let gr = &g[r * d..(r + 1) * d];
                            let (mu, rs) = (mean[r], rstd[r]);
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..d {
                                let gg = gr[j] * vg.data()[j];
                                let xh = (xr[j] - mu) * rs;
                                m1 += gg;
                                m2 += gg * xh;
                            }
                            m1 /= d as f64;
                            m2 /= d as f64;
                            let go = &mut gx[r * d..(r + 1) * d];
                            for j in 0..d {
                                let gg = gr[j] * vg.data()[j];
                                let xh = (xr[j] - mu) * rs;
                                go[j] += rs * (gg - m1 - xh * m2);
                            }
                        }
                    }
                    if needs_g {
                        let gg = Self::acc(&mut grads, gamma, d);
                        for r in 0..rows {
                            let xr = &vx.data()[r * d..(r + 1) * d];
                            let gr = &g[r * d..(r + 1) * d];
                            for j in 0..d {
                                gg[j] += gr[j] * (xr[j] - mean[r]) * rstd[r];
                            }
                        }
                    }
                    if needs_b {
                        let gb = Self::acc(&mut grads, beta, d);
                        for r in 0..rows {
                            let gr = &g[r * d..(r + 1) * d];
                            for j in 0..d {
                                gb[j] += gr[j];
                            }
                        }
                    }
                }
                Op::SoftmaxRows { x } => {
                    let x = *x;
                    if self.nodes[x.0].needs_grad {
                        let y = self.nodes[idx].value.clone();
                        let d = y.cols();
                        let gx = Self::acc(&mut grads, x, y.len());
                        for (r, (yr, gr)) in y.data().chunks(d).zip(g.chunks(d)).enumerate() {
                            let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                            let go = &mut gx[r * d..(r + 1) * d];
                            for j in 0..d {
                                go[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::Transpose { x } => {
                    let x = *x;
                    if self.nodes[x.0].needs_grad {
                        let vx_shape = self.nodes[x.0].value.shape().to_vec();
                        let (r, c) = (vx_shape[0], vx_shape[1]);
                        let gx = Self::acc(&mut grads, x, r * c);
                        // g has shape [c, r]
                        for i in 0..c {
                            for j in 0..r {
                                gx[j * c + i] += g[i * r + j];
                            }
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let parts = parts.clone();
                    let c = self.nodes[idx].value.cols();
                    let mut row = 0;
                    for p in parts {
                        let pr = self.nodes[p.0].value.rows();
                        if self.nodes[p.0].needs_grad {
                            let gp = Self::acc(&mut grads, p, pr * c);
                            for (gv, &gi) in gp.iter_mut().zip(&g[row * c..(row + pr) * c]) {
                                *gv += gi;
                            }
                        }
                        row += pr;
                    }
                }
                Op::SliceRows { x, start } => {
                    let (x, start) = (*x, *start);
                    if self.nodes[x.0].needs_grad {
                        let vx = &self.nodes[x.0].value;
                        let (r, c) = (vx.rows(), vx.cols());
                        let gx = Self::acc(&mut grads, x, r * c);
                        for (gv, &gi) in gx[start * c..].iter_mut().zip(&g) {
                            *gv += gi;
                        }
                    }
                }
                Op::Reshape { x } => {
                    let x = *x;
                    if self.nodes[x.0].needs_grad {
                        let vlen = self.nodes[x.0].value.len();
                        let gx = Self::acc(&mut grads, x, vlen);
                        for (gv, &gi) in gx.iter_mut().zip(&g) {
                            *gv += gi;
                        }
                    }
                }
                Op::RamEnsemble { x, keep } => {
                    let (x, keep) = (*x, *keep);
                    if self.nodes[x.0].needs_grad {
                        let vx = &self.nodes[x.0].value;
                        let (n, d) = (vx.rows(), vx.cols());
                        let mut gcol = vec![0.0; d];
                        for row in g.chunks(d) {
                            for (s, &gv) in gcol.iter_mut().zip(row) {
                                *s += gv;
                            }
                        }
                        let gx = Self::acc(&mut grads, x, n * d);
                        for row in gx.chunks_mut(d) {
                            for (gv, &s) in row.iter_mut().zip(&gcol) {
                                *gv += keep * s;
                            }
                        }
                    }
                }
                Op::SumAll { x } => {
                    let x = *x;
                    if self.nodes[x.0].needs_grad {
                        let vlen = self.nodes[x.0].value.len();
                        let g0 = g[0];
                        let gx = Self::acc(&mut grads, x, vlen);
                        for gv in gx.iter_mut() {
                            *gv += g0;
                        }
                    }
                }
                Op::MeanAll { x } => {
                    let x = *x;
                    if self.nodes[x.0].needs_grad {
                        let vlen = self.nodes[x.0].value.len();
                        let g0 = g[0] / vlen as f64;
                        let gx = Self::acc(&mut grads, x, vlen);
                        for gv in gx.iter_mut() {
                            *gv += g0;
                        }
                    }
                }
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}
