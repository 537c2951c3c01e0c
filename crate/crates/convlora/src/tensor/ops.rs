//! Forward builders for every differentiable op.

use super::{axis_split, bilinear_taps, numel, strides, Graph, Op, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) fn sigmoid_s<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softplus_s<F: Scalar>(x: F) -> F {
    // max(x,0) + ln(1 + e^-|x|), overflow-safe on both tails
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.044715;

pub(crate) fn gelu_s<F: Scalar>(x: F) -> F {
    let b = F::c((2.0 / std::f64::consts::PI).sqrt());
    let u = b * (x + F::c(GELU_C) * x * x * x);
    F::c(0.5) * x * (F::one() + u.tanh())
}

pub(crate) fn gelu_deriv<F: Scalar>(x: F) -> F {
    let b = F::c((2.0 / std::f64::consts::PI).sqrt());
    let u = b * (x + F::c(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = b * (F::one() + F::c(3.0 * GELU_C) * x * x);
    F::c(0.5) * (F::one() + t) + F::c(0.5) * x * (F::one() - t * t) * du
}

/// Softmax of one row into `out`; returns Err on an all-(-inf) row.
pub(crate) fn softmax_row<F: Scalar>(row: &[F], out: &mut [F]) -> Result<()> {
    let mut mx = F::neg_infinity();
    for &v in row {
        if v > mx {
            mx = v;
        }
    }
    if mx == F::neg_infinity() {
        return Err(Error::DegenerateGate);
    }
    let mut sum = F::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - mx).exp(); // exp(-inf) = 0 exactly
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
    Ok(())
}

/// Top-k survivor indices of a row, ties to the lowest index.
pub(crate) fn topk_indices<F: Scalar>(row: &[F], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("NaN in top-k"));
    idx.truncate(k);
    idx
}

impl<F: Scalar> Tensor<F> {
    fn binary_check(&self, other: &Tensor<F>, what: &str) -> Result<()> {
        if !same_graph(&self.graph, &other.graph) {
            return Err(Error::Argument(format!("{what}: tensors from different graphs")));
        }
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::Dimension(format!("{what}: shapes {a:?} vs {b:?}")));
        }
        Ok(())
    }

    fn elementwise2(
        &self,
        other: &Tensor<F>,
        op: fn(usize, usize) -> Op<F>,
        f: impl Fn(F, F) -> F,
        name: &'static str,
    ) -> Result<Tensor<F>> {
        self.binary_check(other, name)?;
        let g = &self.graph;
        let (data, shape, rg) = {
            let nodes = g.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let data: Vec<F> = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
            (data, a.shape.clone(), a.rg || b.rg)
        };
        g.push(data, shape, rg, op(self.id, other.id), name, false)
    }

    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.elementwise2(other, Op::Add, |x, y| x + y, "add")
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.elementwise2(other, Op::Sub, |x, y| x - y, "sub")
    }

    pub fn mul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.elementwise2(other, Op::Mul, |x, y| x * y, "mul")
    }

    pub fn div(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.elementwise2(other, Op::Div, |x, y| x / y, "div")
    }

    fn elementwise1(
        &self,
        op: fn(usize) -> Op<F>,
        f: impl Fn(F) -> F,
        name: &'static str,
    ) -> Result<Tensor<F>> {
        let g = &self.graph;
        let (data, shape, rg) = {
            let nodes = g.nodes.borrow();
            let n = &nodes[self.id];
            (n.data.iter().map(|&x| f(x)).collect(), n.shape.clone(), n.rg)
        };
        g.push(data, shape, rg, op(self.id), name, false)
    }

    pub fn neg(&self) -> Result<Tensor<F>> {
        self.elementwise1(Op::Neg, |x| -x, "neg")
    }

    pub fn sigmoid(&self) -> Result<Tensor<F>> {
        self.elementwise1(Op::Sigmoid, sigmoid_s, "sigmoid")
    }

    pub fn softplus(&self) -> Result<Tensor<F>> {
        self.elementwise1(Op::Softplus, softplus_s, "softplus")
    }

    pub fn gelu(&self) -> Result<Tensor<F>> {
        self.elementwise1(Op::Gelu, gelu_s, "gelu")
    }

    /// y = a*x + b elementwise.
    pub fn affine(&self, a: F, b: F) -> Result<Tensor<F>> {
        let g = &self.graph;
        let (data, shape, rg) = {
            let nodes = g.nodes.borrow();
            let n = &nodes[self.id];
            (
                n.data.iter().map(|&x| a * x + b).collect(),
                n.shape.clone(),
                n.rg,
            )
        };
        g.push(data, shape, rg, Op::Affine { x: self.id, a }, "affine", false)
    }

    pub fn scale(&self, a: F) -> Result<Tensor<F>> {
        self.affine(a, F::zero())
    }

    /// Batched matrix product: [.., m, k] x [.., k, n] -> [.., m, n] with
    /// identical leading dims.
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let g = &self.graph;
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Dimension(format!(
                "matmul needs >=2-d operands, got {sa:?} and {sb:?}"
            )));
        }
        let (la, lb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        if la != lb {
            return Err(Error::Dimension(format!(
                "matmul leading dims differ: {sa:?} vs {sb:?}"
            )));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dims differ: {sa:?} vs {sb:?}"
            )));
        }
        let batch: usize = la.iter().product();
        let mut out_shape = la.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let (data, rg) = {
            let nodes = g.nodes.borrow();
            let (na, nb) = (&nodes[self.id], &nodes[other.id]);
            let mut out = vec![F::zero(); batch * m * n];
            for t in 0..batch {
                let a = &na.data[t * m * k..(t + 1) * m * k];
                let b = &nb.data[t * k * n..(t + 1) * k * n];
                let c = &mut out[t * m * n..(t + 1) * m * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = a[i * k + p];
                        if av == F::zero() {
                            continue;
                        }
                        let brow = &b[p * n..(p + 1) * n];
                        let crow = &mut c[i * n..(i + 1) * n];
                        for j in 0..n {
                            crow[j] += av * brow[j];
                        }
                    }
                }
            }
            (out, na.rg || nb.rg)
        };
        g.push(
            data,
            out_shape,
            rg,
            Op::MatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
            },
            "matmul",
            false,
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<F>> {
        if numel(shape) != self.numel() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        let g = &self.graph;
        let (data, rg) = {
            let nodes = g.nodes.borrow();
            let n = &nodes[self.id];
            (n.data.clone(), n.rg)
        };
        // Inf may legally pass through a reshape of a masked leaf.
        g.push(data, shape.to_vec(), rg, Op::Reshape { x: self.id }, "reshape", true)
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<F>> {
        let shape = self.shape();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Argument(format!("invalid permutation {axes:?} for {shape:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let in_str = strides(&shape);
        let out_str = strides(&out_shape);
        let g = &self.graph;
        let (data, rg) = {
            let nodes = g.nodes.borrow();
            let n = &nodes[self.id];
            let mut out = vec![F::zero(); n.data.len()];
            let total = n.data.len();
            for oi in 0..total {
                let mut rem = oi;
                let mut ii = 0;
                for d in 0..nd {
                    let c = rem / out_str[d];
                    rem %= out_str[d];
                    ii += c * in_str[axes[d]];
                }
                out[oi] = n.data[ii];
            }
            (out, n.rg)
        };
        g.push(
            data,
            out_shape,
            rg,
            Op::Permute {
                x: self.id,
                axes: axes.to_vec(),
            },
            "permute",
            true,
        )
    }

    /// 3x3 conv, stride 1, zero padding 1. x: [B,C,H,W], kernel: [C2,C,3,3],
    /// bias: [C2].
    pub fn conv3x3(&self, kernel: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
        let xs = self.shape();
        let ks = kernel.shape();
        let bs = bias.shape();
        if xs.len() != 4 || ks.len() != 4 || ks[2] != 3 || ks[3] != 3 {
            return Err(Error::Dimension(format!("conv3x3 shapes x={xs:?} kernel={ks:?}")));
        }
        if ks[1] != xs[1] {
            return Err(Error::Dimension(format!(
                "conv3x3 channel mismatch: input has {} channels, kernel expects {}",
                xs[1], ks[1]
            )));
        }
        if bs != [ks[0]] {
            return Err(Error::Dimension(format!("conv3x3 bias shape {bs:?}, want [{}]", ks[0])));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let c2 = ks[0];
        let g = &self.graph;
        let (data, rg) = {
            let nodes = g.nodes.borrow();
            let (nx, nk, nb) = (&nodes[self.id], &nodes[kernel.id], &nodes[bias.id]);
            let mut out = vec![F::zero(); b * c2 * h * w];
            for bi in 0..b {
                for co in 0..c2 {
                    let kbase = co * c * 9;
                    let obase = (bi * c2 + co) * h * w;
                    for y in 0..h {
                        for x in 0..w {
                            let mut acc = nb.data[co];
                            for ci in 0..c {
                                let ibase = (bi * c + ci) * h * w;
                                let kc = kbase + ci * 9;
                                for dy in 0..3usize {
                                    let sy = y as isize + dy as isize - 1;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for dx in 0..3usize {
                                        let sx = x as isize + dx as isize - 1;
                                        if sx < 0 || sx >= w as isize {
                                            continue;
                                        }
                                        acc += nk.data[kc + dy * 3 + dx]
                                            * nx.data[ibase + sy as usize * w + sx as usize];
                                    }
                                }
                            }
                            out[obase + y * w + x] = acc;
                        }
                    }
                }
            }
            (out, nx.rg || nk.rg || nb.rg)
        };
        g.push(
            data,
            vec![b, c2, h, w],
            rg,
            Op::Conv3x3 {
                x: self.id,
                kernel: kernel.id,
                bias: bias.id,
            },
            "conv3x3",
            false,
        )
    }

    /// Bilinear resample of [B,C,H,W] to explicit target extents.
    pub fn interpolate_to(&self, out_h: usize, out_w: usize) -> Result<Tensor<F>> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(Error::Dimension(format!("interpolate expects 4-d NCHW, got {xs:?}")));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::Argument("interpolate target extent must be >= 1".into()));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let g = &self.graph;
        let (data, rg) = {
            let nodes = g.nodes.borrow();
            let n = &nodes[self.id];
            let mut out = vec![F::zero(); b * c * out_h * out_w];
            for bc in 0..b * c {
                let ib = bc * h * w;
                let ob = bc * out_h * out_w;
                for oy in 0..out_h {
                    let (y0, y1, ty) = bilinear_taps(out_h, h, oy);
                    let (wy0, wy1) = (F::c(1.0 - ty), F::c(ty));
                    for ox in 0..out_w {
                        let (x0, x1, tx) = bilinear_taps(out_w, w, ox);
                        let (wx0, wx1) = (F::c(1.0 - tx), F::c(tx));
                        out[ob + oy * out_w + ox] = wy0
                            * (wx0 * n.data[ib + y0 * w + x0] + wx1 * n.data[ib + y0 * w + x1])
                            + wy1
                                * (wx0 * n.data[ib + y1 * w + x0]
                                    + wx1 * n.data[ib + y1 * w + x1]);
                    }
                }
            }
            (out, n.rg)
        };
        g.push(
            data,
            vec![b, c, out_h, out_w],
            rg,
            Op::Bilinear { x: self.id },
            "interpolate_bilinear",
            false,
        )
    }

    /// Bilinear resample by a positive scale; target extents are
    /// ceil(scale * extent).
    pub fn interpolate_bilinear(&self, scale: f64) -> Result<Tensor<F>> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Argument(format!("interpolate scale must be positive, got {scale}")));
        }
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(Error::Dimension(format!("interpolate expects 4-d NCHW, got {xs:?}")));
        }
        let out_h = (scale * xs[2] as f64).ceil() as usize;
        let out_w = (scale * xs[3] as f64).ceil() as usize;
        self.interpolate_to(out_h.max(1), out_w.max(1))
    }

    pub fn softmax_axis(&self, axis: usize) -> Result<Tensor<F>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Argument(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let g = &self.graph;
        let (data, rg) = {
            let nodes = g.nodes.borrow();
            let n = &nodes[self.id];
            let mut out = vec![F::zero(); n.data.len()];
            let mut row = vec![F::zero(); len];
            let mut res = vec![F::zero(); len];
            for o in 0..outer {
                for i in 0..inner {
                    for j in 0..len {
                        row[j] = n.data[(o * len + j) * inner + i];
                    }
                    softmax_row(&row, &mut res)?;
                    for j in 0..len {
                        out[(o * len + j) * inner + i] = res[j];
                    }
                }
            }
            (out, n.rg)
        };
        g.push(data, shape, rg, Op::Softmax { x: self.id, axis }, "softmax", false)
    }

    pub fn log_softmax_axis(&self, axis: usize) -> Result<Tensor<F>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Argument(format!(
                "log_softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let g = &self.graph;
        let (data, rg) = {
            let nodes = g.nodes.borrow();
            let n = &nodes[self.id];
            let mut out = vec![F::zero(); n.data.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let mut mx = F::neg_infinity();
                    for j in 0..len {
                        mx = mx.max(n.data[(o * len + j) * inner + i]);
                    }
                    if mx == F::neg_infinity() {
                        return Err(Error::DegenerateGate);
                    }
                    let mut sum = F::zero();
                    for j in 0..len {
                        sum += (n.data[(o * len + j) * inner + i] - mx).exp();
                    }
                    let lse = mx + sum.ln();
                    for j in 0..len {
                        out[(o * len + j) * inner + i] = n.data[(o * len + j) * inner + i] - lse;
                    }
                }
            }
            (out, n.rg)
        };
        g.push(
            data,
            shape,
            rg,
            Op::LogSoftmax { x: self.id, axis },
            "log_softmax",
            false,
        )
    }

    /// Keep-top-k + softmax along the last axis; non-survivors are exactly 0.
    pub fn topk_softmax(&self, k: usize) -> Result<Tensor<F>> {
        let shape = self.shape();
        let n = *shape.last().ok_or_else(|| Error::Dimension("topk_softmax on 0-d".into()))?;
        if k == 0 || k > n {
            return Err(Error::Config(format!("top-k {k} out of range for {n} experts")));
        }
        let rows = numel(&shape) / n;
        let g = &self.graph;
        let (data, rg) = {
            let nodes = g.nodes.borrow();
            let nx = &nodes[self.id];
            let mut out = vec![F::zero(); nx.data.len()];
            for r in 0..rows {
                let row = &nx.data[r * n..(r + 1) * n];
                let kept = topk_indices(row, k);
                let mx = kept.iter().map(|&i| row[i]).fold(F::neg_infinity(), F::max);
                if mx == F::neg_infinity() {
                    return Err(Error::DegenerateGate);
                }
                let mut sum = F::zero();
                for &i in &kept {
                    sum += (row[i] - mx).exp();
                }
                for &i in &kept {
                    out[r * n + i] = (row[i] - mx).exp() / sum;
                }
            }
            (out, nx.rg)
        };
        g.push(
            data,
            shape,
            rg,
            Op::TopKSoftmax { x: self.id },
            "topk_softmax",
            false,
        )
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<F>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<F>> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor<F>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Argument(format!("reduce axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let g = &self.graph;
        let (data, rg) = {
            let nodes = g.nodes.borrow();
            let n = &nodes[self.id];
            let mut out = vec![F::zero(); outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += n.data[(o * len + j) * inner + i];
                    }
                }
            }
            if mean {
                let inv = F::one() / F::c(len as f64);
                for v in out.iter_mut() {
                    *v = *v * inv;
                }
            }
            (out, n.rg)
        };
        g.push(
            data,
            out_shape,
            rg,
            Op::SumAxis {
                x: self.id,
                axis,
                mean,
            },
            "sum_axis",
            false,
        )
    }

    pub fn sum_all(&self) -> Result<Tensor<F>> {
        self.reduce_all(false)
    }

    pub fn mean_all(&self) -> Result<Tensor<F>> {
        self.reduce_all(true)
    }

    fn reduce_all(&self, mean: bool) -> Result<Tensor<F>> {
        let g = &self.graph;
        let (mut total, count, rg) = {
            let nodes = g.nodes.borrow();
            let n = &nodes[self.id];
            (n.data.iter().copied().sum::<F>(), n.data.len(), n.rg)
        };
        if mean {
            total = total / F::c(count as f64);
        }
        g.push(
            vec![total],
            vec![1],
            rg,
            Op::SumAll { x: self.id, mean },
            "sum_all",
            false,
        )
    }

    /// Add `small` broadcast over leading axes; small.shape must equal a
    /// suffix of self.shape.
    pub fn add_broadcast(&self, small: &Tensor<F>) -> Result<Tensor<F>> {
        let bs = self.shape();
        let ss = small.shape();
        if ss.len() > bs.len() || ss[..] != bs[bs.len() - ss.len()..] {
            return Err(Error::Dimension(format!(
                "broadcast add: {ss:?} is not a suffix of {bs:?}"
            )));
        }
        let g = &self.graph;
        let (data, rg) = {
            let nodes = g.nodes.borrow();
            let (nb, ns) = (&nodes[self.id], &nodes[small.id]);
            let sl = ns.data.len();
            let data: Vec<F> = nb
                .data
                .iter()
                .enumerate()
                .map(|(i, &v)| v + ns.data[i % sl])
                .collect();
            (data, nb.rg || ns.rg)
        };
        g.push(
            data,
            bs,
            rg,
            Op::AddBroadcast {
                x: self.id,
                small: small.id,
            },
            "add_broadcast",
            false,
        )
    }

    /// y[b, ...] = x[b, ...] * s[b].
    pub fn mul_batch_scalar(&self, s: &Tensor<F>) -> Result<Tensor<F>> {
        let xs = self.shape();
        let ss = s.shape();
        if xs.is_empty() || ss != [xs[0]] {
            return Err(Error::Dimension(format!(
                "mul_batch_scalar: x {xs:?} vs scalars {ss:?}"
            )));
        }
        let per = numel(&xs) / xs[0];
        let g = &self.graph;
        let (data, rg) = {
            let nodes = g.nodes.borrow();
            let (nx, ns) = (&nodes[self.id], &nodes[s.id]);
            let data: Vec<F> = nx
                .data
                .iter()
                .enumerate()
                .map(|(i, &v)| v * ns.data[i / per])
                .collect();
            (data, nx.rg || ns.rg)
        };
        g.push(
            data,
            xs,
            rg,
            Op::MulBatchScalar {
                x: self.id,
                s: s.id,
            },
            "mul_batch_scalar",
            false,
        )
    }

    /// Gather along the last axis.
    pub fn select_last(&self, idx: &[usize]) -> Result<Tensor<F>> {
        let shape = self.shape();
        let n = *shape.last().ok_or_else(|| Error::Dimension("select_last on 0-d".into()))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Argument(format!("select_last index {bad} out of range {n}")));
        }
        let rows = numel(&shape) / n;
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = idx.len();
        let g = &self.graph;
        let (data, rg) = {
            let nodes = g.nodes.borrow();
            let nx = &nodes[self.id];
            let mut out = Vec::with_capacity(rows * idx.len());
            for r in 0..rows {
                for &i in idx {
                    out.push(nx.data[r * n + i]);
                }
            }
            (out, nx.rg)
        };
        g.push(
            data,
            out_shape,
            rg,
            Op::SelectLast {
                x: self.id,
                idx: idx.to_vec(),
            },
            "select_last",
            true,
        )
    }

    /// Gather along the first axis.
    pub fn select_batch(&self, idx: &[usize]) -> Result<Tensor<F>> {
        let shape = self.shape();
        let b = *shape.first().ok_or_else(|| Error::Dimension("select_batch on 0-d".into()))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= b) {
            return Err(Error::Argument(format!("select_batch index {bad} out of range {b}")));
        }
        let per = numel(&shape) / b;
        let mut out_shape = shape.clone();
        out_shape[0] = idx.len();
        let g = &self.graph;
        let (data, rg) = {
            let nodes = g.nodes.borrow();
            let nx = &nodes[self.id];
            let mut out = Vec::with_capacity(idx.len() * per);
            for &i in idx {
                out.extend_from_slice(&nx.data[i * per..(i + 1) * per]);
            }
            (out, nx.rg)
        };
        g.push(
            data,
            out_shape,
            rg,
            Op::SelectBatch {
                x: self.id,
                idx: idx.to_vec(),
            },
            "select_batch",
            true,
        )
    }

    /// Scatter rows into a zero tensor of `batch` rows (inverse of
    /// select_batch with distinct indices).
    pub fn scatter_batch(&self, idx: &[usize], batch: usize) -> Result<Tensor<F>> {
        let shape = self.shape();
        if shape.first() != Some(&idx.len()) {
            return Err(Error::Dimension(format!(
                "scatter_batch: {} rows but {} indices",
                shape.first().copied().unwrap_or(0),
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= batch) {
            return Err(Error::Argument(format!("scatter_batch index {bad} out of range {batch}")));
        }
        let per = numel(&shape) / shape[0].max(1);
        let mut out_shape = shape.clone();
        out_shape[0] = batch;
        let g = &self.graph;
        let (data, rg) = {
            let nodes = g.nodes.borrow();
            let nx = &nodes[self.id];
            let mut out = vec![F::zero(); batch * per];
            for (j, &i) in idx.iter().enumerate() {
                for p in 0..per {
                    out[i * per + p] += nx.data[j * per + p];
                }
            }
            (out, nx.rg)
        };
        g.push(
            data,
            out_shape,
            rg,
            Op::ScatterBatch {
                x: self.id,
                idx: idx.to_vec(),
            },
            "scatter_batch",
            true,
        )
    }

    /// Stack `copies` copies along a new leading axis.
    pub fn expand_leading(&self, copies: usize) -> Result<Tensor<F>> {
        if copies == 0 {
            return Err(Error::Argument("expand_leading needs >= 1 copy".into()));
        }
        let shape = self.shape();
        let mut out_shape = vec![copies];
        out_shape.extend_from_slice(&shape);
        let g = &self.graph;
        let (data, rg) = {
            let nodes = g.nodes.borrow();
            let nx = &nodes[self.id];
            let mut out = Vec::with_capacity(copies * nx.data.len());
            for _ in 0..copies {
                out.extend_from_slice(&nx.data);
            }
            (out, nx.rg)
        };
        g.push(
            data,
            out_shape,
            rg,
            Op::ExpandLeading {
                x: self.id,
                copies,
            },
            "expand_leading",
            true,
        )
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, gamma: &Tensor<F>, beta: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
        let shape = self.shape();
        let d = *shape.last().ok_or_else(|| Error::Dimension("layer_norm on 0-d".into()))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm gain/bias must be [{d}], got {:?} / {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let rows = numel(&shape) / d;
        let g = &self.graph;
        let (data, rg) = {
            let nodes = g.nodes.borrow();
            let (nx, ng, nb) = (&nodes[self.id], &nodes[gamma.id], &nodes[beta.id]);
            let mut out = vec![F::zero(); nx.data.len()];
            let inv_d = F::one() / F::c(d as f64);
            for r in 0..rows {
                let row = &nx.data[r * d..(r + 1) * d];
                let mu = row.iter().copied().sum::<F>() * inv_d;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() * inv_d;
                let inv_sd = F::one() / (var + eps).sqrt();
                for j in 0..d {
                    out[r * d + j] = ng.data[j] * (row[j] - mu) * inv_sd + nb.data[j];
                }
            }
            (out, nx.rg || ng.rg || nb.rg)
        };
        g.push(
            data,
            shape,
            rg,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
            },
            "layer_norm",
            false,
        )
    }

    /// Spatial mean of NCHW feature maps: [B,C,H,W] -> [B,C].
    pub fn global_avg_pool(&self) -> Result<Tensor<F>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::Dimension(format!("global_avg_pool expects NCHW, got {s:?}")));
        }
        self.reshape(&[s[0], s[1], s[2] * s[3]])?.mean_axis(2)
    }
}

fn same_graph<F: Scalar>(a: &Graph<F>, b: &Graph<F>) -> bool {
    std::rc::Rc::ptr_eq(&a.nodes, &b.nodes)
}
