//! Reverse replay of the tape.

use super::ops::{gelu_deriv, sigmoid_s};
use super::{axis_split, bilinear_taps, strides, Graph, Node, Op, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Gradients of one backward pass, indexed by node id.
pub struct Gradients<F: Scalar> {
    g: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss w.r.t. `t`, if any was accumulated.
    pub fn wrt(&self, t: &Tensor<F>) -> Option<&[F]> {
        self.g.get(t.id).and_then(|o| o.as_deref())
    }
}

fn grad_buf<'a, F: Scalar>(
    g: &'a mut [Option<Vec<F>>],
    nodes: &[Node<F>],
    id: usize,
) -> Option<&'a mut [F]> {
    if !nodes[id].rg {
        return None;
    }
    if g[id].is_none() {
        g[id] = Some(vec![F::zero(); nodes[id].data.len()]);
    }
    g[id].as_deref_mut()
}

impl<F: Scalar> Graph<F> {
    /// Populate gradients of every `requires_grad` node reachable from a
    /// scalar loss. Accumulation is additive across fan-out.
    pub fn backward(&self, loss: &Tensor<F>) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].data.len() != 1 {
            return Err(Error::Argument(format!(
                "backward requires a scalar loss, got {} elements",
                nodes[loss.id].data.len()
            )));
        }
        let mut g: Vec<Option<Vec<F>>> = (0..nodes.len()).map(|_| None).collect();
        g[loss.id] = Some(vec![F::one()]);

        for id in (0..=loss.id).rev() {
            if !nodes[id].rg {
                continue;
            }
            let Some(gy) = g[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if let Some(da) = grad_buf(&mut g, &nodes, *a) {
                        for (d, &v) in da.iter_mut().zip(&gy) {
                            *d += v;
                        }
                    }
                    if let Some(db) = grad_buf(&mut g, &nodes, *b) {
                        for (d, &v) in db.iter_mut().zip(&gy) {
                            *d += v;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(da) = grad_buf(&mut g, &nodes, *a) {
                        for (d, &v) in da.iter_mut().zip(&gy) {
                            *d += v;
                        }
                    }
                    if let Some(db) = grad_buf(&mut g, &nodes, *b) {
                        for (d, &v) in db.iter_mut().zip(&gy) {
                            *d -= v;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if let Some(da) = grad_buf(&mut g, &nodes, *a) {
                        for i in 0..gy.len() {
                            da[i] += gy[i] * nodes[*b].data[i];
                        }
                    }
                    if let Some(db) = grad_buf(&mut g, &nodes, *b) {
                        for i in 0..gy.len() {
                            db[i] += gy[i] * nodes[*a].data[i];
                        }
                    }
                }
                Op::Div(a, b) => {
                    if let Some(da) = grad_buf(&mut g, &nodes, *a) {
                        for i in 0..gy.len() {
                            da[i] += gy[i] / nodes[*b].data[i];
                        }
                    }
                    if let Some(db) = grad_buf(&mut g, &nodes, *b) {
                        for i in 0..gy.len() {
                            let bv = nodes[*b].data[i];
                            db[i] -= gy[i] * nodes[*a].data[i] / (bv * bv);
                        }
                    }
                }
                Op::Neg(x) => {
                    if let Some(dx) = grad_buf(&mut g, &nodes, *x) {
                        for (d, &v) in dx.iter_mut().zip(&gy) {
                            *d -= v;
                        }
                    }
                }
                Op::Affine { x, a, .. } => {
                    if let Some(dx) = grad_buf(&mut g, &nodes, *x) {
                        for (d, &v) in dx.iter_mut().zip(&gy) {
                            *d += *a * v;
                        }
                    }
                }
                Op::MatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                } => {
                    let (batch, m, k, n) = (*batch, *m, *k, *n);
                    if nodes[*a].rg {
                        let bdata = &nodes[*b].data;
                        let da = grad_buf(&mut g, &nodes, *a).unwrap();
                        for t in 0..batch {
                            let gyt = &gy[t * m * n..(t + 1) * m * n];
                            let bt = &bdata[t * k * n..(t + 1) * k * n];
                            let dat = &mut da[t * m * k..(t + 1) * m * k];
                            for i in 0..m {
                                for j in 0..n {
                                    let gv = gyt[i * n + j];
                                    if gv == F::zero() {
                                        continue;
                                    }
                                    for p in 0..k {
                                        dat[i * k + p] += gv * bt[p * n + j];
                                    }
                                }
                            }
                        }
                    }
                    if nodes[*b].rg {
                        let adata = &nodes[*a].data;
                        let db = grad_buf(&mut g, &nodes, *b).unwrap();
                        for t in 0..batch {
                            let gyt = &gy[t * m * n..(t + 1) * m * n];
                            let at = &adata[t * m * k..(t + 1) * m * k];
                            let dbt = &mut db[t * k * n..(t + 1) * k * n];
                            for i in 0..m {
                                for p in 0..k {
                                    let av = at[i * k + p];
                                    if av == F::zero() {
                                        continue;
                                    }
                                    for j in 0..n {
                                        dbt[p * n + j] += av * gyt[i * n + j];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Reshape { x } => {
                    if let Some(dx) = grad_buf(&mut g, &nodes, *x) {
                        for (d, &v) in dx.iter_mut().zip(&gy) {
                            *d += v;
                        }
                    }
                }
                Op::Permute { x, axes } => {
                    if nodes[*x].rg {
                        let in_str = strides(&nodes[*x].shape);
                        let out_str = strides(&node.shape);
                        let nd = axes.len();
                        let dx = grad_buf(&mut g, &nodes, *x).unwrap();
                        for (oi, &gv) in gy.iter().enumerate() {
                            let mut rem = oi;
                            let mut ii = 0;
                            for d in 0..nd {
                                let c = rem / out_str[d];
                                rem %= out_str[d];
                                ii += c * in_str[axes[d]];
                            }
                            dx[ii] += gv;
                        }
                    }
                }
                Op::Conv3x3 { x, kernel, bias } => {
                    let xs = &nodes[*x].shape;
                    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let c2 = nodes[*kernel].shape[0];
                    if nodes[*x].rg {
                        let kdata = &nodes[*kernel].data;
                        let dx = grad_buf(&mut g, &nodes, *x).unwrap();
                        for bi in 0..b {
                            for co in 0..c2 {
                                let kbase = co * c * 9;
                                let obase = (bi * c2 + co) * h * w;
                                for y in 0..h {
                                    for xx in 0..w {
                                        let gv = gy[obase + y * w + xx];
                                        if gv == F::zero() {
                                            continue;
                                        }
                                        for ci in 0..c {
                                            let ibase = (bi * c + ci) * h * w;
                                            let kc = kbase + ci * 9;
                                            for dy in 0..3usize {
                                                let sy = y as isize + dy as isize - 1;
                                                if sy < 0 || sy >= h as isize {
                                                    continue;
                                                }
                                                for dxk in 0..3usize {
                                                    let sx = xx as isize + dxk as isize - 1;
                                                    if sx < 0 || sx >= w as isize {
                                                        continue;
                                                    }
                                                    dx[ibase + sy as usize * w + sx as usize] +=
                                                        gv * kdata[kc + dy * 3 + dxk];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if nodes[*kernel].rg {
                        let xdata = &nodes[*x].data;
                        let dk = grad_buf(&mut g, &nodes, *kernel).unwrap();
                        for bi in 0..b {
                            for co in 0..c2 {
                                let kbase = co * c * 9;
                                let obase = (bi * c2 + co) * h * w;
                                for y in 0..h {
                                    for xx in 0..w {
                                        let gv = gy[obase + y * w + xx];
                                        if gv == F::zero() {
                                            continue;
                                        }
                                        for ci in 0..c {
                                            let ibase = (bi * c + ci) * h * w;
                                            let kc = kbase + ci * 9;
                                            for dy in 0..3usize {
                                                let sy = y as isize + dy as isize - 1;
                                                if sy < 0 || sy >= h as isize {
                                                    continue;
                                                }
                                                for dxk in 0..3usize {
                                                    let sx = xx as isize + dxk as isize - 1;
                                                    if sx < 0 || sx >= w as isize {
                                                        continue;
                                                    }
                                                    dk[kc + dy * 3 + dxk] += gv
                                                        * xdata
                                                            [ibase + sy as usize * w + sx as usize];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if nodes[*bias].rg {
                        let db = grad_buf(&mut g, &nodes, *bias).unwrap();
                        for bi in 0..b {
                            for co in 0..c2 {
                                let obase = (bi * c2 + co) * h * w;
                                for i in 0..h * w {
                                    db[co] += gy[obase + i];
                                }
                            }
                        }
                    }
                }
                Op::Bilinear { x } => {
                    if nodes[*x].rg {
                        let xs = &nodes[*x].shape;
                        let (h, w) = (xs[2], xs[3]);
                        let (out_h, out_w) = (node.shape[2], node.shape[3]);
                        let bc = xs[0] * xs[1];
                        let dx = grad_buf(&mut g, &nodes, *x).unwrap();
                        for t in 0..bc {
                            let ib = t * h * w;
                            let ob = t * out_h * out_w;
                            for oy in 0..out_h {
                                let (y0, y1, ty) = bilinear_taps(out_h, h, oy);
                                let (wy0, wy1) = (F::c(1.0 - ty), F::c(ty));
                                for ox in 0..out_w {
                                    let (x0, x1, tx) = bilinear_taps(out_w, w, ox);
                                    let (wx0, wx1) = (F::c(1.0 - tx), F::c(tx));
                                    let gv = gy[ob + oy * out_w + ox];
                                    dx[ib + y0 * w + x0] += gv * wy0 * wx0;
                                    dx[ib + y0 * w + x1] += gv * wy0 * wx1;
                                    dx[ib + y1 * w + x0] += gv * wy1 * wx0;
                                    dx[ib + y1 * w + x1] += gv * wy1 * wx1;
                                }
                            }
                        }
                    }
                }
                Op::Softmax { x, axis } => {
                    if nodes[*x].rg {
                        let y = &node.data;
                        let (outer, len, inner) = axis_split(&node.shape, *axis);
                        let dx = grad_buf(&mut g, &nodes, *x).unwrap();
                        for o in 0..outer {
                            for i in 0..inner {
                                let mut dot = F::zero();
                                for j in 0..len {
                                    let ix = (o * len + j) * inner + i;
                                    dot += gy[ix] * y[ix];
                                }
                                for j in 0..len {
                                    let ix = (o * len + j) * inner + i;
                                    dx[ix] += y[ix] * (gy[ix] - dot);
                                }
                            }
                        }
                    }
                }
                Op::LogSoftmax { x, axis } => {
                    if nodes[*x].rg {
                        let y = &node.data;
                        let (outer, len, inner) = axis_split(&node.shape, *axis);
                        let dx = grad_buf(&mut g, &nodes, *x).unwrap();
                        for o in 0..outer {
                            for i in 0..inner {
                                let mut gsum = F::zero();
                                for j in 0..len {
                                    gsum += gy[(o * len + j) * inner + i];
                                }
                                for j in 0..len {
                                    let ix = (o * len + j) * inner + i;
                                    dx[ix] += gy[ix] - y[ix].exp() * gsum;
                                }
                            }
                        }
                    }
                }
                Op::TopKSoftmax { x } => {
                    if nodes[*x].rg {
                        let y = &node.data;
                        let n = *node.shape.last().unwrap();
                        let rows = y.len() / n;
                        let dx = grad_buf(&mut g, &nodes, *x).unwrap();
                        for r in 0..rows {
                            let mut dot = F::zero();
                            for j in 0..n {
                                dot += gy[r * n + j] * y[r * n + j];
                            }
                            for j in 0..n {
                                let ix = r * n + j;
                                // masked entries have y = 0 and receive no gradient
                                dx[ix] += y[ix] * (gy[ix] - dot);
                            }
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    if nodes[*x].rg {
                        let y = &node.data;
                        let dx = grad_buf(&mut g, &nodes, *x).unwrap();
                        for i in 0..gy.len() {
                            dx[i] += gy[i] * y[i] * (F::one() - y[i]);
                        }
                    }
                }
                Op::Softplus(x) => {
                    if nodes[*x].rg {
                        let xd = &nodes[*x].data;
                        let dx = grad_buf(&mut g, &nodes, *x).unwrap();
                        for i in 0..gy.len() {
                            dx[i] += gy[i] * sigmoid_s(xd[i]);
                        }
                    }
                }
                Op::Gelu(x) => {
                    if nodes[*x].rg {
                        let xd = &nodes[*x].data;
                        let dx = grad_buf(&mut g, &nodes, *x).unwrap();
                        for i in 0..gy.len() {
                            dx[i] += gy[i] * gelu_deriv(xd[i]);
                        }
                    }
                }
                Op::SumAxis { x, axis, mean } => {
                    if nodes[*x].rg {
                        let (outer, len, inner) = axis_split(&nodes[*x].shape, *axis);
                        let coef = if *mean {
                            F::one() / F::c(len as f64)
                        } else {
                            F::one()
                        };
                        let dx = grad_buf(&mut g, &nodes, *x).unwrap();
                        for o in 0..outer {
                            for j in 0..len {
                                for i in 0..inner {
                                    dx[(o * len + j) * inner + i] += gy[o * inner + i] * coef;
                                }
                            }
                        }
                    }
                }
                Op::SumAll { x, mean } => {
                    if nodes[*x].rg {
                        let count = nodes[*x].data.len();
                        let coef = if *mean {
                            gy[0] / F::c(count as f64)
                        } else {
                            gy[0]
                        };
                        let dx = grad_buf(&mut g, &nodes, *x).unwrap();
                        for d in dx.iter_mut() {
                            *d += coef;
                        }
                    }
                }
                Op::AddBroadcast { x, small } => {
                    if let Some(dx) = grad_buf(&mut g, &nodes, *x) {
                        for (d, &v) in dx.iter_mut().zip(&gy) {
                            *d += v;
                        }
                    }
                    if nodes[*small].rg {
                        let sl = nodes[*small].data.len();
                        let ds = grad_buf(&mut g, &nodes, *small).unwrap();
                        for (i, &v) in gy.iter().enumerate() {
                            ds[i % sl] += v;
                        }
                    }
                }
                Op::MulBatchScalar { x, s } => {
                    let per = nodes[*x].data.len() / nodes[*s].data.len();
                    if nodes[*x].rg {
                        let sd = &nodes[*s].data;
                        let dx = grad_buf(&mut g, &nodes, *x).unwrap();
                        for i in 0..gy.len() {
                            dx[i] += gy[i] * sd[i / per];
                        }
                    }
                    if nodes[*s].rg {
                        let xd = &nodes[*x].data;
                        let ds = grad_buf(&mut g, &nodes, *s).unwrap();
                        for i in 0..gy.len() {
                            ds[i / per] += gy[i] * xd[i];
                        }
                    }
                }
                Op::SelectLast { x, idx } => {
                    if nodes[*x].rg {
                        let n = *nodes[*x].shape.last().unwrap();
                        let rows = nodes[*x].data.len() / n;
                        let dx = grad_buf(&mut g, &nodes, *x).unwrap();
                        for r in 0..rows {
                            for (j, &i) in idx.iter().enumerate() {
                                dx[r * n + i] += gy[r * idx.len() + j];
                            }
                        }
                    }
                }
                Op::SelectBatch { x, idx } => {
                    if nodes[*x].rg {
                        let per = nodes[*x].data.len() / nodes[*x].shape[0];
                        let dx = grad_buf(&mut g, &nodes, *x).unwrap();
                        for (j, &i) in idx.iter().enumerate() {
                            for p in 0..per {
                                dx[i * per + p] += gy[j * per + p];
                            }
                        }
                    }
                }
                Op::ScatterBatch { x, idx } => {
                    if nodes[*x].rg {
                        let per = if idx.is_empty() {
                            0
                        } else {
                            nodes[*x].data.len() / idx.len()
                        };
                        let dx = grad_buf(&mut g, &nodes, *x).unwrap();
                        for (j, &i) in idx.iter().enumerate() {
                            for p in 0..per {
                                dx[j * per + p] += gy[i * per + p];
                            }
                        }
                    }
                }
                Op::ExpandLeading { x, copies } => {
                    if nodes[*x].rg {
                        let per = nodes[*x].data.len();
                        let dx = grad_buf(&mut g, &nodes, *x).unwrap();
                        for t in 0..*copies {
                            for p in 0..per {
                                dx[p] += gy[t * per + p];
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    eps,
                } => {
                    let d = *node.shape.last().unwrap();
                    let rows = node.data.len() / d;
                    let inv_d = F::one() / F::c(d as f64);
                    let xd = &nodes[*x].data;
                    let gd = &nodes[*gamma].data;
                    for r in 0..rows {
                        let row = &xd[r * d..(r + 1) * d];
                        let mu = row.iter().copied().sum::<F>() * inv_d;
                        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() * inv_d;
                        let inv_sd = F::one() / (var + *eps).sqrt();
                        let gyr = &gy[r * d..(r + 1) * d];
                        if nodes[*x].rg {
                            let mut m1 = F::zero();
                            let mut m2 = F::zero();
                            for j in 0..d {
                                let a = gyr[j] * gd[j];
                                let xh = (row[j] - mu) * inv_sd;
                                m1 += a;
                                m2 += a * xh;
                            }
                            m1 = m1 * inv_d;
                            m2 = m2 * inv_d;
                            let dx = grad_buf(&mut g, &nodes, *x).unwrap();
                            for j in 0..d {
                                let a = gyr[j] * gd[j];
                                let xh = (row[j] - mu) * inv_sd;
                                dx[r * d + j] += (a - m1 - xh * m2) * inv_sd;
                            }
                        }
                        if nodes[*gamma].rg {
                            let dg = grad_buf(&mut g, &nodes, *gamma).unwrap();
                            for j in 0..d {
                                dg[j] += gyr[j] * (row[j] - mu) * inv_sd;
                            }
                        }
                        if nodes[*beta].rg {
                            let db = grad_buf(&mut g, &nodes, *beta).unwrap();
                            for j in 0..d {
                                db[j] += gyr[j];
                            }
                        }
                    }
                }
            }
            g[id] = Some(gy);
        }

        Ok(Gradients { g })
    }
}
