//! Tensor operations: forward kernels plus their reverse-mode adjoints.

use std::collections::hash_map::Entry;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Recorded origin of a tensor. Each variant holds handles to its inputs and
/// whatever forward-pass byproducts the adjoint needs (pool argmax, softmax
/// probabilities).
pub(crate) enum Op<S: Scalar> {
    Leaf,
    Relu {
        x: Tensor<S>,
    },
    Conv2d {
        x: Tensor<S>,
        w: Tensor<S>,
        b: Tensor<S>,
        stride: usize,
        padding: usize,
    },
    Linear {
        x: Tensor<S>,
        w: Tensor<S>,
        b: Tensor<S>,
    },
    MaxPool2x2 {
        x: Tensor<S>,
        argmax: Vec<usize>,
    },
    BilinearResize {
        x: Tensor<S>,
    },
    GlobalAvgPool {
        x: Tensor<S>,
    },
    Add {
        a: Tensor<S>,
        b: Tensor<S>,
    },
    Scale {
        x: Tensor<S>,
        factor: S,
    },
    Sum {
        x: Tensor<S>,
    },
    SliceCols {
        x: Tensor<S>,
        start: usize,
    },
    Mse {
        a: Tensor<S>,
        b: Tensor<S>,
    },
    BceWithLogits {
        logits: Tensor<S>,
        targets: Tensor<S>,
    },
    CrossEntropy {
        logits: Tensor<S>,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
}

impl<S: Scalar> Op<S> {
    pub(crate) fn parents(&self) -> Vec<Tensor<S>> {
        match self {
            Op::Leaf => vec![],
            Op::Relu { x }
            | Op::MaxPool2x2 { x, .. }
            | Op::BilinearResize { x }
            | Op::GlobalAvgPool { x }
            | Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::SliceCols { x, .. } => vec![x.clone()],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => {
                vec![x.clone(), w.clone(), b.clone()]
            }
            Op::Add { a, b } | Op::Mse { a, b } => vec![a.clone(), b.clone()],
            Op::BceWithLogits { logits, targets } => vec![logits.clone(), targets.clone()],
            Op::CrossEntropy { logits, .. } => vec![logits.clone()],
        }
    }
}

fn accumulate<S: Scalar>(
    scratch: &mut HashMap<*const (), Vec<S>>,
    target: &Tensor<S>,
    contribution: Vec<S>,
) {
    match scratch.entry(target.ptr()) {
        Entry::Occupied(mut e) => {
            for (acc, c) in e.get_mut().iter_mut().zip(&contribution) {
                *acc += *c;
            }
        }
        Entry::Vacant(v) => {
            v.insert(contribution);
        }
    }
}

fn conv_out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn idx4(n: usize, c: usize, y: usize, x: usize, ch: usize, h: usize, w: usize) -> usize {
    ((n * ch + c) * h + y) * w + x
}

/// Half-open range of output positions whose input index
/// `o*stride + k_off - padding` lands inside `0..in_len`.
fn conv_valid_out_range(
    out_len: usize,
    in_len: usize,
    stride: usize,
    k_off: usize,
    padding: usize,
) -> (usize, usize) {
    let lo = if padding > k_off { (padding - k_off).div_ceil(stride) } else { 0 };
    if in_len + padding <= k_off {
        return (0, 0);
    }
    let hi = ((in_len - 1 + padding - k_off) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Interpolation stencil for one output coordinate under the half-pixel-center
/// convention: two clamped source indices and the weight of the upper one.
fn bilinear_axis(out_idx: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = (out_idx as f64 + 0.5) * scale - 0.5;
    let floor = src.floor();
    let t = src - floor;
    let clamp = |v: f64| -> usize { v.max(0.0).min((in_len - 1) as f64) as usize };
    (clamp(floor), clamp(floor + 1.0), t)
}

impl<S: Scalar> Tensor<S> {
    pub fn relu(&self) -> Tensor<S> {
        let d = self.borrow();
        let data = d
            .data
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        let shape = d.shape.clone();
        drop(d);
        Tensor::from_op(shape, data, Op::Relu { x: self.clone() })
    }

    pub fn conv2d(
        &self,
        weight: &Tensor<S>,
        bias: &Tensor<S>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<S>> {
        if stride == 0 {
            return Err(Error::InvalidParam {
                name: "stride",
                detail: "must be at least 1".into(),
            });
        }
        let xs = self.shape();
        let ws = weight.shape();
        let bs = bias.shape();
        if xs.len() != 4 {
            return Err(Error::shape("conv2d", format!("input must be [N,C,H,W], got {xs:?}")));
        }
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::shape(
                "conv2d",
                format!("weight must be [C_out,C_in,k,k], got {ws:?}"),
            ));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        if ws[1] != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but weight expects {}", ws[1]),
            ));
        }
        if bs != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias must be [{cout}], got {bs:?}"),
            ));
        }
        let (oh, ow) = match (
            conv_out_len(h, k, stride, padding),
            conv_out_len(w, k, stride, padding),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {k} exceeds padded input {h}x{w}"),
                ))
            }
        };

        let xd = self.borrow();
        let wd = weight.borrow();
        let bd = bias.borrow();
        let mut out = vec![S::zero(); n * cout * oh * ow];
        // Valid output ranges depend only on the kernel offset; hoist them out
        // of the hot loops (each contains integer divisions).
        let oy_ranges: Vec<(usize, usize)> =
            (0..k).map(|ky| conv_valid_out_range(oh, h, stride, ky, padding)).collect();
        let ox_ranges: Vec<(usize, usize)> =
            (0..k).map(|kx| conv_valid_out_range(ow, w, stride, kx, padding)).collect();
        // Tap-major loop: the weight scalar is hoisted and each (ky, kx) tap
        // updates a whole output row over its valid ox range, branch-free.
        // Per output pixel the addends still arrive in (ci, ky, kx) order.
        for ni in 0..n {
            for co in 0..cout {
                let ob = (ni * cout + co) * oh * ow;
                out[ob..ob + oh * ow].fill(bd.data[co]);
                for ci in 0..cin {
                    let xb = (ni * cin + ci) * h * w;
                    let wb = (co * cin + ci) * k * k;
                    for ky in 0..k {
                        let (oy_lo, oy_hi) = oy_ranges[ky];
                        for oy in oy_lo..oy_hi {
                            let xrow = xb + (oy * stride + ky - padding) * w;
                            let orow = ob + oy * ow;
                            for kx in 0..k {
                                let wv = wd.data[wb + ky * k + kx];
                                let (lo, hi) = ox_ranges[kx];
                                if lo >= hi {
                                    continue;
                                }
                                let len = hi - lo;
                                let dst = &mut out[orow + lo..orow + lo + len];
                                if stride == 1 {
                                    let x0 = xrow + lo + kx - padding;
                                    let src = &xd.data[x0..x0 + len];
                                    for i in 0..len {
                                        dst[i] += wv * src[i];
                                    }
                                } else {
                                    let mut ix = xrow + lo * stride + kx - padding;
                                    for d in dst {
                                        *d += wv * xd.data[ix];
                                        ix += stride;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        drop(xd);
        drop(wd);
        drop(bd);
        Ok(Tensor::from_op(
            vec![n, cout, oh, ow],
            out,
            Op::Conv2d {
                x: self.clone(),
                w: weight.clone(),
                b: bias.clone(),
                stride,
                padding,
            },
        ))
    }

    pub fn linear(&self, weight: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
        let xs = self.shape();
        let ws = weight.shape();
        let bs = bias.shape();
        if xs.len() != 2 {
            return Err(Error::shape("linear", format!("input must be [N,F], got {xs:?}")));
        }
        if ws.len() != 2 || ws[1] != xs[1] {
            return Err(Error::shape(
                "linear",
                format!("weight must be [F_out,{}], got {ws:?}", xs[1]),
            ));
        }
        let (n, fin) = (xs[0], xs[1]);
        let fout = ws[0];
        if bs != [fout] {
            return Err(Error::shape(
                "linear",
                format!("bias must be [{fout}], got {bs:?}"),
            ));
        }
        let xd = self.borrow();
        let wd = weight.borrow();
        let bd = bias.borrow();
        let mut out = vec![S::zero(); n * fout];
        for ni in 0..n {
            for o in 0..fout {
                let mut acc = bd.data[o];
                for i in 0..fin {
                    acc += xd.data[ni * fin + i] * wd.data[o * fin + i];
                }
                out[ni * fout + o] = acc;
            }
        }
        drop(xd);
        drop(wd);
        drop(bd);
        Ok(Tensor::from_op(
            vec![n, fout],
            out,
            Op::Linear {
                x: self.clone(),
                w: weight.clone(),
                b: bias.clone(),
            },
        ))
    }

    pub fn max_pool2x2(&self) -> Result<Tensor<S>> {
        let xs = self.shape();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(Error::shape(
                "max_pool2x2",
                format!("input must be [N,C,H,W] with even H and W, got {xs:?}"),
            ));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.borrow();
        let mut out = vec![S::zero(); n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        // Ties keep the first candidate in scan order, so the
                        // adjoint routes to a deterministic source element.
                        let mut best_idx = idx4(ni, ci, 2 * oy, 2 * ox, c, h, w);
                        let mut best = xd.data[best_idx];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = idx4(ni, ci, 2 * oy + dy, 2 * ox + dx, c, h, w);
                            if xd.data[idx] > best {
                                best = xd.data[idx];
                                best_idx = idx;
                            }
                        }
                        let o = idx4(ni, ci, oy, ox, c, oh, ow);
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        drop(xd);
        Ok(Tensor::from_op(
            vec![n, c, oh, ow],
            out,
            Op::MaxPool2x2 {
                x: self.clone(),
                argmax,
            },
        ))
    }

    /// Bilinear spatial resize with half-pixel centers and edge clamping.
    /// Resizing to the current size returns the same tensor handle.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(Error::shape(
                "bilinear_resize",
                format!("input must be [N,C,H,W], got {xs:?}"),
            ));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidParam {
                name: "bilinear_resize target",
                detail: format!("target {out_h}x{out_w} must be at least 1x1"),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if (out_h, out_w) == (h, w) {
            return Ok(self.clone());
        }
        let xd = self.borrow();
        let mut out = vec![S::zero(); n * c * out_h * out_w];
        // Axis stencils depend only on the output coordinate; channel-major
        // iteration keeps reads within two source rows and writes sequential.
        let ys: Vec<(usize, usize, f64)> =
            (0..out_h).map(|oy| bilinear_axis(oy, h, out_h)).collect();
        let xs_st: Vec<(usize, usize, f64)> =
            (0..out_w).map(|ox| bilinear_axis(ox, w, out_w)).collect();
        for plane in 0..n * c {
            let ib = plane * h * w;
            let ob = plane * out_h * out_w;
            for oy in 0..out_h {
                let &(y0, y1, ty) = &ys[oy];
                let r0 = &xd.data[ib + y0 * w..ib + y0 * w + w];
                let r1 = &xd.data[ib + y1 * w..ib + y1 * w + w];
                let orow = ob + oy * out_w;
                for ox in 0..out_w {
                    let &(x0, x1, tx) = &xs_st[ox];
                    let w00 = S::of((1.0 - ty) * (1.0 - tx));
                    let w01 = S::of((1.0 - ty) * tx);
                    let w10 = S::of(ty * (1.0 - tx));
                    let w11 = S::of(ty * tx);
                    out[orow + ox] = w00 * r0[x0] + w01 * r0[x1] + w10 * r1[x0] + w11 * r1[x1];
                }
            }
        }
        drop(xd);
        Ok(Tensor::from_op(
            vec![n, c, out_h, out_w],
            out,
            Op::BilinearResize { x: self.clone() },
        ))
    }

    pub fn global_avg_pool(&self) -> Result<Tensor<S>> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(Error::shape(
                "global_avg_pool",
                format!("input must be [N,C,H,W], got {xs:?}"),
            ));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let inv_area = S::of(1.0 / (h * w) as f64);
        let xd = self.borrow();
        let mut out = vec![S::zero(); n * c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let mut acc = S::zero();
                for i in 0..h * w {
                    acc += xd.data[base + i];
                }
                out[ni * c + ci] = acc * inv_area;
            }
        }
        drop(xd);
        Ok(Tensor::from_op(
            vec![n, c],
            out,
            Op::GlobalAvgPool { x: self.clone() },
        ))
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(Error::shape("add", format!("shapes {sa:?} and {sb:?} differ")));
        }
        let ad = self.borrow();
        let bd = other.borrow();
        let data = ad.data.iter().zip(&bd.data).map(|(&a, &b)| a + b).collect();
        drop(ad);
        drop(bd);
        Ok(Tensor::from_op(
            sa,
            data,
            Op::Add {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    pub fn scale(&self, factor: S) -> Tensor<S> {
        let d = self.borrow();
        let data = d.data.iter().map(|&v| v * factor).collect();
        let shape = d.shape.clone();
        drop(d);
        Tensor::from_op(
            shape,
            data,
            Op::Scale {
                x: self.clone(),
                factor,
            },
        )
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor<S> {
        let d = self.borrow();
        let mut acc = S::zero();
        for &v in &d.data {
            acc += v;
        }
        drop(d);
        Tensor::from_op(vec![], vec![acc], Op::Sum { x: self.clone() })
    }

    /// Columns [start, start+len) of a [N,F] matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<S>> {
        let xs = self.shape();
        if xs.len() != 2 {
            return Err(Error::shape("slice_cols", format!("input must be [N,F], got {xs:?}")));
        }
        let (n, f) = (xs[0], xs[1]);
        if len == 0 || start + len > f {
            return Err(Error::shape(
                "slice_cols",
                format!("columns [{start}, {}) out of range for width {f}", start + len),
            ));
        }
        let xd = self.borrow();
        let mut out = Vec::with_capacity(n * len);
        for ni in 0..n {
            out.extend_from_slice(&xd.data[ni * f + start..ni * f + start + len]);
        }
        drop(xd);
        Ok(Tensor::from_op(
            vec![n, len],
            out,
            Op::SliceCols {
                x: self.clone(),
                start,
            },
        ))
    }
}

/// Mean-reduced squared error over all elements.
pub fn mse<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::shape("mse", format!("shapes {sa:?} and {sb:?} differ")));
    }
    let ad = a.borrow();
    let bd = b.borrow();
    let inv_n = S::of(1.0 / ad.data.len() as f64);
    let mut acc = S::zero();
    for (&x, &y) in ad.data.iter().zip(&bd.data) {
        let d = x - y;
        acc += d * d;
    }
    drop(ad);
    drop(bd);
    Ok(Tensor::from_op(
        vec![],
        vec![acc * inv_n],
        Op::Mse {
            a: a.clone(),
            b: b.clone(),
        },
    ))
}

/// Mean-reduced binary cross-entropy on raw logits, computed in the
/// log-sum-exp form that stays finite for large |logit|.
pub fn bce_with_logits<S: Scalar>(logits: &Tensor<S>, targets: &Tensor<S>) -> Result<Tensor<S>> {
    let (sl, st) = (logits.shape(), targets.shape());
    if sl != st {
        return Err(Error::shape(
            "bce_with_logits",
            format!("shapes {sl:?} and {st:?} differ"),
        ));
    }
    let ld = logits.borrow();
    let td = targets.borrow();
    let inv_n = S::of(1.0 / ld.data.len() as f64);
    let mut acc = S::zero();
    for (&z, &y) in ld.data.iter().zip(&td.data) {
        let pos = if z > S::zero() { z } else { S::zero() };
        acc += pos - z * y + (S::one() + (-z.abs()).exp()).ln();
    }
    drop(ld);
    drop(td);
    Ok(Tensor::from_op(
        vec![],
        vec![acc * inv_n],
        Op::BceWithLogits {
            logits: logits.clone(),
            targets: targets.clone(),
        },
    ))
}

/// Mean-reduced cross-entropy of [N,K] logits against class indices,
/// softmax computed with the max-shift trick.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<Tensor<S>> {
    let ls = logits.shape();
    if ls.len() != 2 {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits must be [N,K], got {ls:?}"),
        ));
    }
    let (n, k) = (ls[0], ls[1]);
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{n} rows but {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidParam {
            name: "labels",
            detail: format!("class index {bad} out of range for {k} classes"),
        });
    }
    let ld = logits.borrow();
    let mut probs = vec![S::zero(); n * k];
    let mut acc = S::zero();
    for ni in 0..n {
        let row = &ld.data[ni * k..(ni + 1) * k];
        let max = row.iter().copied().fold(row[0], |m, v| if v > m { v } else { m });
        let mut denom = S::zero();
        for (j, &z) in row.iter().enumerate() {
            let e = (z - max).exp();
            probs[ni * k + j] = e;
            denom += e;
        }
        for j in 0..k {
            probs[ni * k + j] = probs[ni * k + j] / denom;
        }
        acc -= probs[ni * k + labels[ni]].ln();
    }
    drop(ld);
    let inv_n = S::of(1.0 / n as f64);
    Ok(Tensor::from_op(
        vec![],
        vec![acc * inv_n],
        Op::CrossEntropy {
            logits: logits.clone(),
            labels: labels.to_vec(),
            probs,
        },
    ))
}

/// Distribute the output gradient `gout` of one node to its parents in the
/// scratch map. Contributions are computed only for graph-connected parents.
pub(crate) fn backward_op<S: Scalar>(
    op: &Op<S>,
    out_shape: &[usize],
    gout: &[S],
    scratch: &mut HashMap<*const (), Vec<S>>,
) {
    match op {
        Op::Leaf => {}

        Op::Relu { x } => {
            if x.is_graph_connected() {
                let xd = x.borrow();
                let dx = xd
                    .data
                    .iter()
                    .zip(gout)
                    .map(|(&v, &g)| if v > S::zero() { g } else { S::zero() })
                    .collect();
                drop(xd);
                accumulate(scratch, x, dx);
            }
        }

        Op::Conv2d {
            x,
            w,
            b,
            stride,
            padding,
        } => {
            let xs = x.shape();
            let ws = w.shape();
            let (n, cin, h, wd_) = (xs[0], xs[1], xs[2], xs[3]);
            let (cout, k) = (ws[0], ws[2]);
            let (oh, ow) = (out_shape[2], out_shape[3]);
            let need_x = x.is_graph_connected();
            let need_w = w.is_graph_connected();
            let need_b = b.is_graph_connected();
            let xd = x.borrow();
            let wdata = w.borrow();
            let mut dx = if need_x { vec![S::zero(); xd.data.len()] } else { vec![] };
            let mut dw = if need_w { vec![S::zero(); wdata.data.len()] } else { vec![] };
            let mut db = if need_b { vec![S::zero(); cout] } else { vec![] };
            // Mirrors the tap-major forward: per (ky, kx) tap the weight
            // scalar is hoisted and whole rows are processed branch-free
            // over the tap's valid output range.
            let oy_ranges: Vec<(usize, usize)> = (0..k)
                .map(|ky| conv_valid_out_range(oh, h, *stride, ky, *padding))
                .collect();
            let ox_ranges: Vec<(usize, usize)> = (0..k)
                .map(|kx| conv_valid_out_range(ow, wd_, *stride, kx, *padding))
                .collect();
            for ni in 0..n {
                for co in 0..cout {
                    let gb = (ni * cout + co) * oh * ow;
                    if need_b {
                        for &g in &gout[gb..gb + oh * ow] {
                            db[co] += g;
                        }
                    }
                    if !need_x && !need_w {
                        continue;
                    }
                    for ci in 0..cin {
                        let xb = (ni * cin + ci) * h * wd_;
                        let wb = (co * cin + ci) * k * k;
                        for ky in 0..k {
                            let (oy_lo, oy_hi) = oy_ranges[ky];
                            for oy in oy_lo..oy_hi {
                                let xrow = xb + (oy * *stride + ky - *padding) * wd_;
                                let grow = gb + oy * ow;
                                for kx in 0..k {
                                    let (lo, hi) = ox_ranges[kx];
                                    if lo >= hi {
                                        continue;
                                    }
                                    let wi = wb + ky * k + kx;
                                    let len = hi - lo;
                                    let grad_row = &gout[grow + lo..grow + lo + len];
                                    if *stride == 1 {
                                        let x0 = xrow + lo + kx - *padding;
                                        if need_x {
                                            let wv = wdata.data[wi];
                                            let dst = &mut dx[x0..x0 + len];
                                            for i in 0..len {
                                                dst[i] += grad_row[i] * wv;
                                            }
                                        }
                                        if need_w {
                                            let src = &xd.data[x0..x0 + len];
                                            let mut acc = S::zero();
                                            for i in 0..len {
                                                acc += grad_row[i] * src[i];
                                            }
                                            dw[wi] += acc;
                                        }
                                    } else {
                                        let wv = if need_x { wdata.data[wi] } else { S::zero() };
                                        let mut acc = S::zero();
                                        let mut ix = xrow + lo * *stride + kx - *padding;
                                        for &g in grad_row {
                                            if need_x {
                                                dx[ix] += g * wv;
                                            }
                                            if need_w {
                                                acc += g * xd.data[ix];
                                            }
                                            ix += *stride;
                                        }
                                        if need_w {
                                            dw[wi] += acc;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            drop(xd);
            drop(wdata);
            if need_x {
                accumulate(scratch, x, dx);
            }
            if need_w {
                accumulate(scratch, w, dw);
            }
            if need_b {
                accumulate(scratch, b, db);
            }
        }

        Op::Linear { x, w, b } => {
            let xs = x.shape();
            let (n, fin) = (xs[0], xs[1]);
            let fout = out_shape[1];
            let need_x = x.is_graph_connected();
            let need_w = w.is_graph_connected();
            let need_b = b.is_graph_connected();
            let xd = x.borrow();
            let wdata = w.borrow();
            let mut dx = if need_x { vec![S::zero(); n * fin] } else { vec![] };
            let mut dw = if need_w { vec![S::zero(); fout * fin] } else { vec![] };
            let mut db = if need_b { vec![S::zero(); fout] } else { vec![] };
            for ni in 0..n {
                for o in 0..fout {
                    let g = gout[ni * fout + o];
                    if need_b {
                        db[o] += g;
                    }
                    for i in 0..fin {
                        if need_x {
                            dx[ni * fin + i] += g * wdata.data[o * fin + i];
                        }
                        if need_w {
                            dw[o * fin + i] += g * xd.data[ni * fin + i];
                        }
                    }
                }
            }
            drop(xd);
            drop(wdata);
            if need_x {
                accumulate(scratch, x, dx);
            }
            if need_w {
                accumulate(scratch, w, dw);
            }
            if need_b {
                accumulate(scratch, b, db);
            }
        }

        Op::MaxPool2x2 { x, argmax } => {
            if x.is_graph_connected() {
                let mut dx = vec![S::zero(); x.numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += gout[o];
                }
                accumulate(scratch, x, dx);
            }
        }

        Op::BilinearResize { x } => {
            if x.is_graph_connected() {
                let xs = x.shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (oh, ow) = (out_shape[2], out_shape[3]);
                let mut dx = vec![S::zero(); x.numel()];
                // Channel-major mirror of the forward; each input element only
                // collects gradient from its own plane, in (oy, ox) order.
                let ys: Vec<(usize, usize, f64)> =
                    (0..oh).map(|oy| bilinear_axis(oy, h, oh)).collect();
                let xs_st: Vec<(usize, usize, f64)> =
                    (0..ow).map(|ox| bilinear_axis(ox, w, ow)).collect();
                for plane in 0..n * c {
                    let ib = plane * h * w;
                    let gb = plane * oh * ow;
                    for oy in 0..oh {
                        let &(y0, y1, ty) = &ys[oy];
                        let (b0, b1) = (ib + y0 * w, ib + y1 * w);
                        let grow = gb + oy * ow;
                        for ox in 0..ow {
                            let &(x0, x1, tx) = &xs_st[ox];
                            let g = gout[grow + ox];
                            dx[b0 + x0] += g * S::of((1.0 - ty) * (1.0 - tx));
                            dx[b0 + x1] += g * S::of((1.0 - ty) * tx);
                            dx[b1 + x0] += g * S::of(ty * (1.0 - tx));
                            dx[b1 + x1] += g * S::of(ty * tx);
                        }
                    }
                }
                accumulate(scratch, x, dx);
            }
        }

        Op::GlobalAvgPool { x } => {
            if x.is_graph_connected() {
                let xs = x.shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let inv_area = S::of(1.0 / (h * w) as f64);
                let mut dx = vec![S::zero(); x.numel()];
                for ni in 0..n {
                    for ci in 0..c {
                        let g = gout[ni * c + ci] * inv_area;
                        let base = (ni * c + ci) * h * w;
                        for i in 0..h * w {
                            dx[base + i] += g;
                        }
                    }
                }
                accumulate(scratch, x, dx);
            }
        }

        Op::Add { a, b } => {
            for t in [a, b] {
                if t.is_graph_connected() {
                    accumulate(scratch, t, gout.to_vec());
                }
            }
        }

        Op::Scale { x, factor } => {
            if x.is_graph_connected() {
                let dx = gout.iter().map(|&g| g * *factor).collect();
                accumulate(scratch, x, dx);
            }
        }

        Op::Sum { x } => {
            if x.is_graph_connected() {
                accumulate(scratch, x, vec![gout[0]; x.numel()]);
            }
        }

        Op::SliceCols { x, start } => {
            if x.is_graph_connected() {
                let xs = x.shape();
                let (n, f) = (xs[0], xs[1]);
                let len = out_shape[1];
                let mut dx = vec![S::zero(); n * f];
                for ni in 0..n {
                    for j in 0..len {
                        dx[ni * f + start + j] += gout[ni * len + j];
                    }
                }
                accumulate(scratch, x, dx);
            }
        }

        Op::Mse { a, b } => {
            let ad = a.borrow();
            let bd = b.borrow();
            let coef = gout[0] * S::of(2.0 / ad.data.len() as f64);
            if a.is_graph_connected() {
                let da = ad
                    .data
                    .iter()
                    .zip(&bd.data)
                    .map(|(&x, &y)| coef * (x - y))
                    .collect();
                accumulate(scratch, a, da);
            }
            if b.is_graph_connected() {
                let db = ad
                    .data
                    .iter()
                    .zip(&bd.data)
                    .map(|(&x, &y)| -coef * (x - y))
                    .collect();
                accumulate(scratch, b, db);
            }
        }

        Op::BceWithLogits { logits, targets } => {
            let ld = logits.borrow();
            let td = targets.borrow();
            let coef = gout[0] * S::of(1.0 / ld.data.len() as f64);
            if logits.is_graph_connected() {
                let dz = ld
                    .data
                    .iter()
                    .zip(&td.data)
                    .map(|(&z, &y)| {
                        let sig = S::one() / (S::one() + (-z).exp());
                        coef * (sig - y)
                    })
                    .collect();
                accumulate(scratch, logits, dz);
            }
            if targets.is_graph_connected() {
                let dy = ld.data.iter().map(|&z| -coef * z).collect();
                accumulate(scratch, targets, dy);
            }
        }

        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            if logits.is_graph_connected() {
                let ls = logits.shape();
                let (n, k) = (ls[0], ls[1]);
                let coef = gout[0] * S::of(1.0 / n as f64);
                let mut dz = vec![S::zero(); n * k];
                for ni in 0..n {
                    for j in 0..k {
                        let indicator = if labels[ni] == j { S::one() } else { S::zero() };
                        dz[ni * k + j] = coef * (probs[ni * k + j] - indicator);
                    }
                }
                accumulate(scratch, logits, dz);
            }
        }
    }
}
