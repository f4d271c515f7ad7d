//! Differentiable primitives on [`Var`]. Each op computes its value eagerly
//! and registers a backward rule with the tape.

use std::rc::Rc;

use super::graph::Var;
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// `(outer, len, inner)` decomposition around `axis`.
fn split_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize, op: &str) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

/// Row-major GEMM: `c (+)= op(a) * op(b)` with `op(a)` of size m x k and
/// `op(b)` of size k x n. Transposes are expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above and strides describe
    // row-major (or transposed row-major) layouts inside those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn unary<'g>(
    x: Var<'g>,
    op: &str,
    f: impl Fn(f64) -> f64,
    // derivative expressed through (input, output)
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Var<'g>> {
    let xv = x.value();
    let out: Vec<f64> = xv.data().iter().map(|&v| f(v)).collect();
    let out = Rc::new(Tensor::from_raw(xv.shape().to_vec(), out));
    let out_c = Rc::clone(&out);
    x.graph.record_shared(op, out, &[x], move |g| {
        let dx = g
            .iter()
            .zip(xv.data())
            .zip(out_c.data())
            .map(|((&g, &x), &y)| g * df(x, y))
            .collect();
        vec![Some(dx)]
    })
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

impl<'g> Var<'g> {
    fn binary(self, other: Var<'g>, op: BinOp) -> Result<Var<'g>> {
        let (av, bv) = (self.value(), other.value());
        let (sa, sb) = (av.shape(), bv.shape());
        let name = match op {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
        };
        // Only leading-dimension broadcasting: the smaller shape must be a
        // suffix of the larger one.
        let out_shape = if sa.len() >= sb.len() && sa.ends_with(sb) {
            sa.to_vec()
        } else if sb.len() > sa.len() && sb.ends_with(sa) {
            sb.to_vec()
        } else {
            return Err(Error::Dimension(format!(
                "{name}: shapes {sa:?} and {sb:?} are not broadcast-compatible"
            )));
        };
        let n = numel(&out_shape);
        let (na, nb) = (av.numel(), bv.numel());
        let f = move |x: f64, y: f64| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
        };
        let mut out = Vec::with_capacity(n);
        {
            let (ad, bd) = (av.data(), bv.data());
            if na == nb {
                out.extend(ad.iter().zip(bd).map(|(&x, &y)| f(x, y)));
            } else if na == n {
                for chunk in ad.chunks_exact(nb) {
                    out.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
                }
            } else {
                for chunk in bd.chunks_exact(na) {
                    out.extend(ad.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
                }
            }
        }
        let need_a = self.requires_grad();
        let need_b = other.requires_grad();
        self.graph.record(
            name,
            Tensor::from_raw(out_shape, out),
            &[self, other],
            move |g| {
                // gradient of one operand given the elementwise factor
                // `other[i]` (or a constant) it multiplies `g[i]` by
                let reduce = |len: usize, factor: Option<(&[f64], usize)>, sign: f64| {
                    let mut acc = vec![0.0; len];
                    for (c, gc) in g.chunks_exact(len).enumerate() {
                        match factor {
                            None => acc.iter_mut().zip(gc).for_each(|(a, &gi)| *a += sign * gi),
                            Some((fd, fl)) => {
                                if fl >= len {
                                    let off = (c * len) % fl;
                                    let fs = &fd[off..off + len];
                                    acc.iter_mut().zip(gc).zip(fs).for_each(|((a, &gi), &fv)| *a += gi * fv);
                                } else {
                                    for (ac, gcc) in acc.chunks_exact_mut(fl).zip(gc.chunks_exact(fl)) {
                                        ac.iter_mut().zip(gcc).zip(fd).for_each(|((a, &gi), &fv)| *a += gi * fv);
                                    }
                                }
                            }
                        }
                    }
                    acc
                };
                let (ad, bd) = (av.data(), bv.data());
                let ga = need_a.then(|| match op {
                    BinOp::Add | BinOp::Sub => reduce(na, None, 1.0),
                    BinOp::Mul => reduce(na, Some((bd, nb)), 1.0),
                });
                let gb = need_b.then(|| match op {
                    BinOp::Add => reduce(nb, None, 1.0),
                    BinOp::Sub => reduce(nb, None, -1.0),
                    BinOp::Mul => reduce(nb, Some((ad, na)), 1.0),
                });
                vec![ga, gb]
            },
        )
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinOp::Add)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinOp::Sub)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinOp::Mul)
    }

    pub fn scale(self, c: f64) -> Result<Var<'g>> {
        unary(self, "scale", move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'g>> {
        unary(self, "add_scalar", move |v| v + c, |_, _| 1.0)
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        unary(
            self,
            "sigmoid",
            |v| 1.0 / (1.0 + (-v).exp()),
            |_, y| y * (1.0 - y),
        )
    }

    pub fn tanh(self) -> Result<Var<'g>> {
        unary(self, "tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(self) -> Result<Var<'g>> {
        unary(self, "exp", f64::exp, |_, y| y)
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Result<Var<'g>> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        unary(
            self,
            "gelu",
            |x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let u = C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            },
        )
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        self.reduce_axis(axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'g>> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'g>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        check_axis(&shape, axis, "reduce")?;
        let (outer, len, inner) = split_dims(&shape, axis);
        let w = if mean { 1.0 / len as f64 } else { 1.0 };
        let mut out = vec![0.0; outer * inner];
        let xd = xv.data();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[base + i] * w;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.graph.record(
            if mean { "mean_axis" } else { "sum_axis" },
            Tensor::from_raw(out_shape, out),
            &[self],
            move |g| {
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            dx[base + i] = g[o * inner + i] * w;
                        }
                    }
                }
                vec![Some(dx)]
            },
        )
    }

    pub fn sum_all(self) -> Result<Var<'g>> {
        let n = numel(&self.shape());
        self.reshape(&[n])?.sum_axis(0)
    }

    pub fn mean_all(self) -> Result<Var<'g>> {
        let n = numel(&self.shape());
        self.reshape(&[n])?.mean_axis(0)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let xv = self.value();
        if numel(shape) != xv.numel() || shape.iter().any(|&s| s == 0) {
            return Err(Error::Dimension(format!(
                "reshape: {:?} into {shape:?}",
                xv.shape()
            )));
        }
        self.graph.record(
            "reshape",
            Tensor::from_raw(shape.to_vec(), xv.data().to_vec()),
            &[self],
            |g| vec![Some(g.to_vec())],
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax_axis(self, axis: usize) -> Result<Var<'g>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        check_axis(&shape, axis, "softmax_axis")?;
        let (outer, len, inner) = split_dims(&shape, axis);
        let xd = xv.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| xd[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (xd[idx(l)] - max).exp();
                    out[idx(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[idx(l)] /= sum;
                }
            }
        }
        let y = Rc::new(Tensor::from_raw(shape.clone(), out));
        let y_c = Rc::clone(&y);
        self.graph.record_shared(
            "softmax_axis",
            y,
            &[self],
            move |g| {
                let y_c = y_c.data();
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[idx(l)] * y_c[idx(l)]).sum();
                        for l in 0..len {
                            dx[idx(l)] = y_c[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            },
        )
    }

    /// Softmax over the last axis of a `[.., L, L]` score tensor, restricted
    /// to columns `j <= i` for row `i`; masked entries are exactly zero.
    pub fn causal_softmax(self) -> Result<Var<'g>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] {
            return Err(Error::Dimension(format!(
                "causal_softmax needs square trailing dims, got {shape:?}"
            )));
        }
        let l = shape[r - 1];
        let batches = xv.numel() / (l * l);
        let xd = xv.data();
        let mut out = vec![0.0; xd.len()];
        for b in 0..batches {
            for i in 0..l {
                let row = &xd[(b * l + i) * l..(b * l + i) * l + i + 1];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let o = &mut out[(b * l + i) * l..(b * l + i) * l + i + 1];
                let mut sum = 0.0;
                for (dst, &v) in o.iter_mut().zip(row) {
                    *dst = (v - max).exp();
                    sum += *dst;
                }
                o.iter_mut().for_each(|v| *v /= sum);
            }
        }
        let y = Rc::new(Tensor::from_raw(shape.clone(), out));
        let y_c = Rc::clone(&y);
        self.graph.record_shared(
            "causal_softmax",
            y,
            &[self],
            move |g| {
                let y_c = y_c.data();
                let mut dx = vec![0.0; g.len()];
                for b in 0..batches {
                    for i in 0..l {
                        let s = (b * l + i) * l;
                        let (gr, yr) = (&g[s..s + i + 1], &y_c[s..s + i + 1]);
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..=i {
                            dx[s + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            },
        )
    }

    /// Divides each slice along `axis` by its sum plus `eps` (sum-to-one
    /// renormalisation of non-negative weights).
    pub fn normalize_sum_axis(self, axis: usize, eps: f64) -> Result<Var<'g>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        check_axis(&shape, axis, "normalize_sum_axis")?;
        let (outer, len, inner) = split_dims(&shape, axis);
        let xd = xv.data();
        let mut out = vec![0.0; xd.len()];
        let mut dens = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let den = (0..len).map(|l| xd[idx(l)]).sum::<f64>() + eps;
                dens[o * inner + i] = den;
                for l in 0..len {
                    out[idx(l)] = xd[idx(l)] / den;
                }
            }
        }
        let y = Rc::new(Tensor::from_raw(shape.clone(), out));
        let y_c = Rc::clone(&y);
        self.graph.record_shared(
            "normalize_sum_axis",
            y,
            &[self],
            move |g| {
                let y_c = y_c.data();
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[idx(l)] * y_c[idx(l)]).sum();
                        let den = dens[o * inner + i];
                        for l in 0..len {
                            dx[idx(l)] = (g[idx(l)] - dot) / den;
                        }
                    }
                }
                vec![Some(dx)]
            },
        )
    }

    /// Divides each slice along `axis` by `max(norm, eps)`.
    pub fn l2_normalize_axis(self, axis: usize, eps: f64) -> Result<Var<'g>> {
        if eps <= 0.0 {
            return Err(Error::Value(format!("l2_normalize_axis: eps must be > 0, got {eps}")));
        }
        let xv = self.value();
        let shape = xv.shape().to_vec();
        check_axis(&shape, axis, "l2_normalize_axis")?;
        let (outer, len, inner) = split_dims(&shape, axis);
        let xd = xv.data();
        let mut out = vec![0.0; xd.len()];
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let n = (0..len).map(|l| xd[idx(l)].powi(2)).sum::<f64>().sqrt();
                norms[o * inner + i] = n;
                let den = n.max(eps);
                for l in 0..len {
                    out[idx(l)] = xd[idx(l)] / den;
                }
            }
        }
        let y = Rc::new(Tensor::from_raw(shape.clone(), out));
        let y_c = Rc::clone(&y);
        self.graph.record_shared(
            "l2_normalize_axis",
            y,
            &[self],
            move |g| {
                let y_c = y_c.data();
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let n = norms[o * inner + i];
                        if n >= eps {
                            let dot: f64 = (0..len).map(|l| g[idx(l)] * y_c[idx(l)]).sum();
                            for l in 0..len {
                                dx[idx(l)] = (g[idx(l)] - y_c[idx(l)] * dot) / n;
                            }
                        } else {
                            for l in 0..len {
                                dx[idx(l)] = g[idx(l)] / eps;
                            }
                        }
                    }
                }
                vec![Some(dx)]
            },
        )
    }

    /// Layer normalization over the last axis with elementwise gain and bias.
    pub fn layer_norm(self, gain: Var<'g>, bias: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let dim = *shape.last().ok_or_else(|| Error::Dimension("layer_norm on scalar".into()))?;
        let (gv, bv) = (gain.value(), bias.value());
        if gv.shape() != [dim] || bv.shape() != [dim] {
            return Err(Error::Dimension(format!(
                "layer_norm: gain {:?} / bias {:?} for feature dim {dim}",
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.numel() / dim;
        let xd = xv.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * dim..(r + 1) * dim];
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / dim as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..dim {
                let h = (row[c] - mean) * is;
                xhat[r * dim + c] = h;
                out[r * dim + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let (need_x, need_g, need_b) = (
            self.requires_grad(),
            gain.requires_grad(),
            bias.requires_grad(),
        );
        self.graph.record(
            "layer_norm",
            Tensor::from_raw(shape, out),
            &[self, gain, bias],
            move |g| {
                let gd = gv.data();
                let dx = need_x.then(|| {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let s = r * dim;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..dim {
                            let dh = g[s + c] * gd[c];
                            m1 += dh;
                            m2 += dh * xhat[s + c];
                        }
                        m1 /= dim as f64;
                        m2 /= dim as f64;
                        for c in 0..dim {
                            let dh = g[s + c] * gd[c];
                            dx[s + c] = inv_std[r] * (dh - m1 - xhat[s + c] * m2);
                        }
                    }
                    dx
                });
                let dg = need_g.then(|| {
                    let mut dg = vec![0.0; dim];
                    for (i, &gi) in g.iter().enumerate() {
                        dg[i % dim] += gi * xhat[i];
                    }
                    dg
                });
                let db = need_b.then(|| {
                    let mut db = vec![0.0; dim];
                    for (i, &gi) in g.iter().enumerate() {
                        db[i % dim] += gi;
                    }
                    db
                });
                vec![dx, dg, db]
            },
        )
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]`. Batch dims must be
    /// identical, or one side may be a plain matrix broadcast over the other.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (av, bv) = (self.value(), other.value());
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Dimension(format!(
                "matmul needs rank >= 2 operands, got {sa:?} and {sb:?}"
            )));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (ba_shape, bb_shape) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch_shape = if ba_shape == bb_shape || bb_shape.is_empty() {
            ba_shape.to_vec()
        } else if ba_shape.is_empty() {
            bb_shape.to_vec()
        } else {
            return Err(Error::Dimension(format!(
                "matmul batch dims differ: {sa:?} x {sb:?}"
            )));
        };
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: {sa:?} x {sb:?}"
            )));
        }
        let batches: usize = batch_shape.iter().product();
        let a_batched = !ba_shape.is_empty();
        let b_batched = !bb_shape.is_empty();
        let mut out = vec![0.0; batches * m * n];
        for bi in 0..batches {
            let ao = if a_batched { bi * m * k } else { 0 };
            let bo = if b_batched { bi * k * n } else { 0 };
            gemm(
                m,
                k,
                n,
                &av.data()[ao..ao + m * k],
                false,
                &bv.data()[bo..bo + k * n],
                false,
                &mut out[bi * m * n..(bi + 1) * m * n],
                false,
            );
        }
        let mut out_shape = batch_shape;
        out_shape.extend([m, n]);
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        self.graph.record(
            "matmul",
            Tensor::from_raw(out_shape, out),
            &[self, other],
            move |g| {
                let ga = need_a.then(|| {
                    let mut da = vec![0.0; av.numel()];
                    for bi in 0..batches {
                        let ao = if a_batched { bi * m * k } else { 0 };
                        let bo = if b_batched { bi * k * n } else { 0 };
                        // dA = dC * B^T
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &bv.data()[bo..bo + k * n],
                            true,
                            &mut da[ao..ao + m * k],
                            true,
                        );
                    }
                    da
                });
                let gb = need_b.then(|| {
                    let mut db = vec![0.0; bv.numel()];
                    for bi in 0..batches {
                        let ao = if a_batched { bi * m * k } else { 0 };
                        let bo = if b_batched { bi * k * n } else { 0 };
                        // dB = A^T * dC
                        gemm(
                            k,
                            m,
                            n,
                            &av.data()[ao..ao + m * k],
                            true,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &mut db[bo..bo + k * n],
                            true,
                        );
                    }
                    db
                });
                vec![ga, gb]
            },
        )
    }

    pub fn transpose_last2(self) -> Result<Var<'g>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(Error::Dimension(format!("transpose_last2 on {shape:?}")));
        }
        let (m, n) = (shape[r - 2], shape[r - 1]);
        let batches = xv.numel() / (m * n);
        let permute = move |src: &[f64], rows: usize, cols: usize| {
            let mut dst = vec![0.0; src.len()];
            for b in 0..batches {
                let o = b * rows * cols;
                for i in 0..rows {
                    for j in 0..cols {
                        dst[o + j * rows + i] = src[o + i * cols + j];
                    }
                }
            }
            dst
        };
        let out = permute(xv.data(), m, n);
        let mut out_shape = shape;
        out_shape.swap(r - 2, r - 1);
        self.graph.record(
            "transpose_last2",
            Tensor::from_raw(out_shape, out),
            &[self],
            move |g| vec![Some(permute(g, n, m))],
        )
    }

    /// Splits along `axis` into pieces of the given sizes.
    pub fn split_axis(self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'g>>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        check_axis(&shape, axis, "split_axis")?;
        if sizes.iter().sum::<usize>() != shape[axis] || sizes.iter().any(|&s| s == 0) {
            return Err(Error::Dimension(format!(
                "split_axis: sizes {sizes:?} do not partition axis {axis} of {shape:?}"
            )));
        }
        let (outer, len, inner) = split_dims(&shape, axis);
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &sz in sizes {
            let mut out = Vec::with_capacity(outer * sz * inner);
            for o in 0..outer {
                let s = (o * len + start) * inner;
                out.extend_from_slice(&xv.data()[s..s + sz * inner]);
            }
            let mut ps = shape.clone();
            ps[axis] = sz;
            let off = start;
            parts.push(self.graph.record(
                "split_axis",
                Tensor::from_raw(ps, out),
                &[self],
                move |g| {
                    let mut dx = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        let d = (o * len + off) * inner;
                        dx[d..d + sz * inner].copy_from_slice(&g[o * sz * inner..(o + 1) * sz * inner]);
                    }
                    vec![Some(dx)]
                },
            )?);
            start += sz;
        }
        Ok(parts)
    }

    /// Equal-size split into `parts` chunks.
    pub fn chunk(self, axis: usize, parts: usize) -> Result<Vec<Var<'g>>> {
        let shape = self.shape();
        check_axis(&shape, axis, "chunk")?;
        if parts == 0 || shape[axis] % parts != 0 {
            return Err(Error::Dimension(format!(
                "chunk: axis {axis} of {shape:?} not divisible into {parts}"
            )));
        }
        self.split_axis(axis, &vec![shape[axis] / parts; parts])
    }

    /// Gathers rows of a `[rows, dim]` table.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'g>> {
        let tv = self.value();
        let shape = tv.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!("gather_rows on {shape:?}")));
        }
        let (rows, dim) = (shape[0], shape[1]);
        if ids.is_empty() {
            return Err(Error::Dimension("gather_rows with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Dimension(format!("gather_rows: id {bad} >= {rows}")));
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&tv.data()[i * dim..(i + 1) * dim]);
        }
        let ids = ids.to_vec();
        self.graph.record(
            "gather_rows",
            Tensor::from_raw(vec![ids.len(), dim], out),
            &[self],
            move |g| {
                let mut dt = vec![0.0; rows * dim];
                for (r, &i) in ids.iter().enumerate() {
                    for c in 0..dim {
                        dt[i * dim + c] += g[r * dim + c];
                    }
                }
                vec![Some(dt)]
            },
        )
    }

    /// Replaces rows `idx[r]` of a `[len, dim]` base with row `r` of `rows`.
    pub fn scatter_rows(self, rows: Var<'g>, idx: &[usize]) -> Result<Var<'g>> {
        let (bv, rv) = (self.value(), rows.value());
        let (bs, rs) = (bv.shape().to_vec(), rv.shape().to_vec());
        if bs.len() != 2 || rs.len() != 2 || bs[1] != rs[1] || rs[0] != idx.len() {
            return Err(Error::Dimension(format!(
                "scatter_rows: base {bs:?}, rows {rs:?}, {} indices",
                idx.len()
            )));
        }
        let (len, dim) = (bs[0], bs[1]);
        let mut replaced = vec![false; len];
        for &i in idx {
            if i >= len || replaced[i] {
                return Err(Error::Dimension(format!(
                    "scatter_rows: index {i} out of range or repeated"
                )));
            }
            replaced[i] = true;
        }
        let mut out = bv.data().to_vec();
        for (r, &i) in idx.iter().enumerate() {
            out[i * dim..(i + 1) * dim].copy_from_slice(&rv.data()[r * dim..(r + 1) * dim]);
        }
        let idx = idx.to_vec();
        let (need_b, need_r) = (self.requires_grad(), rows.requires_grad());
        self.graph.record(
            "scatter_rows",
            Tensor::from_raw(bs, out),
            &[self, rows],
            move |g| {
                let gb = need_b.then(|| {
                    let mut gb = g.to_vec();
                    for &i in &idx {
                        gb[i * dim..(i + 1) * dim].iter_mut().for_each(|v| *v = 0.0);
                    }
                    gb
                });
                let gr = need_r.then(|| {
                    let mut gr = Vec::with_capacity(idx.len() * dim);
                    for &i in &idx {
                        gr.extend_from_slice(&g[i * dim..(i + 1) * dim]);
                    }
                    gr
                });
                vec![gb, gr]
            },
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[rows, vocab]` logits. Rows with `None` are excluded.
    pub fn cross_entropy(self, targets: &[Option<usize>]) -> Result<Var<'g>> {
        let lv = self.value();
        let shape = lv.shape().to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::Dimension(format!(
                "cross_entropy: logits {shape:?} for {} targets",
                targets.len()
            )));
        }
        let (rows, vocab) = (shape[0], shape[1]);
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Value("cross_entropy: empty target mask".into()));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::Dimension(format!("cross_entropy: target {bad} >= {vocab}")));
        }
        let ld = lv.data();
        let mut probs = vec![0.0; rows * vocab];
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &ld[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[t];
            for c in 0..vocab {
                probs[r * vocab + c] = (row[c] - lse).exp();
            }
        }
        let inv = 1.0 / count as f64;
        let targets = targets.to_vec();
        self.graph.record(
            "cross_entropy",
            Tensor::scalar(loss * inv),
            &[self],
            move |g| {
                let mut dl = vec![0.0; rows * vocab];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for c in 0..vocab {
                        dl[r * vocab + c] = g[0] * inv * probs[r * vocab + c];
                    }
                    dl[r * vocab + t] -= g[0] * inv;
                }
                vec![Some(dl)]
            },
        )
    }

    /// Row-wise cosine similarity of two `[rows, len]` tensors:
    /// `dot / (|a| |b| + eps)`, so an all-zero row yields 0.
    pub fn row_cosine(self, other: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let (av, bv) = (self.value(), other.value());
        if av.shape() != bv.shape() || av.ndim() != 2 {
            return Err(Error::Dimension(format!(
                "row_cosine: shapes {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (rows, len) = (av.shape()[0], av.shape()[1]);
        let mut stats = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let a = &av.data()[r * len..(r + 1) * len];
            let b = &bv.data()[r * len..(r + 1) * len];
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let den = na * nb + eps;
            stats.push((dot, na, nb, den));
            out.push(dot / den);
        }
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        self.graph.record(
            "row_cosine",
            Tensor::from_raw(vec![rows], out),
            &[self, other],
            move |g| {
                let grad_for = |x: &[f64], y: &[f64], swap: bool| {
                    let mut d = vec![0.0; rows * len];
                    for r in 0..rows {
                        let (dot, na, nb, den) = stats[r];
                        let (nx, ny) = if swap { (nb, na) } else { (na, nb) };
                        for c in 0..len {
                            let i = r * len + c;
                            let mut v = y[i] / den;
                            if nx > 0.0 {
                                v -= dot * ny * (x[i] / nx) / (den * den);
                            }
                            d[i] = g[r] * v;
                        }
                    }
                    d
                };
                let ga = need_a.then(|| grad_for(av.data(), bv.data(), false));
                let gb = need_b.then(|| grad_for(bv.data(), av.data(), true));
                vec![ga, gb]
            },
        )
    }
}

/// Copies column block `h` (width `dh`) of a row-major `[l, d]` matrix.
fn head_block(src: &[f64], l: usize, d: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(l * dh);
    for r in 0..l {
        out.extend_from_slice(&src[r * d + h * dh..r * d + (h + 1) * dh]);
    }
    out
}

fn put_head_block(dst: &mut [f64], block: &[f64], l: usize, d: usize, h: usize, dh: usize) {
    for r in 0..l {
        dst[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&block[r * dh..(r + 1) * dh]);
    }
}

impl<'g> Var<'g> {
    /// Multi-head causal self-attention on `[L, D]` projections: head `h`
    /// uses columns `h*dh..(h+1)*dh`, computes
    /// `causal_softmax(scale * q_h k_h^T) v_h` and the heads are laid back
    /// side by side.
    pub fn causal_attention(self, k: Var<'g>, v: Var<'g>, n_heads: usize, scale: f64) -> Result<Var<'g>> {
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        let shape = qv.shape().to_vec();
        if shape.len() != 2 || kv.shape() != shape.as_slice() || vv.shape() != shape.as_slice() {
            return Err(Error::Dimension(format!(
                "causal_attention: q {:?}, k {:?}, v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        let (l, d) = (shape[0], shape[1]);
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Dimension(format!(
                "causal_attention: {n_heads} heads do not divide width {d}"
            )));
        }
        if !(scale > 0.0) {
            return Err(Error::Value(format!("causal_attention: scale must be > 0, got {scale}")));
        }
        let dh = d / n_heads;
        let mut out = vec![0.0; l * d];
        let mut probs = Vec::with_capacity(n_heads);
        let mut oh = vec![0.0; l * dh];
        for h in 0..n_heads {
            let qh = head_block(qv.data(), l, d, h, dh);
            let kh = head_block(kv.data(), l, d, h, dh);
            let vh = head_block(vv.data(), l, d, h, dh);
            let mut p = vec![0.0; l * l];
            gemm(l, dh, l, &qh, false, &kh, true, &mut p, false);
            for i in 0..l {
                let row = &mut p[i * l..(i + 1) * l];
                let (live, masked) = row.split_at_mut(i + 1);
                let max = live.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let mut sum = 0.0;
                for x in live.iter_mut() {
                    *x = ((*x - max) * scale).exp();
                    sum += *x;
                }
                live.iter_mut().for_each(|x| *x /= sum);
                masked.fill(0.0);
            }
            gemm(l, l, dh, &p, false, &vh, false, &mut oh, false);
            put_head_block(&mut out, &oh, l, d, h, dh);
            probs.push(p);
        }
        let needs = [self.requires_grad(), k.requires_grad(), v.requires_grad()];
        self.graph.record(
            "causal_attention",
            Tensor::from_raw(shape, out),
            &[self, k, v],
            move |g| {
                let mut grads = [vec![0.0; l * d], vec![0.0; l * d], vec![0.0; l * d]];
                let mut dp = vec![0.0; l * l];
                let mut tmp = vec![0.0; l * dh];
                for (h, p) in probs.iter().enumerate() {
                    let goh = head_block(g, l, d, h, dh);
                    let vh = head_block(vv.data(), l, d, h, dh);
                    if needs[2] {
                        gemm(l, l, dh, p, true, &goh, false, &mut tmp, false);
                        put_head_block(&mut grads[2], &tmp, l, d, h, dh);
                    }
                    if !needs[0] && !needs[1] {
                        continue;
                    }
                    gemm(l, dh, l, &goh, false, &vh, true, &mut dp, false);
                    for i in 0..l {
                        let (pr, dr) = (&p[i * l..i * l + i + 1], &mut dp[i * l..(i + 1) * l]);
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        let (live, masked) = dr.split_at_mut(i + 1);
                        live.iter_mut().zip(pr).for_each(|(x, &pv)| *x = pv * (*x - dot) * scale);
                        masked.fill(0.0);
                    }
                    if needs[0] {
                        let kh = head_block(kv.data(), l, d, h, dh);
                        gemm(l, l, dh, &dp, false, &kh, false, &mut tmp, false);
                        put_head_block(&mut grads[0], &tmp, l, d, h, dh);
                    }
                    if needs[1] {
                        let qh = head_block(qv.data(), l, d, h, dh);
                        gemm(l, l, dh, &dp, true, &qh, false, &mut tmp, false);
                        put_head_block(&mut grads[1], &tmp, l, d, h, dh);
                    }
                }
                let [gq, gk, gv] = grads;
                vec![needs[0].then_some(gq), needs[1].then_some(gk), needs[2].then_some(gv)]
            },
        )
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat_axis<'g>(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Dimension("concat_axis of nothing".into()))?;
    let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
    let base = values[0].shape().to_vec();
    check_axis(&base, axis, "concat_axis")?;
    for v in &values[1..] {
        let s = v.shape();
        if s.len() != base.len()
            || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(Error::Dimension(format!(
                "concat_axis: {s:?} incompatible with {base:?} on axis {axis}"
            )));
        }
    }
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let (outer, _, inner) = split_dims(&base, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &l) in values.iter().zip(&lens) {
            out.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    let needs: Vec<bool> = parts.iter().map(Var::requires_grad).collect();
    first.graph.record(
        "concat_axis",
        Tensor::from_raw(shape, out),
        parts,
        move |g| {
            let mut grads: Vec<Option<Vec<f64>>> = needs
                .iter()
                .zip(&lens)
                .map(|(&n, &l)| n.then(|| Vec::with_capacity(outer * l * inner)))
                .collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (gr, &l) in grads.iter_mut().zip(&lens) {
                    if let Some(gr) = gr {
                        gr.extend_from_slice(&g[pos..pos + l * inner]);
                    }
                    pos += l * inner;
                }
            }
            grads
        },
    )
}
