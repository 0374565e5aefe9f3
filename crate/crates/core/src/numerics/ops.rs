//! Differentiable operations recorded on a [`Tape`].

use std::rc::Rc;

use super::tape::{Tape, Var};
use super::tensor::{gemm_acc, Tensor};
use crate::error::{Error, Result};

/// Boolean attention mask, `rows × cols`, `true` = may attend.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != rows * cols {
            return Err(Error::Dimension {
                op: "Mask::new",
                lhs: vec![rows, cols],
                rhs: vec![allow.len()],
            });
        }
        Ok(Mask { rows, cols, allow })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allow.push(f(i, j));
            }
        }
        Mask { rows, cols, allow }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allow[i * self.cols..(i + 1) * self.cols]
    }

    pub fn all_true(&self) -> bool {
        self.allow.iter().all(|&a| a)
    }

    /// Fails with a contract error if any row forbids every position.
    pub fn check_rows_nonempty(&self) -> Result<()> {
        for i in 0..self.rows {
            if !self.row(i).iter().any(|&a| a) {
                return Err(Error::contract(format!("mask row {i} allows no position")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Dimension {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Numerically stable in-place softmax of one row; `-inf` entries get probability 0.
fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl Tape {
    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (m, k) = require_rank2("matmul", a.value())?;
        let (k2, n) = require_rank2("matmul", b.value())?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(a.value().data(), false, b.value().data(), false, &mut out, m, k, n);
        let (av, bv) = (a.rc(), b.rc());
        Ok(self.record(
            Tensor::from_parts(vec![m, n], out),
            &[a, b],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm_acc(g.data(), false, bv.data(), true, &mut ga, m, n, k);
                    Tensor::from_parts(vec![m, k], ga)
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm_acc(av.data(), true, g.data(), false, &mut gb, k, m, n);
                    Tensor::from_parts(vec![k, n], gb)
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("add", a.value(), b.value())?;
        let data = a
            .value()
            .data()
            .iter()
            .zip(b.value().data())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.record(
            Tensor::from_parts(a.shape().to_vec(), data),
            &[a, b],
            Box::new(|g, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]),
        ))
    }

    /// Adds a length-`n` vector to every row of `x[.. × n]`.
    pub fn add_bias(&self, x: &Var, bias: &Var) -> Result<Var> {
        let n = x.value().cols();
        if bias.value().numel() != n || bias.value().rank() != 1 {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: x.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let b = bias.value().data();
        let mut data = x.value().data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        Ok(self.record(
            Tensor::from_parts(x.shape().to_vec(), data),
            &[x, bias],
            Box::new(move |g, needs| {
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::from_parts(vec![n], gb)
                });
                vec![needs[0].then(|| g.clone()), gb]
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("mul", a.value(), b.value())?;
        let data = a
            .value()
            .data()
            .iter()
            .zip(b.value().data())
            .map(|(x, y)| x * y)
            .collect();
        let (av, bv) = (a.rc(), b.rc());
        Ok(self.record(
            Tensor::from_parts(a.shape().to_vec(), data),
            &[a, b],
            Box::new(move |g, needs| {
                let prod = |other: &Tensor| {
                    Tensor::from_parts(
                        g.shape().to_vec(),
                        g.data().iter().zip(other.data()).map(|(x, y)| x * y).collect(),
                    )
                };
                vec![needs[0].then(|| prod(&bv)), needs[1].then(|| prod(&av))]
            }),
        ))
    }

    pub fn scale(&self, x: &Var, s: f64) -> Var {
        self.record(
            x.value().map(|v| v * s),
            &[x],
            Box::new(move |g, _| vec![Some(g.map(|v| v * s))]),
        )
    }

    pub fn relu(&self, x: &Var) -> Var {
        let xv = x.rc();
        self.record(
            x.value().map(|v| v.max(0.0)),
            &[x],
            Box::new(move |g, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
            }),
        )
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self, x: &Var) -> Var {
        let shape = x.shape().to_vec();
        self.record(
            Tensor::scalar(x.value().data().iter().sum()),
            &[x],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    /// Softmax over the last dimension.
    pub fn softmax(&self, x: &Var) -> Result<Var> {
        let n = x.value().cols();
        if x.value().rank() == 0 || n == 0 {
            return Err(Error::Dimension {
                op: "softmax",
                lhs: x.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut data = x.value().data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_row(row);
        }
        let y = Rc::new(Tensor::from_parts(x.shape().to_vec(), data));
        let yv = Rc::clone(&y);
        Ok(self.record(
            (*y).clone(),
            &[x],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; g.numel()];
                for ((gr, yr), out) in g.data().chunks(n).zip(yv.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![Some(Tensor::from_parts(g.shape().to_vec(), gx))]
            }),
        ))
    }

    /// Per-row normalisation to zero mean and unit variance, then `gamma * x + beta`.
    pub fn layer_norm(&self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let d = x.value().cols();
        if gamma.value().numel() != d || beta.value().numel() != d {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let rows = x.value().rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        let (gm, bt) = (gamma.value().data(), beta.value().data());
        for r in 0..rows {
            let xr = &x.value().data()[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (xr[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = gm[c] * h + bt[c];
            }
        }
        let gv = gamma.rc();
        Ok(self.record(
            Tensor::from_parts(x.shape().to_vec(), out),
            &[x, gamma, beta],
            Box::new(move |g, needs| {
                let gd = g.data();
                let gx = needs[0].then(|| {
                    let gm = gv.data();
                    let mut gx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let gr = &gd[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_g = 0.0;
                        let mut mean_gh = 0.0;
                        for c in 0..d {
                            let gh = gr[c] * gm[c];
                            mean_g += gh;
                            mean_gh += gh * hr[c];
                        }
                        mean_g /= d as f64;
                        mean_gh /= d as f64;
                        for c in 0..d {
                            gx[r * d + c] = inv_std[r] * (gr[c] * gm[c] - mean_g - hr[c] * mean_gh);
                        }
                    }
                    Tensor::from_parts(vec![rows, d], gx)
                });
                let gg = needs[1].then(|| {
                    let mut gg = vec![0.0; d];
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] += gd[r * d + c] * xhat[r * d + c];
                        }
                    }
                    Tensor::from_parts(gv.shape().to_vec(), gg)
                });
                let gb = needs[2].then(|| {
                    let mut gb = vec![0.0; d];
                    for row in gd.chunks(d) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::from_parts(gv.shape().to_vec(), gb)
                });
                vec![gx.map(|t| t.reshape(g.shape()).expect("same numel")), gg, gb]
            }),
        ))
    }

    /// Per-dimension tap filter over time, without the identity term:
    ///
    /// `out_t = Σ_{i<L_l} left_i ⊙ v_{t-i} + Σ_{j=1..=L_r} right_{j-1} ⊙ v_{t+j}`.
    ///
    /// Positions outside `0..T` read zero, except that negative positions read from
    /// `left_context` (its last row is `v_{-1}`) when one is supplied.
    pub fn depthwise_conv1d(
        &self,
        v: &Var,
        left: &Var,
        right: Option<&Var>,
        left_context: Option<&Var>,
    ) -> Result<Var> {
        let (t_len, d) = require_rank2("depthwise_conv1d", v.value())?;
        let (l_left, dl) = require_rank2("depthwise_conv1d", left.value())?;
        let dim_err = |other: &Var| Error::Dimension {
            op: "depthwise_conv1d",
            lhs: v.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        if dl != d {
            return Err(dim_err(left));
        }
        let l_right = match right {
            Some(r) => {
                let (lr, dr) = require_rank2("depthwise_conv1d", r.value())?;
                if dr != d {
                    return Err(dim_err(r));
                }
                lr
            }
            None => 0,
        };
        let n_ctx = match left_context {
            Some(c) => {
                let (n, dc) = require_rank2("depthwise_conv1d", c.value())?;
                if dc != d || n + 1 > l_left.max(1) {
                    return Err(dim_err(c));
                }
                n
            }
            None => 0,
        };
        let vv = v.rc();
        let lv = left.rc();
        let rv = right.map(Var::rc);
        let cv = left_context.map(Var::rc);
        let has_ctx = left_context.is_some();
        // Source of time index `t`: `Ok(row)` in `v`, `Err(row)` in the context, or nothing.
        let src = move |t: isize| -> Option<std::result::Result<usize, usize>> {
            if t >= 0 && (t as usize) < t_len {
                Some(Ok(t as usize))
            } else if t < 0 && has_ctx && t.unsigned_abs() <= n_ctx {
                Some(Err((n_ctx as isize + t) as usize))
            } else {
                None
            }
        };
        let mut out = vec![0.0; t_len * d];
        for t in 0..t_len as isize {
            let o = &mut out[t as usize * d..(t as usize + 1) * d];
            for i in 0..l_left {
                if let Some(at) = src(t - i as isize) {
                    let row = match at {
                        Ok(r) => vv.row(r),
                        Err(r) => cv.as_ref().expect("context present").row(r),
                    };
                    let tap = lv.row(i);
                    for c in 0..d {
                        o[c] += tap[c] * row[c];
                    }
                }
            }
            if let Some(rv) = &rv {
                for j in 1..=l_right {
                    if let Some(Ok(r)) = src(t + j as isize) {
                        let row = vv.row(r);
                        let tap = rv.row(j - 1);
                        for c in 0..d {
                            o[c] += tap[c] * row[c];
                        }
                    }
                }
            }
        }
        let mut inputs: Vec<&Var> = vec![v, left];
        if let Some(r) = right {
            inputs.push(r);
        }
        if let Some(c) = left_context {
            inputs.push(c);
        }
        let has_right = right.is_some();
        Ok(self.record(
            Tensor::from_parts(vec![t_len, d], out),
            &inputs,
            Box::new(move |g, needs| {
                let mut gv = vec![0.0; t_len * d];
                let mut gl = vec![0.0; l_left * d];
                let mut gr = vec![0.0; l_right * d];
                let mut gc = vec![0.0; n_ctx * d];
                for t in 0..t_len as isize {
                    let gt = g.row(t as usize);
                    for i in 0..l_left {
                        if let Some(at) = src(t - i as isize) {
                            let tap = lv.row(i);
                            let (row, dst) = match at {
                                Ok(r) => (vv.row(r), &mut gv[r * d..(r + 1) * d]),
                                Err(r) => (
                                    cv.as_ref().expect("context present").row(r),
                                    &mut gc[r * d..(r + 1) * d],
                                ),
                            };
                            for c in 0..d {
                                dst[c] += gt[c] * tap[c];
                                gl[i * d + c] += gt[c] * row[c];
                            }
                        }
                    }
                    if let Some(rv) = &rv {
                        for j in 1..=l_right {
                            if let Some(Ok(r)) = src(t + j as isize) {
                                let tap = rv.row(j - 1);
                                let row = vv.row(r);
                                for c in 0..d {
                                    gv[r * d + c] += gt[c] * tap[c];
                                    gr[(j - 1) * d + c] += gt[c] * row[c];
                                }
                            }
                        }
                    }
                }
                let mut res = vec![
                    needs[0].then(|| Tensor::from_parts(vec![t_len, d], gv)),
                    needs[1].then(|| Tensor::from_parts(vec![l_left, d], gl)),
                ];
                let mut k = 2;
                if has_right {
                    res.push(needs[k].then(|| Tensor::from_parts(vec![l_right, d], gr)));
                    k += 1;
                }
                if has_ctx {
                    res.push(needs[k].then(|| Tensor::from_parts(vec![n_ctx, d], gc)));
                }
                res
            }),
        ))
    }

    /// Scaled dot-product attention over `heads` column blocks of already-projected
    /// `q[Tq×d]`, `k[Tk×d]`, `v[Tk×d]`. Returns the concatenated head outputs `[Tq×d]`.
    pub fn attention(
        &self,
        q: &Var,
        k: &Var,
        v: &Var,
        heads: usize,
        mask: Option<&Mask>,
    ) -> Result<Var> {
        let (tq, d) = require_rank2("attention", q.value())?;
        let (tk, dk_) = require_rank2("attention", k.value())?;
        let dim_err = |a: &Var, b: &Var| Error::Dimension {
            op: "attention",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        if dk_ != d {
            return Err(dim_err(q, k));
        }
        if v.shape() != k.shape() {
            return Err(dim_err(k, v));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!("width {d} not divisible by {heads} heads")));
        }
        if let Some(m) = mask {
            if m.rows() != tq || m.cols() != tk {
                return Err(Error::Dimension {
                    op: "attention mask",
                    lhs: vec![m.rows(), m.cols()],
                    rhs: vec![tq, tk],
                });
            }
            m.check_rows_nonempty()?;
        }
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let head_cols = move |t: &Tensor, rows: usize, h: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(rows * dk);
            for r in 0..rows {
                out.extend_from_slice(&t.data()[r * d + h * dk..r * d + (h + 1) * dk]);
            }
            out
        };
        let mut out = vec![0.0; tq * d];
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = head_cols(q.value(), tq, h);
            let kh = head_cols(k.value(), tk, h);
            let vh = head_cols(v.value(), tk, h);
            let mut s = vec![0.0; tq * tk];
            gemm_acc(&qh, false, &kh, true, &mut s, tq, dk, tk);
            for (i, row) in s.chunks_mut(tk).enumerate() {
                for (j, x) in row.iter_mut().enumerate() {
                    *x = if mask.is_none_or(|m| m.allows(i, j)) {
                        *x * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                softmax_row(row);
            }
            let mut oh = vec![0.0; tq * dk];
            gemm_acc(&s, false, &vh, false, &mut oh, tq, tk, dk);
            for r in 0..tq {
                out[r * d + h * dk..r * d + (h + 1) * dk].copy_from_slice(&oh[r * dk..(r + 1) * dk]);
            }
            probs.push(s);
        }
        let (qv, kv, vv) = (q.rc(), k.rc(), v.rc());
        Ok(self.record(
            Tensor::from_parts(vec![tq, d], out),
            &[q, k, v],
            Box::new(move |g, needs| {
                let mut gq = vec![0.0; tq * d];
                let mut gk = vec![0.0; tk * d];
                let mut gv = vec![0.0; tk * d];
                for (h, p) in probs.iter().enumerate() {
                    let qh = head_cols(&qv, tq, h);
                    let kh = head_cols(&kv, tk, h);
                    let vh = head_cols(&vv, tk, h);
                    let goh = head_cols(g, tq, h);
                    let mut gvh = vec![0.0; tk * dk];
                    gemm_acc(p, true, &goh, false, &mut gvh, tk, tq, dk);
                    let mut gp = vec![0.0; tq * tk];
                    gemm_acc(&goh, false, &vh, true, &mut gp, tq, dk, tk);
                    for (gr, pr) in gp.chunks_mut(tk).zip(p.chunks(tk)) {
                        let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for (x, pv) in gr.iter_mut().zip(pr) {
                            *x = pv * (*x - dot) * scale;
                        }
                    }
                    let mut gqh = vec![0.0; tq * dk];
                    gemm_acc(&gp, false, &kh, false, &mut gqh, tq, tk, dk);
                    let mut gkh = vec![0.0; tk * dk];
                    gemm_acc(&gp, true, &qh, false, &mut gkh, tk, tq, dk);
                    for r in 0..tq {
                        gq[r * d + h * dk..r * d + (h + 1) * dk].copy_from_slice(&gqh[r * dk..(r + 1) * dk]);
                    }
                    for r in 0..tk {
                        gk[r * d + h * dk..r * d + (h + 1) * dk].copy_from_slice(&gkh[r * dk..(r + 1) * dk]);
                        gv[r * d + h * dk..r * d + (h + 1) * dk].copy_from_slice(&gvh[r * dk..(r + 1) * dk]);
                    }
                }
                vec![
                    needs[0].then(|| Tensor::from_parts(vec![tq, d], gq)),
                    needs[1].then(|| Tensor::from_parts(vec![tk, d], gk)),
                    needs[2].then(|| Tensor::from_parts(vec![tk, d], gv)),
                ]
            }),
        ))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&self, parts: &[&Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::contract("concat_rows of nothing"));
        };
        let cols = first.value().cols();
        let mut sizes = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = require_rank2("concat_rows", p.value())?;
            if c != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            sizes.push(r);
            data.extend_from_slice(p.value().data());
        }
        let total: usize = sizes.iter().sum();
        Ok(self.record(
            Tensor::from_parts(vec![total, cols], data),
            parts,
            Box::new(move |g, needs| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(needs)
                    .map(|(&r, &need)| {
                        let piece = need.then(|| g.slice_rows(start, r));
                        start += r;
                        piece
                    })
                    .collect()
            }),
        ))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&self, parts: &[&Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::contract("concat_cols of nothing"));
        };
        let rows = first.value().rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = require_rank2("concat_cols", p.value())?;
            if r != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.value().row(r));
            }
        }
        Ok(self.record(
            Tensor::from_parts(vec![rows, total], data),
            parts,
            Box::new(move |g, needs| {
                let mut offset = 0;
                widths
                    .iter()
                    .zip(needs)
                    .map(|(&w, &need)| {
                        let piece = need.then(|| {
                            let mut out = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                out.extend_from_slice(&g.row(r)[offset..offset + w]);
                            }
                            Tensor::from_parts(vec![rows, w], out)
                        });
                        offset += w;
                        piece
                    })
                    .collect()
            }),
        ))
    }

    pub fn slice_rows(&self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = require_rank2("slice_rows", x.value())?;
        if len == 0 || start + len > rows {
            return Err(Error::Index {
                what: "slice_rows",
                index: start + len,
                bound: rows + 1,
            });
        }
        Ok(self.record(
            x.value().slice_rows(start, len),
            &[x],
            Box::new(move |g, _| {
                let mut full = vec![0.0; rows * cols];
                full[start * cols..(start + len) * cols].copy_from_slice(g.data());
                vec![Some(Tensor::from_parts(vec![rows, cols], full))]
            }),
        ))
    }

    pub fn reshape(&self, x: &Var, shape: &[usize]) -> Result<Var> {
        let out = x.value().reshape(shape)?;
        let orig = x.shape().to_vec();
        Ok(self.record(
            out,
            &[x],
            Box::new(move |g, _| vec![Some(g.reshape(&orig).expect("same numel"))]),
        ))
    }

    /// Row gather: output row `i` is `x[idx[i]]`, or zeros for `None`. Used for embedding
    /// lookup and for unfolding padded convolution windows.
    pub fn gather_rows(&self, x: &Var, idx: &[Option<usize>]) -> Result<Var> {
        let (rows, cols) = require_rank2("gather_rows", x.value())?;
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            match i {
                Some(i) if i < rows => data.extend_from_slice(x.value().row(i)),
                Some(i) => {
                    return Err(Error::Index {
                        what: "gather_rows",
                        index: i,
                        bound: rows,
                    })
                }
                None => data.extend(std::iter::repeat_n(0.0, cols)),
            }
        }
        let idx = idx.to_vec();
        if idx.is_empty() {
            return Err(Error::contract("gather_rows with no indices"));
        }
        Ok(self.record(
            Tensor::from_parts(vec![idx.len(), cols], data),
            &[x],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; rows * cols];
                for (o, &i) in idx.iter().enumerate() {
                    if let Some(i) = i {
                        for c in 0..cols {
                            gx[i * cols + c] += g.data()[o * cols + c];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![rows, cols], gx))]
            }),
        ))
    }

    /// Label-smoothed cross entropy over rows of `logits[N×V]`.
    ///
    /// The smoothed target puts `1 - ε + ε/V` on the true class and `ε/V` elsewhere.
    /// Rows flagged in `ignore` contribute nothing. `Mean` divides by the number of kept rows.
    pub fn cross_entropy(
        &self,
        logits: &Var,
        targets: &[usize],
        epsilon: f64,
        ignore: Option<&[bool]>,
        reduction: Reduction,
    ) -> Result<Var> {
        let (n, v) = require_rank2("cross_entropy", logits.value())?;
        if targets.len() != n || ignore.is_some_and(|m| m.len() != n) {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: logits.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::contract(format!("label smoothing {epsilon} outside [0,1)")));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                what: "cross_entropy target",
                index: bad,
                bound: v,
            });
        }
        let keep: Vec<bool> = (0..n).map(|i| !ignore.is_some_and(|m| m[i])).collect();
        let kept = keep.iter().filter(|&&k| k).count();
        let norm = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean if kept == 0 => 0.0,
            Reduction::Mean => 1.0 / kept as f64,
        };
        let q_other = epsilon / v as f64;
        let q_true = 1.0 - epsilon + q_other;
        let mut probs = logits.value().data().to_vec();
        let mut total = 0.0;
        for (i, row) in probs.chunks_mut(v).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            if keep[i] {
                let mut loss = 0.0;
                for (c, x) in row.iter().enumerate() {
                    let q = if c == targets[i] { q_true } else { q_other };
                    if q > 0.0 {
                        loss -= q * (x - lse);
                    }
                }
                total += loss;
            }
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let targets = targets.to_vec();
        Ok(self.record(
            Tensor::scalar(total * norm),
            &[logits],
            Box::new(move |g, _| {
                let s = g.item() * norm;
                let mut gx = probs.clone();
                for (i, row) in gx.chunks_mut(v).enumerate() {
                    if !keep[i] {
                        row.fill(0.0);
                        continue;
                    }
                    for (c, x) in row.iter_mut().enumerate() {
                        let q = if c == targets[i] { q_true } else { q_other };
                        *x = (*x - q) * s;
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, v], gx))]
            }),
        ))
    }
}
