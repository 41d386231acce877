//! Reverse-mode tape over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during one forward pass;
//! [`Graph::backward`] then walks the tape in reverse and accumulates
//! gradients for every node and parameter that feeds the loss.

use super::kernels::{self, ConvGeom};
use super::params::{BufferId, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm, running-stat updates recorded.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Parameter handles of one batch-norm layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate {
    pub layer: BnParams,
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

/// One bilinear gather: four taps into the flattened input plane.
pub type Taps = [(usize, f64); 4];

enum Op {
    Input,
    Param,
    Scale(Var, f64),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    ExpScaled {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Add(Var, Var),
    CenterCrop {
        x: Var,
        top: usize,
        left: usize,
    },
    Xcorr {
        z: Var,
        x: Var,
    },
    ChannelSum(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        attn: Vec<f64>,
    },
    Gather {
        x: Var,
        points: usize,
        taps: Vec<Taps>,
    },
    Custom {
        x: Var,
        grad: Tensor,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    mode: Mode,
    bn_updates: Vec<BnUpdate>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.params().len()],
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.store.param(id).clone(), Op::Param);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let wv = self.param(w);
        let bv = b.map(|b| self.param(b));
        let [n, cin, h, wd] = self.value(x).dims4();
        let [cout, wcin, k, k2] = self.value(wv).dims4();
        if wcin != cin || k != k2 {
            return Err(Error::shape(format!(
                "conv weight {:?} on input {:?}",
                self.value(wv).shape(),
                self.value(x).shape()
            )));
        }
        let geom = ConvGeom::new(cin, h, wd, k, stride, pad)
            .ok_or_else(|| Error::shape(format!("input {h}x{wd} too small for kernel {k}")))?;
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let mut out = Tensor::zeros(&[n, cout, geom.ho, geom.wo]);
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; rows * cols_n]
        };
        {
            let xd = self.value(x).data();
            let wd_ = self.value(wv).data();
            let od = out.data_mut();
            for s in 0..n {
                let xs = &xd[s * cin * h * wd..(s + 1) * cin * h * wd];
                let os = &mut od[s * cout * cols_n..(s + 1) * cout * cols_n];
                let colref: &[f64] = if geom.is_pointwise() {
                    xs
                } else {
                    kernels::im2col(xs, &geom, &mut cols);
                    &cols
                };
                kernels::gemm(cout, rows, cols_n, wd_, false, colref, false, os, 0.0);
            }
        }
        if let Some(bv) = bv {
            let bias = self.value(bv).data().to_vec();
            for (plane, bias) in out
                .data_mut()
                .chunks_mut(cols_n)
                .zip(bias.iter().cycle())
            {
                for o in plane {
                    *o += bias;
                }
            }
        }
        Ok(self.push(out, Op::Conv2d { x, w: wv, b: bv, geom }))
    }

    pub fn batch_norm(&mut self, x: Var, bn: &BnParams) -> Var {
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        let [n, c, h, w] = self.value(x).dims4();
        let plane = h * w;
        let m = (n * plane) as f64;
        let xd = self.value(x).data();
        let batch_stats = self.mode == Mode::Train;
        let (mean, var) = if batch_stats {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let p = &xd[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                    mean[ch] += p.iter().sum::<f64>();
                }
            }
            for v in &mut mean {
                *v /= m;
            }
            for s in 0..n {
                for ch in 0..c {
                    let p = &xd[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                    var[ch] += p.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            for v in &mut var {
                *v /= m;
            }
            (mean, var)
        } else {
            (
                self.store.buffer(bn.running_mean).data().to_vec(),
                self.store.buffer(bn.running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let od = out.data_mut();
        for s in 0..n {
            for ch in 0..c {
                let r = (s * c + ch) * plane..(s * c + ch + 1) * plane;
                for k in r {
                    let xh = (xd[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = xh;
                    od[k] = g[ch] * xh + b[ch];
                }
            }
        }
        if batch_stats {
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            self.bn_updates.push(BnUpdate {
                layer: *bn,
                mean,
                var: var.iter().map(|v| v * unbias).collect(),
            });
        }
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v *= k;
        }
        self.push(out, Op::Scale(x, k))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = v.max(0.0);
        }
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        self.push(out, Op::Sigmoid(x))
    }

    /// `scale * exp(clamp(x, lo, hi))`; zero gradient where the clamp is active.
    pub fn exp_scaled(&mut self, x: Var, scale: f64, lo: f64, hi: f64) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = scale * v.clamp(lo, hi).exp();
        }
        self.push(out, Op::ExpScaled { x, lo, hi })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn center_crop(&mut self, x: Var, size: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4();
        if size > h || size > w {
            return Err(Error::shape(format!("cannot crop {h}x{w} to {size}")));
        }
        let top = (h - size) / 2;
        let left = (w - size) / 2;
        let xd = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, size, size]);
        let od = out.data_mut();
        for p in 0..n * c {
            for i in 0..size {
                let src = &xd[p * h * w + (top + i) * w + left..p * h * w + (top + i) * w + left + size];
                od[(p * size + i) * size..(p * size + i + 1) * size].copy_from_slice(src);
            }
        }
        Ok(self.push(out, Op::CenterCrop { x, top, left }))
    }

    /// Depthwise valid cross-correlation of `z` (kernel) over `x`, per sample.
    pub fn xcorr(&mut self, z: Var, x: Var) -> Result<Var> {
        let [nz, cz, kh, kw] = self.value(z).dims4();
        let [n, c, h, w] = self.value(x).dims4();
        if nz != n || cz != c {
            return Err(Error::shape(format!(
                "xcorr kernel {:?} vs input {:?}",
                self.value(z).shape(),
                self.value(x).shape()
            )));
        }
        if kh > h || kw > w {
            return Err(Error::shape(format!("xcorr kernel {kh}x{kw} larger than {h}x{w}")));
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        {
            let zd = self.value(z).data();
            let xd = self.value(x).data();
            let od = out.data_mut();
            for s in 0..n {
                kernels::xcorr_forward(
                    &zd[s * c * kh * kw..(s + 1) * c * kh * kw],
                    &xd[s * c * h * w..(s + 1) * c * h * w],
                    c,
                    (kh, kw),
                    (h, w),
                    &mut od[s * c * oh * ow..(s + 1) * c * oh * ow],
                );
            }
        }
        Ok(self.push(out, Op::Xcorr { z, x }))
    }

    pub fn channel_sum(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.value(x).dims4();
        let plane = h * w;
        let xd = self.value(x).data();
        let mut out = Tensor::zeros(&[n, 1, h, w]);
        let od = out.data_mut();
        for s in 0..n {
            for ch in 0..c {
                let src = &xd[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                for (o, v) in od[s * plane..(s + 1) * plane].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        self.push(out, Op::ChannelSum(x))
    }

    /// `out[:, i] = sum_j softmax_j(q[:, i] . k[:, j]) v[:, j]` over spatial positions.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let [n, d, h, w] = self.value(q).dims4();
        let [nv, cv, hv, wv] = self.value(v).dims4();
        if self.value(k).shape() != self.value(q).shape() || nv != n || hv != h || wv != w {
            return Err(Error::shape("attention operand shapes differ"));
        }
        let l = h * w;
        let mut attn = vec![0.0; n * l * l];
        let mut out = Tensor::zeros(&[n, cv, h, w]);
        {
            let (qd, kd, vd) = (
                self.value(q).data(),
                self.value(k).data(),
                self.value(v).data(),
            );
            let od = out.data_mut();
            for s in 0..n {
                kernels::attention_forward(
                    &qd[s * d * l..(s + 1) * d * l],
                    &kd[s * d * l..(s + 1) * d * l],
                    &vd[s * cv * l..(s + 1) * cv * l],
                    d,
                    cv,
                    l,
                    &mut attn[s * l * l..(s + 1) * l * l],
                    &mut od[s * cv * l..(s + 1) * cv * l],
                );
            }
        }
        Ok(self.push(out, Op::Attention { q, k, v, attn }))
    }

    /// Attention weights recorded by an [`Graph::attention`] node, `[N, L, L]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { attn, .. } => Some(attn),
            _ => None,
        }
    }

    /// Bilinear point gather. `taps` holds, per sample and output cell,
    /// `points` tap sets into the input plane; output channel `p * C + c`
    /// holds point `p` of input channel `c`. The output keeps the input's
    /// spatial size.
    pub fn gather(&mut self, x: Var, points: usize, taps: Vec<Taps>) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4();
        let l = h * w;
        if taps.len() != n * l * points {
            return Err(Error::shape(format!(
                "gather needs {} tap sets, got {}",
                n * l * points,
                taps.len()
            )));
        }
        let xd = self.value(x).data();
        let mut out = Tensor::zeros(&[n, points * c, h, w]);
        let od = out.data_mut();
        for s in 0..n {
            for cell in 0..l {
                for p in 0..points {
                    let t = &taps[(s * l + cell) * points + p];
                    for ch in 0..c {
                        let plane = &xd[(s * c + ch) * l..(s * c + ch + 1) * l];
                        let v: f64 = t.iter().map(|(i, wt)| plane[*i] * wt).sum();
                        od[((s * points + p) * c + ch) * l + cell] = v;
                    }
                }
            }
        }
        Ok(self.push(out, Op::Gather { x, points, taps }))
    }

    /// Scalar node whose value and input gradient were computed outside the tape.
    pub fn custom_loss(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.value(x).shape() {
            return Err(Error::shape(format!(
                "custom gradient {:?} for input {:?}",
                grad.shape(),
                self.value(x).shape()
            )));
        }
        Ok(self.push(Tensor::scalar(value), Op::Custom { x, grad }))
    }

    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let v = terms
            .iter()
            .map(|(t, w)| w * self.value(*t).data()[0])
            .sum();
        self.push(Tensor::scalar(v), Op::WeightedSum(terms))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(self.nodes[root.0].value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        }
    }

    fn backward_node(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gyd = gy.data();
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Scale(x, k) => {
                let dx: Vec<f64> = gyd.iter().map(|g| g * k).collect();
                accumulate(grads, *x, gy.shape(), &dx);
            }
            Op::Conv2d { x, w, b, geom } => {
                let [n, cout, _, _] = node.value.dims4();
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
                let in_per = geom.cin * geom.h * geom.w;
                let mut dw = vec![0.0; wv.len()];
                let mut dx = vec![0.0; xv.len()];
                let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { rows * cols_n }];
                let mut dcols = vec![0.0; rows * cols_n];
                for s in 0..n {
                    let xs = &xv.data()[s * in_per..(s + 1) * in_per];
                    let gs = &gyd[s * cout * cols_n..(s + 1) * cout * cols_n];
                    let colref: &[f64] = if geom.is_pointwise() {
                        xs
                    } else {
                        kernels::im2col(xs, geom, &mut cols);
                        &cols
                    };
                    kernels::gemm(cout, cols_n, rows, gs, false, colref, true, &mut dw, 1.0);
                    if geom.is_pointwise() {
                        kernels::gemm(
                            rows,
                            cout,
                            cols_n,
                            wv.data(),
                            true,
                            gs,
                            false,
                            &mut dx[s * in_per..(s + 1) * in_per],
                            1.0,
                        );
                    } else {
                        kernels::gemm(rows, cout, cols_n, wv.data(), true, gs, false, &mut dcols, 0.0);
                        kernels::col2im(&dcols, geom, &mut dx[s * in_per..(s + 1) * in_per]);
                    }
                }
                accumulate(grads, *w, wv.shape(), &dw);
                accumulate(grads, *x, xv.shape(), &dx);
                if let Some(b) = b {
                    let mut db = vec![0.0; cout];
                    for (k, plane) in gyd.chunks(cols_n).enumerate() {
                        db[k % cout] += plane.iter().sum::<f64>();
                    }
                    accumulate(grads, *b, &[cout], &db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = node.value.dims4();
                let plane = h * w;
                let m = (n * plane) as f64;
                let g = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let r = (s * c + ch) * plane..(s * c + ch + 1) * plane;
                        for k in r {
                            dgamma[ch] += gyd[k] * xhat[k];
                            dbeta[ch] += gyd[k];
                        }
                    }
                }
                let mut dx = vec![0.0; gyd.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let r = (s * c + ch) * plane..(s * c + ch + 1) * plane;
                        for k in r {
                            dx[k] = if *batch_stats {
                                // dxhat = gy * gamma; sums of dxhat are gamma * dbeta and gamma * dgamma
                                g[ch] * inv_std[ch] / m
                                    * (m * gyd[k] - dbeta[ch] - xhat[k] * dgamma[ch])
                            } else {
                                gyd[k] * g[ch] * inv_std[ch]
                            };
                        }
                    }
                }
                accumulate(grads, *x, node.value.shape(), &dx);
                accumulate(grads, *gamma, &[c], &dgamma);
                accumulate(grads, *beta, &[c], &dbeta);
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let dx: Vec<f64> = gyd
                    .iter()
                    .zip(xd)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, node.value.shape(), &dx);
            }
            Op::Sigmoid(x) => {
                let yd = node.value.data();
                let dx: Vec<f64> = gyd.iter().zip(yd).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate(grads, *x, node.value.shape(), &dx);
            }
            Op::ExpScaled { x, lo, hi } => {
                let xd = self.value(*x).data();
                let yd = node.value.data();
                let dx: Vec<f64> = gyd
                    .iter()
                    .zip(yd.iter().zip(xd))
                    .map(|(g, (y, xv))| if xv < lo || xv > hi { 0.0 } else { g * y })
                    .collect();
                accumulate(grads, *x, node.value.shape(), &dx);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, gy.shape(), gyd);
                accumulate(grads, *b, gy.shape(), gyd);
            }
            Op::CenterCrop { x, top, left } => {
                let xv = self.value(*x);
                let [n, c, h, w] = xv.dims4();
                let [_, _, size, _] = node.value.dims4();
                let mut dx = vec![0.0; xv.len()];
                for p in 0..n * c {
                    for r in 0..size {
                        let dst = p * h * w + (top + r) * w + left;
                        dx[dst..dst + size]
                            .copy_from_slice(&gyd[(p * size + r) * size..(p * size + r + 1) * size]);
                    }
                }
                accumulate(grads, *x, xv.shape(), &dx);
            }
            Op::Xcorr { z, x } => {
                let zv = self.value(*z);
                let xv = self.value(*x);
                let [n, c, kh, kw] = zv.dims4();
                let [_, _, h, w] = xv.dims4();
                let (oh, ow) = (h - kh + 1, w - kw + 1);
                let mut dz = vec![0.0; zv.len()];
                let mut dx = vec![0.0; xv.len()];
                for s in 0..n {
                    kernels::xcorr_backward(
                        &zv.data()[s * c * kh * kw..(s + 1) * c * kh * kw],
                        &xv.data()[s * c * h * w..(s + 1) * c * h * w],
                        &gyd[s * c * oh * ow..(s + 1) * c * oh * ow],
                        c,
                        (kh, kw),
                        (h, w),
                        &mut dz[s * c * kh * kw..(s + 1) * c * kh * kw],
                        &mut dx[s * c * h * w..(s + 1) * c * h * w],
                    );
                }
                accumulate(grads, *z, zv.shape(), &dz);
                accumulate(grads, *x, xv.shape(), &dx);
            }
            Op::ChannelSum(x) => {
                let xv = self.value(*x);
                let [n, c, h, w] = xv.dims4();
                let plane = h * w;
                let mut dx = vec![0.0; xv.len()];
                for s in 0..n {
                    for ch in 0..c {
                        dx[(s * c + ch) * plane..(s * c + ch + 1) * plane]
                            .copy_from_slice(&gyd[s * plane..(s + 1) * plane]);
                    }
                }
                accumulate(grads, *x, xv.shape(), &dx);
            }
            Op::Attention { q, k, v, attn } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let [n, d, h, w] = qv.dims4();
                let [_, cv, _, _] = vv.dims4();
                let l = h * w;
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                for s in 0..n {
                    let qs = s * d * l..(s + 1) * d * l;
                    let vs = s * cv * l..(s + 1) * cv * l;
                    kernels::attention_backward(
                        &qv.data()[qs.clone()],
                        &kv.data()[qs.clone()],
                        &vv.data()[vs.clone()],
                        &attn[s * l * l..(s + 1) * l * l],
                        &gyd[vs.clone()],
                        d,
                        cv,
                        l,
                        &mut dq[qs.clone()],
                        &mut dk[qs],
                        &mut dv[vs],
                    );
                }
                accumulate(grads, *q, qv.shape(), &dq);
                accumulate(grads, *k, kv.shape(), &dk);
                accumulate(grads, *v, vv.shape(), &dv);
            }
            Op::Gather { x, points, taps } => {
                let xv = self.value(*x);
                let [n, c, h, w] = xv.dims4();
                let l = h * w;
                let mut dx = vec![0.0; xv.len()];
                for s in 0..n {
                    for cell in 0..l {
                        for p in 0..*points {
                            let t = &taps[(s * l + cell) * points + p];
                            for ch in 0..c {
                                let g = gyd[((s * points + p) * c + ch) * l + cell];
                                let base = (s * c + ch) * l;
                                for (idx, wt) in t {
                                    dx[base + idx] += g * wt;
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, xv.shape(), &dx);
            }
            Op::Custom { x, grad } => {
                let s = gyd[0];
                let dx: Vec<f64> = grad.data().iter().map(|g| g * s).collect();
                accumulate(grads, *x, grad.shape(), &dx);
            }
            Op::WeightedSum(terms) => {
                for (t, wt) in terms {
                    accumulate(grads, *t, &[1], &[gyd[0] * wt]);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], g: &[f64]) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::from_vec(shape, g.to_vec()).expect("gradient shape"));
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a parameter; `None` when it did not influence the root.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_vars[id.0].and_then(|v| self.grads[v.0].as_ref())
    }

    /// Parameter gradients flattened in registration order, zeros for
    /// parameters that did not reach the root.
    pub fn flatten_params(&self, store: &ParamStore) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.num_scalars());
        for id in store.ids() {
            match self.param(id) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(0.0, store.param(id).len())),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::compare_with_finite_differences;
    use crate::nn::params::ParamGroup;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Builds a scalar `sum(out * probe)` from the op under test and checks
    /// every parameter's gradient against central differences.
    fn check_params<F>(store: ParamStore, mode: Mode, build: F)
    where
        F: Fn(&mut Graph) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe_shape = {
            let mut g = Graph::new(&store, mode);
            let out = build(&mut g);
            g.value(out).shape().to_vec()
        };
        let probe = rand_tensor(&mut rng, &probe_shape);
        let eval = |store: &ParamStore| {
            let mut g = Graph::new(store, mode);
            let out = build(&mut g);
            let v: f64 = g.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
            v
        };
        let mut g = Graph::new(&store, mode);
        let out = build(&mut g);
        let loss = g.custom_loss(out, 0.0, probe.clone()).unwrap();
        let grads = g.backward(loss);
        let analytic = grads.flatten_params(&store);
        let flat = store.flatten();
        let mut work = store.clone();
        let r = compare_with_finite_differences(
            |x| {
                work.load_flat(x);
                eval(&work)
            },
            &flat,
            &analytic,
            1e-6,
            1e-4,
        );
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, stride, pad) in [(3, 2, 0), (3, 1, 1), (1, 1, 0)] {
            let mut store = ParamStore::new();
            let x = store.add_param("x", ParamGroup::Head, rand_tensor(&mut rng, &[2, 2, 7, 6]));
            let w = store.add_param("w", ParamGroup::Head, rand_tensor(&mut rng, &[3, 2, k, k]));
            let b = store.add_param("b", ParamGroup::Head, rand_tensor(&mut rng, &[3]));
            check_params(store, Mode::Train, |g| {
                let xv = g.param(x);
                g.conv2d(xv, w, Some(b), stride, pad).unwrap()
            });
        }
    }

    #[test]
    fn batch_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let x = store.add_param("x", ParamGroup::Head, rand_tensor(&mut rng, &[2, 3, 4, 4]));
        let gamma = store.add_param("g", ParamGroup::Head, rand_tensor(&mut rng, &[3]));
        let beta = store.add_param("b", ParamGroup::Head, rand_tensor(&mut rng, &[3]));
        let rm = store.add_buffer("rm", Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap());
        let rv = store.add_buffer("rv", Tensor::from_vec(&[3], vec![1.5, 0.5, 2.0]).unwrap());
        let bn = BnParams {
            gamma,
            beta,
            running_mean: rm,
            running_var: rv,
        };
        for mode in [Mode::Train, Mode::Eval] {
            check_params(store.clone(), mode, |g| {
                let xv = g.param(x);
                g.batch_norm(xv, &bn)
            });
        }
    }

    #[test]
    fn xcorr_crop_sum_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let z = store.add_param("z", ParamGroup::Head, rand_tensor(&mut rng, &[2, 3, 5, 5]));
        let x = store.add_param("x", ParamGroup::Head, rand_tensor(&mut rng, &[2, 3, 7, 8]));
        check_params(store, Mode::Train, |g| {
            let zv = g.param(z);
            let zc = g.center_crop(zv, 3).unwrap();
            let xv = g.param(x);
            let c = g.xcorr(zc, xv).unwrap();
            let s = g.channel_sum(c);
            let s = g.scale(s, 0.3);
            let r = g.relu(s);
            g.sigmoid(r)
        });
    }

    #[test]
    fn exp_scaled_gradients_respect_clamp() {
        let mut store = ParamStore::new();
        let vals = vec![-20.0, -1.0, 0.0, 0.5, 1.5, 12.0];
        let x = store.add_param("x", ParamGroup::Head, Tensor::from_vec(&[1, 1, 2, 3], vals).unwrap());
        check_params(store.clone(), Mode::Train, |g| {
            let xv = g.param(x);
            g.exp_scaled(xv, 2.0, -15.0, 10.0)
        });
        let mut g = Graph::new(&store, Mode::Train);
        let xv = g.param(x);
        let y = g.exp_scaled(xv, 2.0, -15.0, 10.0);
        assert_eq!(g.value(y).data()[5], 2.0 * 10f64.exp());
        let loss = g.custom_loss(y, 0.0, Tensor::filled(&[1, 1, 2, 3], 1.0)).unwrap();
        let grads = g.backward(loss);
        let d = grads.param(x).unwrap().data();
        assert_eq!((d[0], d[5]), (0.0, 0.0));
        assert!((d[3] - 2.0 * 0.5f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn attention_and_gather_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let q = store.add_param("q", ParamGroup::Head, rand_tensor(&mut rng, &[2, 2, 3, 3]));
        let k = store.add_param("k", ParamGroup::Head, rand_tensor(&mut rng, &[2, 2, 3, 3]));
        let v = store.add_param("v", ParamGroup::Head, rand_tensor(&mut rng, &[2, 3, 3, 3]));
        let taps: Vec<Taps> = (0..2 * 9 * 5)
            .map(|_| {
                kernels::bilinear_taps(rng.random_range(-1.0..4.0), rng.random_range(-1.0..4.0), 3, 3)
            })
            .collect();
        check_params(store, Mode::Train, |g| {
            let (qv, kv, vv) = (g.param(q), g.param(k), g.param(v));
            let a = g.attention(qv, kv, vv).unwrap();
            let s = g.add(a, vv).unwrap();
            g.gather(s, 5, taps.clone()).unwrap()
        });
    }

    #[test]
    fn weighted_sum_of_custom_losses() {
        let mut store = ParamStore::new();
        let x = store.add_param("x", ParamGroup::Head, Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let mut g = Graph::new(&store, Mode::Train);
        let xv = g.param(x);
        let a = g.custom_loss(xv, 5.0, Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap()).unwrap();
        let b = g.custom_loss(xv, 7.0, Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap()).unwrap();
        let t = g.weighted_sum(vec![(a, 1.0), (b, 0.5)]);
        assert_eq!(g.value(t).data()[0], 8.5);
        let grads = g.backward(t);
        assert_eq!(grads.param(x).unwrap().data(), &[1.0, 0.5]);
    }
}
