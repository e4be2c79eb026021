//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for every node that depends on a parameter.

use super::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use super::params::ParamId;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const SPECTRAL_FLOOR: f64 = 1e-12;
const NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    Add(Var, Var),
    Mul(Var, Var),
    /// `x * s` with `s` a single-channel map broadcast over channels.
    MulPlane(Var, Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    AvgPool2(Var),
    ResizeNearest(Var),
    Relu(Var),
    Sigmoid(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        var: Vec<f64>,
        /// Statistics come from the batch (and are differentiated through)
        /// rather than being supplied constants.
        from_batch: bool,
    },
    SpectralNorm {
        w: Var,
        u: Vec<f64>,
        v: Vec<f64>,
        sigma: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of every parameter node, summed when a parameter was used
    /// more than once.
    pub fn params(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for &(id, node) in &self.params {
            let Some(g) = &self.grads[node] else { continue };
            match out.iter_mut().find(|(pid, _)| *pid == id) {
                Some((_, acc)) => acc.add_assign(g),
                None => out.push((id, g.clone())),
            }
        }
        out
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId, t: Tensor) -> Var {
        self.push(t, Op::Param(id), true)
    }

    /// Constant parameter: takes part in the forward pass but receives no gradient.
    pub fn frozen_param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: (usize, usize)) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert_eq!(xs[1], ws[1], "conv input channels {} vs kernel {}", xs[1], ws[1]);
        let geom = ConvGeometry::new(xs, ws, stride, pad);
        let bias = b.map(|b| self.value(b).data.as_slice());
        let out = conv2d_forward(self.value(x), self.value(w), bias, &geom);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Conv { x, w, b, geom }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(self.shape(a), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), needs)
    }

    pub fn mul_plane(&mut self, x: Var, s: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        assert_eq!(self.shape(s), [n, 1, h, w], "mul_plane expects a single-channel weight map");
        let hw = h * w;
        let xv = self.value(x);
        let sv = self.value(s);
        let mut out = Tensor::zeros([n, c, h, w]);
        for ni in 0..n {
            let sp = sv.plane(ni, 0);
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    out.data[base + i] = xv.data[base + i] * sp[i];
                }
            }
        }
        let needs = self.needs(x) || self.needs(s);
        self.push(out, Op::MulPlane(x, s), needs)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let [n, _, h, w] = self.shape(parts[0]);
        let total_c: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let hw = h * w;
        let mut out = Tensor::zeros([n, total_c, h, w]);
        for ni in 0..n {
            let mut offset = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!([pv.n(), pv.h(), pv.w()], [n, h, w], "concat shape mismatch");
                let len = pv.c() * hw;
                let dst = (ni * total_c) * hw + offset;
                out.data[dst..dst + len].copy_from_slice(pv.sample(ni));
                offset += len;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::Concat(parts.to_vec()), needs)
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let [n, c, h, w] = self.shape(x);
        assert!(start + len <= c, "channel slice out of range");
        let hw = h * w;
        let xv = self.value(x);
        let mut out = Tensor::zeros([n, len, h, w]);
        for ni in 0..n {
            let src = (ni * c + start) * hw;
            out.sample_mut(ni).copy_from_slice(&xv.data[src..src + len * hw]);
        }
        let needs = self.needs(x);
        self.push(out, Op::Slice { x, start }, needs)
    }

    /// 2x2 average pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let (oh, ow) = ((h / 2).max(1), (w / 2).max(1));
        let xv = self.value(x);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for p in 0..n * c {
            let src = &xv.data[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data[p * oh * ow..(p + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    let mut cnt = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (y, x) = (2 * oy + dy, 2 * ox + dx);
                            if y < h && x < w {
                                acc += src[y * w + x];
                                cnt += 1.0;
                            }
                        }
                    }
                    dst[oy * ow + ox] = acc / cnt;
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::AvgPool2(x), needs)
    }

    pub fn resize_nearest(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let [n, c, h, w] = self.shape(x);
        if (h, w) == (oh, ow) {
            return x;
        }
        let xv = self.value(x);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for p in 0..n * c {
            let src = &xv.data[p * h * w..(p + 1) * h * w];
            let resized = crate::raster::resize_nearest_plane(src, h, w, oh, ow);
            out.data[p * oh * ow..(p + 1) * oh * ow].copy_from_slice(&resized);
        }
        let needs = self.needs(x);
        self.push(out, Op::ResizeNearest(x), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_vec(xv.shape, xv.data.iter().map(|&v| v.max(0.0)).collect());
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_vec(xv.shape, xv.data.iter().map(|&v| sigmoid(v)).collect());
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid(x), needs)
    }

    /// Per-sample group normalization with per-channel affine parameters
    /// (`gamma`, `beta` shaped `1 x C x 1 x 1`).
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let [n, c, h, w] = self.shape(x);
        assert!(groups >= 1 && c % groups == 0, "{c} channels not divisible into {groups} groups");
        let cg = c / groups;
        let len = cg * h * w;
        let xv = self.value(x);
        let gv = &self.value(gamma).data;
        let bv = &self.value(beta).data;
        let mut out = Tensor::zeros([n, c, h, w]);
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        for ni in 0..n {
            for gi in 0..groups {
                let start = (ni * c + gi * cg) * h * w;
                let seg = &xv.data[start..start + len];
                let mean = seg.iter().sum::<f64>() / len as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
                let rstd = 1.0 / (var + NORM_EPS).sqrt();
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    let off = ci * h * w;
                    for i in 0..h * w {
                        out.data[start + off + i] = (seg[off + i] - mean) * rstd * gv[ch] + bv[ch];
                    }
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            needs,
        )
    }

    /// Per-channel normalization over batch and space. With `running`
    /// `(mean, var)` the statistics are constants; otherwise they are the
    /// batch's own and can be read back with [`Graph::batch_statistics`].
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, running: Option<(&[f64], &[f64])>) -> Var {
        let [n, c, h, w] = self.shape(x);
        let hw = h * w;
        let xv = self.value(x);
        let (mean, var) = match running {
            Some((m, v)) => {
                assert!(m.len() == c && v.len() == c, "running statistics for {} channels, got {c}", m.len());
                (m.to_vec(), v.to_vec())
            }
            None => {
                let count = (n * hw) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let plane = |ni: usize| &xv.data[(ni * c + ch) * hw..(ni * c + ch + 1) * hw];
                    let mu = (0..n).map(|ni| plane(ni).iter().sum::<f64>()).sum::<f64>() / count;
                    let sq = (0..n)
                        .map(|ni| plane(ni).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>())
                        .sum::<f64>();
                    mean[ch] = mu;
                    var[ch] = sq / count;
                }
                (mean, var)
            }
        };
        let gv = &self.value(gamma).data;
        let bv = &self.value(beta).data;
        let mut out = Tensor::zeros([n, c, h, w]);
        for ni in 0..n {
            for ch in 0..c {
                let rs = 1.0 / (var[ch] + NORM_EPS).sqrt();
                let start = (ni * c + ch) * hw;
                for i in start..start + hw {
                    out.data[i] = (xv.data[i] - mean[ch]) * rs * gv[ch] + bv[ch];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                from_batch: running.is_none(),
            },
            needs,
        )
    }

    /// Per-channel `(mean, biased variance)` of a batch-statistics
    /// [`Graph::batch_norm`] node.
    pub fn batch_statistics(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                mean, var, from_batch: true, ..
            } => Some((mean, var)),
            _ => None,
        }
    }

    /// Divides a kernel by its top singular value estimated from the left
    /// singular vector `u`: `v = Wᵀu / |Wᵀu|`, `σ = uᵀWv = |Wᵀu|`.
    ///
    /// `u` is a constant of the graph; the gradient flows through `σ`.
    pub fn spectral_norm(&mut self, w: Var, u: &[f64]) -> Var {
        let wv = self.value(w);
        let rows = wv.shape[0];
        let cols = wv.numel() / rows;
        assert_eq!(u.len(), rows, "u has {} entries for {rows} rows", u.len());
        let mut v = vec![0.0; cols];
        for (r, &ur) in u.iter().enumerate() {
            let row = &wv.data[r * cols..(r + 1) * cols];
            for (vj, &wj) in v.iter_mut().zip(row) {
                *vj += ur * wj;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let sigma = norm.max(SPECTRAL_FLOOR);
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        let out = Tensor::from_vec(wv.shape, wv.data.iter().map(|x| x / sigma).collect());
        let needs = self.needs(w);
        self.push(
            out,
            Op::SpectralNorm {
                w,
                u: u.to_vec(),
                v,
                sigma,
            },
            needs,
        )
    }

    /// Reverse pass seeded with `dL/d(var)` for each listed output.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.shape, self.shape(v), "seed gradient shape mismatch");
            accumulate(&mut grads, v, g);
        }
        let mut params = Vec::new();
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(id) = node.op {
                params.push((id, idx));
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backward_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        params.reverse();
        Gradients { grads, params }
    }

    fn backward_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv { x, w, b, geom } => {
                let (dx, dw, db) = conv2d_backward(self.value(*x), self.value(*w), dy, geom, self.needs(*x));
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        accumulate(grads, *b, Tensor::from_vec([1, db.len(), 1, 1], db));
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        accumulate(grads, v, dy.clone());
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = dy.data.iter().zip(&self.value(*b).data).map(|(g, y)| g * y).collect();
                    accumulate(grads, *a, Tensor::from_vec(dy.shape, d));
                }
                if self.needs(*b) {
                    let d = dy.data.iter().zip(&self.value(*a).data).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, Tensor::from_vec(dy.shape, d));
                }
            }
            Op::MulPlane(x, s) => {
                let [n, c, h, w] = dy.shape;
                let hw = h * w;
                let xv = self.value(*x);
                let sv = self.value(*s);
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(dy.shape);
                    for ni in 0..n {
                        let sp = sv.plane(ni, 0);
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for i in 0..hw {
                                dx.data[base + i] = dy.data[base + i] * sp[i];
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.needs(*s) {
                    let mut ds = Tensor::zeros([n, 1, h, w]);
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for i in 0..hw {
                                ds.data[ni * hw + i] += dy.data[base + i] * xv.data[base + i];
                            }
                        }
                    }
                    accumulate(grads, *s, ds);
                }
            }
            Op::Concat(parts) => {
                let [n, total_c, h, w] = dy.shape;
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.needs(p) {
                        let mut d = Tensor::zeros([n, pc, h, w]);
                        for ni in 0..n {
                            let src = ni * total_c * hw + offset;
                            d.sample_mut(ni).copy_from_slice(&dy.data[src..src + pc * hw]);
                        }
                        accumulate(grads, p, d);
                    }
                    offset += pc * hw;
                }
            }
            Op::Slice { x, start } => {
                let xs = self.shape(*x);
                let [n, len, h, w] = dy.shape;
                let hw = h * w;
                let mut dx = Tensor::zeros(xs);
                for ni in 0..n {
                    let dst = (ni * xs[1] + start) * hw;
                    dx.data[dst..dst + len * hw].copy_from_slice(dy.sample(ni));
                }
                accumulate(grads, *x, dx);
            }
            Op::AvgPool2(x) => {
                let [n, c, h, w] = self.shape(*x);
                let (oh, ow) = (dy.h(), dy.w());
                let mut dx = Tensor::zeros([n, c, h, w]);
                for p in 0..n * c {
                    let src = &dy.data[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut dx.data[p * h * w..(p + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let cells: Vec<(usize, usize)> = (0..2)
                                .flat_map(|dy| (0..2).map(move |dx| (2 * oy + dy, 2 * ox + dx)))
                                .filter(|&(y, x)| y < h && x < w)
                                .collect();
                            let share = src[oy * ow + ox] / cells.len() as f64;
                            for (y, x) in cells {
                                dst[y * w + x] += share;
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ResizeNearest(x) => {
                let [n, c, h, w] = self.shape(*x);
                let (oh, ow) = (dy.h(), dy.w());
                let ys: Vec<usize> = (0..oh).map(|i| crate::raster::nearest_index(i, h, oh)).collect();
                let xs: Vec<usize> = (0..ow).map(|i| crate::raster::nearest_index(i, w, ow)).collect();
                let mut dx = Tensor::zeros([n, c, h, w]);
                for p in 0..n * c {
                    let src = &dy.data[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut dx.data[p * h * w..(p + 1) * h * w];
                    for (oy, &sy) in ys.iter().enumerate() {
                        for (ox, &sx) in xs.iter().enumerate() {
                            dst[sy * w + sx] += src[oy * ow + ox];
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let d = dy
                    .data
                    .iter()
                    .zip(&node.value.data)
                    .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, Tensor::from_vec(dy.shape, d));
            }
            Op::Sigmoid(x) => {
                let d = dy.data.iter().zip(&node.value.data).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate(grads, *x, Tensor::from_vec(dy.shape, d));
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let [n, c, h, w] = dy.shape;
                let hw = h * w;
                let cg = c / groups;
                let len = (cg * hw) as f64;
                let xv = self.value(*x);
                let gv = &self.value(*gamma).data;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = Tensor::zeros(dy.shape);
                for ni in 0..n {
                    for gi in 0..*groups {
                        let k = ni * groups + gi;
                        let (mu, rs) = (mean[k], rstd[k]);
                        let start = (ni * c + gi * cg) * hw;
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            for i in 0..hw {
                                let idx = start + ci * hw + i;
                                let xh = (xv.data[idx] - mu) * rs;
                                let g = dy.data[idx];
                                dgamma[ch] += g * xh;
                                dbeta[ch] += g;
                                let dxh = g * gv[ch];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh;
                            }
                        }
                        let m1 = sum_dxh / len;
                        let m2 = sum_dxh_xh / len;
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            for i in 0..hw {
                                let idx = start + ci * hw + i;
                                let xh = (xv.data[idx] - mu) * rs;
                                let dxh = dy.data[idx] * gv[ch];
                                dx.data[idx] = rs * (dxh - m1 - xh * m2);
                            }
                        }
                    }
                }
                if self.needs(*x) {
                    accumulate(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, Tensor::from_vec([1, c, 1, 1], dgamma));
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, Tensor::from_vec([1, c, 1, 1], dbeta));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                from_batch,
            } => {
                let [n, c, h, w] = dy.shape;
                let hw = h * w;
                let count = (n * hw) as f64;
                let xv = self.value(*x);
                let gv = &self.value(*gamma).data;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = Tensor::zeros(dy.shape);
                for ch in 0..c {
                    let (mu, rs) = (mean[ch], 1.0 / (var[ch] + NORM_EPS).sqrt());
                    let idx = |ni: usize| (ni * c + ch) * hw..(ni * c + ch + 1) * hw;
                    let (mut sum_dxh, mut sum_dxh_xh) = (0.0, 0.0);
                    for ni in 0..n {
                        for i in idx(ni) {
                            let xh = (xv.data[i] - mu) * rs;
                            let g = dy.data[i];
                            dgamma[ch] += g * xh;
                            dbeta[ch] += g;
                            sum_dxh += g * gv[ch];
                            sum_dxh_xh += g * gv[ch] * xh;
                        }
                    }
                    let (m1, m2) = if *from_batch {
                        (sum_dxh / count, sum_dxh_xh / count)
                    } else {
                        (0.0, 0.0)
                    };
                    for ni in 0..n {
                        for i in idx(ni) {
                            let xh = (xv.data[i] - mu) * rs;
                            dx.data[i] = rs * (dy.data[i] * gv[ch] - m1 - xh * m2);
                        }
                    }
                }
                if self.needs(*x) {
                    accumulate(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, Tensor::from_vec([1, c, 1, 1], dgamma));
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, Tensor::from_vec([1, c, 1, 1], dbeta));
                }
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let wv = self.value(*w);
                let cols = v.len();
                let inner: f64 = dy.data.iter().zip(&wv.data).map(|(g, x)| g * x).sum();
                let coef = inner / (sigma * sigma);
                let mut dw = Tensor::zeros(wv.shape);
                for (r, &ur) in u.iter().enumerate() {
                    for j in 0..cols {
                        let i = r * cols + j;
                        dw.data[i] = dy.data[i] / sigma - coef * ur * v[j];
                    }
                }
                accumulate(grads, *w, dw);
            }
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
