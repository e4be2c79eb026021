//! 2-D convolution via im2col and GEMM.

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(x_shape: [usize; 4], w_shape: [usize; 4], stride: usize, pad: (usize, usize)) -> Self {
        let [_, cin, h, w] = x_shape;
        let [cout, _, kh, kw] = w_shape;
        assert!(stride >= 1);
        assert!(h + 2 * pad.0 >= kh && w + 2 * pad.1 >= kw, "kernel larger than padded input");
        Self {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad_h: pad.0,
            pad_w: pad.1,
            oh: (h + 2 * pad.0 - kh) / stride + 1,
            ow: (w + 2 * pad.1 - kw) / stride + 1,
        }
    }

    /// Rows of the column matrix.
    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Output pixels per channel.
    pub fn p(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad_h as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad_w as isize;
                        *o = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad_w as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `C (m x n) = alpha * A (m x k) * B (k x n) + beta * C`, all row-major
/// unless the strides say otherwise.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every index addressed by the given strides;
    // callers pass dense matrices of the stated dimensions.
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

pub fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, g: &ConvGeometry) -> Tensor {
    let n = x.n();
    let (k, p) = (g.k(), g.p());
    let mut out = Tensor::zeros([n, g.cout, g.oh, g.ow]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    for ni in 0..n {
        let xs = x.sample(ni);
        let b_mat: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        let o = out.sample_mut(ni);
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                o[co * p..(co + 1) * p].fill(bv);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(g.cout, k, p, &w.data, (k as isize, 1), b_mat, (p as isize, 1), beta, o);
    }
    out
}

/// Returns `(dx, dw, db)`; `dx` only when requested.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    g: &ConvGeometry,
    want_dx: bool,
) -> (Option<Tensor>, Tensor, Vec<f64>) {
    let n = x.n();
    let (k, p) = (g.k(), g.p());
    let mut dw = Tensor::zeros(w.shape);
    let mut db = vec![0.0; g.cout];
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape));
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    let mut dcols = vec![0.0; if want_dx { k * p } else { 0 }];
    for ni in 0..n {
        let xs = x.sample(ni);
        let dys = dy.sample(ni);
        let b_mat: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        gemm(g.cout, p, k, dys, (p as isize, 1), b_mat, (1, p as isize), 1.0, &mut dw.data);
        for (co, acc) in db.iter_mut().enumerate() {
            *acc += dys[co * p..(co + 1) * p].iter().sum::<f64>();
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ · dY
            if g.is_pointwise() {
                gemm(k, g.cout, p, &w.data, (1, k as isize), dys, (p as isize, 1), 1.0, dx.sample_mut(ni));
            } else {
                gemm(k, g.cout, p, &w.data, (1, k as isize), dys, (p as isize, 1), 0.0, &mut dcols);
                col2im(&dcols, g, dx.sample_mut(ni));
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop convolution.
    fn naive(x: &Tensor, w: &Tensor, b: &[f64], g: &ConvGeometry) -> Tensor {
        let mut out = Tensor::zeros([x.n(), g.cout, g.oh, g.ow]);
        for n in 0..x.n() {
            for co in 0..g.cout {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = b[co];
                        for ci in 0..g.cin {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let iy = (oy * g.stride + ki) as isize - g.pad_h as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad_w as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += x.data[((n * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize]
                                        * w.data[((co * g.cin + ci) * g.kh + ki) * g.kw + kj];
                                }
                            }
                        }
                        out.data[((n * g.cout + co) * g.oh + oy) * g.ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn seq(shape: [usize; 4], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 37 % 23) as f64 - 11.0) * scale).collect())
    }

    #[test]
    fn matches_naive_convolution() {
        for (xs, ws, stride, pad) in [
            ([2, 3, 9, 7], [4, 3, 3, 3], 1, (1, 1)),
            ([1, 2, 8, 8], [3, 2, 3, 3], 2, (1, 1)),
            ([1, 2, 6, 9], [2, 2, 5, 1], 1, (2, 0)),
            ([1, 2, 6, 9], [2, 2, 1, 5], 1, (0, 2)),
            ([2, 4, 5, 5], [3, 4, 1, 1], 1, (0, 0)),
        ] {
            let x = seq(xs, 0.1);
            let w = seq(ws, 0.05);
            let b: Vec<f64> = (0..ws[0]).map(|i| i as f64 * 0.3).collect();
            let g = ConvGeometry::new(xs, ws, stride, pad);
            let fast = conv2d_forward(&x, &w, Some(&b), &g);
            let slow = naive(&x, &w, &b, &g);
            for (a, e) in fast.data.iter().zip(&slow.data) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }
}
