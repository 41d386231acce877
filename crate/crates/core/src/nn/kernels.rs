//! Forward and backward kernels for a single batch sample.

/// `c = op(a) * op(b) + beta * c`, all row-major. `op(a)` is `m x k`,
/// `op(b)` is `k x n`; `ta`/`tb` mean the stored matrix is the transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        Some(Self {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let n_out = g.col_cols();
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let n_out = g.col_cols();
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Depthwise valid cross-correlation of one sample:
/// `out[c, i, j] = sum_ab z[c, a, b] * x[c, i + a, j + b]`.
pub(crate) fn xcorr_forward(
    z: &[f64],
    x: &[f64],
    c: usize,
    (kh, kw): (usize, usize),
    (h, w): (usize, usize),
    out: &mut [f64],
) {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    for ch in 0..c {
        let zp = &z[ch * kh * kw..(ch + 1) * kh * kw];
        let xp = &x[ch * h * w..(ch + 1) * h * w];
        let op = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for a in 0..kh {
            for b in 0..kw {
                let wgt = zp[a * kw + b];
                for i in 0..oh {
                    let src = &xp[(i + a) * w + b..(i + a) * w + b + ow];
                    let dst = &mut op[i * ow..(i + 1) * ow];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wgt * s;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn xcorr_backward(
    z: &[f64],
    x: &[f64],
    dout: &[f64],
    c: usize,
    (kh, kw): (usize, usize),
    (h, w): (usize, usize),
    dz: &mut [f64],
    dx: &mut [f64],
) {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    for ch in 0..c {
        let zp = &z[ch * kh * kw..(ch + 1) * kh * kw];
        let xp = &x[ch * h * w..(ch + 1) * h * w];
        let gp = &dout[ch * oh * ow..(ch + 1) * oh * ow];
        let dzp = &mut dz[ch * kh * kw..(ch + 1) * kh * kw];
        let dxp = &mut dx[ch * h * w..(ch + 1) * h * w];
        for a in 0..kh {
            for b in 0..kw {
                let wgt = zp[a * kw + b];
                let mut acc = 0.0;
                for i in 0..oh {
                    let grow = &gp[i * ow..(i + 1) * ow];
                    let off = (i + a) * w + b;
                    let xrow = &xp[off..off + ow];
                    for (g, s) in grow.iter().zip(xrow) {
                        acc += g * s;
                    }
                    let dxrow = &mut dxp[off..off + ow];
                    for (d, g) in dxrow.iter_mut().zip(grow) {
                        *d += wgt * g;
                    }
                }
                dzp[a * kw + b] += acc;
            }
        }
    }
}

/// Spatial self-attention of one sample. `q`, `k` are `[d, L]`, `v` is
/// `[cv, L]`. Writes the row-stochastic attention `[L, L]` and `out = v attn^T`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    cv: usize,
    l: usize,
    attn: &mut [f64],
    out: &mut [f64],
) {
    gemm(l, d, l, q, true, k, false, attn, 0.0);
    for row in attn.chunks_mut(l) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for a in row.iter_mut() {
            *a = (*a - m).exp();
            s += *a;
        }
        for a in row.iter_mut() {
            *a /= s;
        }
    }
    gemm(cv, l, l, v, false, attn, true, out, 0.0);
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    attn: &[f64],
    dout: &[f64],
    d: usize,
    cv: usize,
    l: usize,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    gemm(cv, l, l, dout, false, attn, false, dv, 1.0);
    let mut ds = vec![0.0; l * l];
    gemm(l, cv, l, dout, true, v, false, &mut ds, 0.0);
    for (drow, arow) in ds.chunks_mut(l).zip(attn.chunks(l)) {
        let dot: f64 = drow.iter().zip(arow).map(|(g, a)| g * a).sum();
        for (g, a) in drow.iter_mut().zip(arow) {
            *g = a * (*g - dot);
        }
    }
    gemm(d, l, l, k, false, &ds, true, dq, 1.0);
    gemm(d, l, l, q, false, &ds, false, dk, 1.0);
}

/// Four bilinear taps `(flat index, weight)` at continuous `(y, x)` on an
/// `h x w` plane, with the coordinate clamped to the plane.
pub fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    [
        (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * w + x1, (1.0 - fy) * fx),
        (y1 * w + x0, fy * (1.0 - fx)),
        (y1 * w + x1, fy * fx),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom::new(2, 5, 6, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; 60];
        col2im(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn bilinear_taps_interpolate() {
        let plane: Vec<f64> = (0..12).map(|i| i as f64).collect(); // 3x4, value = 4y + x
        let s = |y: f64, x: f64| {
            bilinear_taps(y, x, 3, 4)
                .iter()
                .map(|(i, w)| plane[*i] * w)
                .sum::<f64>()
        };
        assert!((s(1.25, 2.5) - (4.0 * 1.25 + 2.5)).abs() < 1e-12);
        assert_eq!(s(-3.0, 10.0), 3.0);
        assert_eq!(s(2.0, 3.0), 11.0);
    }
}
