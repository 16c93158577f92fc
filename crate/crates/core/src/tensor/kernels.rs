//! Loop kernels shared by the tape's forward and backward rules.
//!
//! All accumulations run over the reduction index in ascending order.

/// `c[row] += Σ_p coef[p] · rows[p]`, four terms per pass; each element
/// still accumulates in ascending `p`.
#[inline]
fn axpy_rows(c_row: &mut [f64], coef: impl Fn(usize) -> f64, rows: impl Fn(usize) -> usize, b: &[f64], k: usize, n: usize) {
    let mut p = 0;
    while p + 4 <= k {
        let (a0, a1, a2, a3) = (coef(p), coef(p + 1), coef(p + 2), coef(p + 3));
        let b0 = &b[rows(p)..rows(p) + n];
        let b1 = &b[rows(p + 1)..rows(p + 1) + n];
        let b2 = &b[rows(p + 2)..rows(p + 2) + n];
        let b3 = &b[rows(p + 3)..rows(p + 3) + n];
        for j in 0..n {
            c_row[j] = c_row[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
        }
        p += 4;
    }
    while p < k {
        let a0 = coef(p);
        let b0 = &b[rows(p)..rows(p) + n];
        for (c, &v) in c_row.iter_mut().zip(b0) {
            *c += a0 * v;
        }
        p += 1;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        axpy_rows(&mut c[i * n..(i + 1) * n], |p| a_row[p], |p| p * n, b, k, n);
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`, through a transposed copy of `b` so the
/// inner loop runs over contiguous output columns.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    gemm_nn(a, &bt, c, m, k, n);
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        axpy_rows(&mut c[i * n..(i + 1) * n], |p| a[p * m + i], |p| p * n, b, k, n);
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    /// Unfolds one image `[C, H, W]` into `[C·K·K, Ho·Wo]`.
    fn im2col(&self, img: &[f64], col: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let k = self.kernel;
        for c in 0..self.in_ch {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                    for y in 0..oh {
                        let iy = (y * self.stride + ky) as isize - self.pad as isize;
                        for x in 0..ow {
                            let ix = (x * self.stride + kx) as isize - self.pad as isize;
                            dst[y * ow + x] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.height
                                && (ix as usize) < self.width
                            {
                                img[(c * self.height + iy as usize) * self.width + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], img: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let k = self.kernel;
        for c in 0..self.in_ch {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * oh * ow..(row + 1) * oh * ow];
                    for y in 0..oh {
                        let iy = (y * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.height {
                            continue;
                        }
                        for x in 0..ow {
                            let ix = (x * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.width {
                                continue;
                            }
                            img[(c * self.height + iy as usize) * self.width + ix as usize] +=
                                src[y * ow + x];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let in_size = g.in_ch * g.height * g.width;
    let mut out = vec![0.0; g.batch * g.out_ch * plane];
    let mut col = vec![0.0; g.col_rows() * plane];
    for b in 0..g.batch {
        g.im2col(&x[b * in_size..(b + 1) * in_size], &mut col);
        let dst = &mut out[b * g.out_ch * plane..(b + 1) * g.out_ch * plane];
        if let Some(bias) = bias {
            for (o, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.fill(bias[o]);
            }
        }
        gemm_nn(w, &col, dst, g.out_ch, g.col_rows(), plane);
    }
    out
}

/// Returns `(dx, dw, dbias)` for the requested operands.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let plane = g.out_h() * g.out_w();
    let in_size = g.in_ch * g.height * g.width;
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dw = need_dw.then(|| vec![0.0; w.len()]);
    let mut db = need_db.then(|| vec![0.0; g.out_ch]);
    let mut col = vec![0.0; g.col_rows() * plane];
    let mut dcol = vec![0.0; g.col_rows() * plane];
    for b in 0..g.batch {
        let dout_b = &dout[b * g.out_ch * plane..(b + 1) * g.out_ch * plane];
        if let Some(db) = db.as_mut() {
            for (o, chunk) in dout_b.chunks(plane).enumerate() {
                db[o] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            g.im2col(&x[b * in_size..(b + 1) * in_size], &mut col);
            gemm_nt(dout_b, &col, dw, g.out_ch, plane, g.col_rows());
        }
        if let Some(dx) = dx.as_mut() {
            dcol.fill(0.0);
            gemm_tn(w, dout_b, &mut dcol, g.col_rows(), g.out_ch, plane);
            g.col2im(&dcol, &mut dx[b * in_size..(b + 1) * in_size]);
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = a[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);
        assert_eq!(c, want);

        let mut c = vec![0.0; m * n];
        gemm_nt(&a, &transpose(&b, k, n), &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-14);
        }

        let mut c = vec![0.0; m * n];
        gemm_tn(&transpose(&a, m, k), &b, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let g = ConvGeom {
            batch: 1,
            in_ch: 1,
            height: 3,
            width: 3,
            out_ch: 1,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let x: Vec<f64> = (0..9).map(f64::from).collect();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        assert_eq!(conv2d_forward(&g, &x, &w, None), x);
    }
}
