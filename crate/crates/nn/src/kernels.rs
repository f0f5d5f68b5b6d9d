//! Raw numeric kernels over flat `[h, w, c]` buffers.
//!
//! Convolution is lowered to a matrix product: the input is unrolled into a
//! `[out_h * out_w, k * k * c_in]` patch matrix whose column order matches the
//! flattened `[k, k, c_in, c_out]` kernel layout.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.k * self.k * self.c_in
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow, plen) = (g.out_h(), g.out_w(), g.patch_len());
    let mut cols = vec![0.0; oh * ow * plen];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * plen..][..plen];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let src = ((iy as usize) * g.in_w + ix as usize) * g.c_in;
                    let dst = (ky * g.k + kx) * g.c_in;
                    row[dst..dst + g.c_in].copy_from_slice(&x[src..src + g.c_in]);
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let (oh, ow, plen) = (g.out_h(), g.out_w(), g.patch_len());
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * plen..][..plen];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let dst = ((iy as usize) * g.in_w + ix as usize) * g.c_in;
                    let src = (ky * g.k + kx) * g.c_in;
                    for (d, s) in dx[dst..dst + g.c_in].iter_mut().zip(&row[src..src + g.c_in]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `c[m x n] = alpha * op(a) * op(b) + beta * c`, row-major with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every buffer holds at least the extent addressed by the strides,
    // which the callers derive from the same geometry that sized the buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> Vec<f64> {
    let rows = g.out_h() * g.out_w();
    let plen = g.patch_len();
    let mut out = vec![0.0; rows * g.c_out];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(g.c_out) {
            row.copy_from_slice(b);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if g.is_pointwise() {
        gemm(rows, plen, g.c_out, x, (plen as isize, 1), w, (g.c_out as isize, 1), beta, &mut out);
    } else {
        let cols = im2col(x, g);
        gemm(rows, plen, g.c_out, &cols, (plen as isize, 1), w, (g.c_out as isize, 1), beta, &mut out);
    }
    out
}

/// Gradients of a convolution. Each output is only computed when requested.
pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeometry,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> ConvGrads {
    let rows = g.out_h() * g.out_w();
    let plen = g.patch_len();
    let dw = want_dw.then(|| {
        let mut dw = vec![0.0; plen * g.c_out];
        if g.is_pointwise() {
            gemm(plen, rows, g.c_out, x, (1, plen as isize), dy, (g.c_out as isize, 1), 0.0, &mut dw);
        } else {
            let cols = im2col(x, g);
            gemm(plen, rows, g.c_out, &cols, (1, plen as isize), dy, (g.c_out as isize, 1), 0.0, &mut dw);
        }
        dw
    });
    let dx = want_dx.then(|| {
        let mut dcols = vec![0.0; rows * plen];
        gemm(rows, g.c_out, plen, dy, (g.c_out as isize, 1), w, (1, g.c_out as isize), 0.0, &mut dcols);
        if g.is_pointwise() {
            dcols
        } else {
            let mut dx = vec![0.0; g.in_h * g.in_w * g.c_in];
            col2im_add(&dcols, g, &mut dx);
            dx
        }
    });
    let db = want_db.then(|| {
        let mut db = vec![0.0; g.c_out];
        for row in dy.chunks_exact(g.c_out) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        db
    });
    ConvGrads { dx, dw, db }
}

/// `y[o] = sum_i w[o, i] * x[i]` for a row-major `[out, in]` matrix.
pub fn matvec(w: &[f64], x: &[f64], out: usize) -> Vec<f64> {
    let n = x.len();
    (0..out).map(|o| w[o * n..(o + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}
