//! Convolution and sub-pixel kernels on raw buffers.

use super::gemm::gemm;
use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one image `[c_in, h, w]` into `[c_in*kh*kw, h_out*w_out]`.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let n_cols = g.col_cols();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * n_cols..(row + 1) * n_cols];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + i) as isize - g.pad as isize;
                    let seg = &mut dst[oh * g.w_out..(oh + 1) * g.w_out];
                    if ih < 0 || ih >= g.h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, d) in seg.iter_mut().enumerate() {
                        let iw = (ow * g.stride + j) as isize - g.pad as isize;
                        *d = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto `dx`, accumulating.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let n_cols = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * n_cols..(row + 1) * n_cols];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + i) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.w_out {
                        let iw = (ow * g.stride + j) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * g.w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (rows, n_cols) = (g.col_rows(), g.col_cols());
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * n_cols;
    let mut out = vec![T::zero(); g.batch * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * n_cols]
    };
    for b in 0..g.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * out_len..(b + 1) * out_len];
        let col_buf: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        gemm(
            g.c_out, rows, n_cols, kernel, false, col_buf, false, ob, false,
        );
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                for v in &mut ob[co * n_cols..(co + 1) * n_cols] {
                    *v += bv;
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dkernel: Option<Vec<T>>,
    pub dbias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    kernel: &[T],
    dout: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let (want_x, want_k, want_b) = want;
    let (rows, n_cols) = (g.col_rows(), g.col_cols());
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * n_cols;

    let mut dx = want_x.then(|| vec![T::zero(); g.batch * in_len]);
    let mut dk = want_k.then(|| vec![T::zero(); g.c_out * rows]);
    let dbias = want_b.then(|| {
        let mut db = vec![T::zero(); g.c_out];
        for b in 0..g.batch {
            for (co, acc) in db.iter_mut().enumerate() {
                let off = b * out_len + co * n_cols;
                *acc += dout[off..off + n_cols].iter().copied().sum::<T>();
            }
        }
        db
    });

    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * n_cols }];
    let mut dcols = vec![
        T::zero();
        if want_x && !g.is_pointwise() {
            rows * n_cols
        } else {
            0
        }
    ];
    for b in 0..g.batch {
        let db = &dout[b * out_len..(b + 1) * out_len];
        if let Some(dk) = dk.as_mut() {
            let xb = &x[b * in_len..(b + 1) * in_len];
            let col_buf: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(g, xb, &mut cols);
                &cols
            };
            gemm(g.c_out, n_cols, rows, db, false, col_buf, true, dk, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                gemm(rows, g.c_out, n_cols, kernel, true, db, false, dxb, true);
            } else {
                gemm(
                    rows, g.c_out, n_cols, kernel, true, db, false, &mut dcols, false,
                );
                col2im(g, &dcols, dxb);
            }
        }
    }
    ConvGrads {
        dx,
        dkernel: dk,
        dbias,
    }
}

/// `[b, c*r*r, h, w] -> [b, c, h*r, w*r]`; channel `c*r*r + i*r + j` fills
/// offset `(i, j)` of each `r x r` output block.
pub(crate) fn pixel_shuffle<T: Scalar>(
    x: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let (oh, ow) = (h * r, w * r);
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let src_c = ci * r * r + i * r + j;
                    let src = &x[((bi * c * r * r) + src_c) * h * w..][..h * w];
                    let dst = &mut out[(bi * c + ci) * oh * ow..][..oh * ow];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[(y * r + i) * ow + xx * r + j] = src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Exact inverse of [`pixel_shuffle`]; `c`, `h`, `w` describe the low-resolution side.
pub(crate) fn pixel_unshuffle<T: Scalar>(
    y: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    let (oh, ow) = (h * r, w * r);
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let dst_c = ci * r * r + i * r + j;
                    let src = &y[(bi * c + ci) * oh * ow..][..oh * ow];
                    let dst = &mut out[((bi * c * r * r) + dst_c) * h * w..][..h * w];
                    for yy in 0..h {
                        for xx in 0..w {
                            dst[yy * w + xx] = src[(yy * r + i) * ow + xx * r + j];
                        }
                    }
                }
            }
        }
    }
    out
}
