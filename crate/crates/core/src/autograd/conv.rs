//! Direct 2-D convolution via im2col + GEMM, batched over samples.

use rayon::prelude::*;

use crate::tensor::Scalar;

/// Geometry of one NCHW × OIHW convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

/// Output extent along one axis, or `None` when it would be non-positive.
pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.stride == (1, 1) && self.pad == (0, 0)
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let (sh, sw) = g.stride;
    let (ph, pw) = g.pad;
    let ncols = g.col_cols();
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let (sh, sw) = g.stride;
    let (ph, pw) = g.pad;
    let ncols = g.col_cols();
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let src = &col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let base = iy as usize * g.in_w;
                    for ox in 0..g.out_w {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            plane[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let in_len = g.in_c * g.in_h * g.in_w;
    let out_len = g.out_c * g.col_cols();
    let mut out = vec![T::zero(); g.batch * out_len];
    out.par_chunks_mut(out_len)
        .zip(x.par_chunks(in_len))
        .for_each_init(Vec::new, |col, (y, xs)| {
            if g.is_pointwise() {
                T::gemm(g.out_c, g.in_c, g.col_cols(), w, false, xs, false, T::zero(), y);
            } else {
                col.resize(g.col_rows() * g.col_cols(), T::zero());
                im2col(g, xs, col);
                T::gemm(
                    g.out_c,
                    g.col_rows(),
                    g.col_cols(),
                    w,
                    false,
                    col,
                    false,
                    T::zero(),
                    y,
                );
            }
        });
    out
}

/// Samples per partial weight-gradient sum. Fixed so the reduction order
/// never depends on the thread pool.
const WGRAD_GROUP: usize = 8;

/// Gradient w.r.t. the weight, `Σ_n dy_n · col_nᵀ`.
pub fn backward_weight<T: Scalar>(g: &ConvGeom, x: &[T], dy: &[T]) -> Vec<T> {
    let in_len = g.in_c * g.in_h * g.in_w;
    let out_len = g.out_c * g.col_cols();
    let w_len = g.out_c * g.col_rows();
    let groups: Vec<Vec<T>> = (0..g.batch.div_ceil(WGRAD_GROUP))
        .into_par_iter()
        .map(|gi| {
            let mut acc = vec![T::zero(); w_len];
            let mut col = Vec::new();
            let lo = gi * WGRAD_GROUP;
            let hi = (lo + WGRAD_GROUP).min(g.batch);
            for n in lo..hi {
                let xs = &x[n * in_len..(n + 1) * in_len];
                let dys = &dy[n * out_len..(n + 1) * out_len];
                let cols: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    col.resize(g.col_rows() * g.col_cols(), T::zero());
                    im2col(g, xs, &mut col);
                    &col
                };
                T::gemm(
                    g.out_c,
                    g.col_cols(),
                    g.col_rows(),
                    dys,
                    false,
                    cols,
                    true,
                    T::one(),
                    &mut acc,
                );
            }
            acc
        })
        .collect();
    let mut dw = vec![T::zero(); w_len];
    for part in &groups {
        for (d, p) in dw.iter_mut().zip(part) {
            *d += *p;
        }
    }
    dw
}

/// Gradient w.r.t. the input, `col2im(Wᵀ · dy_n)` per sample.
pub fn backward_input<T: Scalar>(g: &ConvGeom, w: &[T], dy: &[T]) -> Vec<T> {
    let in_len = g.in_c * g.in_h * g.in_w;
    let out_len = g.out_c * g.col_cols();
    let mut dx = vec![T::zero(); g.batch * in_len];
    dx.par_chunks_mut(in_len)
        .zip(dy.par_chunks(out_len))
        .for_each_init(Vec::new, |col, (dxs, dys)| {
            if g.is_pointwise() {
                T::gemm(g.in_c, g.out_c, g.col_cols(), w, true, dys, false, T::zero(), dxs);
            } else {
                col.resize(g.col_rows() * g.col_cols(), T::zero());
                T::gemm(
                    g.col_rows(),
                    g.out_c,
                    g.col_cols(),
                    w,
                    true,
                    dys,
                    false,
                    T::zero(),
                    col,
                );
                col2im(g, col, dxs);
            }
        });
    dx
}
