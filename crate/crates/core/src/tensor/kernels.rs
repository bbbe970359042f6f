//! Raw compute kernels shared by the graph operations.

use super::{Real, Shape4, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn out_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let span = (size + 2 * pad).checked_sub(k)?;
        if span % stride != 0 {
            return None;
        }
        Some(span / stride + 1)
    }

    pub fn rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

impl ConvGeometry {
    /// Output columns `ox` with `0 <= ox * stride + kx - pad < w`, as a range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride).min(self.out_w);
        let limit = self.w + self.pad - kx; // ox * stride < limit
        let hi = limit.div_ceil(self.stride).min(self.out_w).max(lo);
        (lo, hi)
    }
}

/// Unfolds one sample (`in_c x h x w`) into a `(in_c*k*k) x (out_h*out_w)` matrix.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let p = g.cols();
    for c in 0..g.in_c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = g.valid_cols(kx);
                let row = ((c * g.k + ky) * g.k + kx) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..g.out_h {
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let ix0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (o, &v) in out_row[lo..hi].iter_mut().zip(src[ix0..].iter().step_by(g.stride)) {
                            *o = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dx`.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let p = g.cols();
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = g.valid_cols(kx);
                if lo == hi {
                    continue;
                }
                let ix0 = lo * g.stride + kx - g.pad;
                let row = ((c * g.k + ky) * g.k + kx) * p;
                let src = &cols[row..row + p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    for (d, &v) in dst[ix0..].iter_mut().step_by(g.stride).zip(s) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    g: &ConvGeometry,
) -> Tensor<T> {
    let n = x.shape().n;
    let out_c = weight.shape().n;
    let (rows, p) = (g.rows(), g.cols());
    let mut out = Tensor::zeros(Shape4::new(n, out_c, g.out_h, g.out_w));
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * p]
    };
    let in_len = g.in_c * g.h * g.w;
    for b in 0..n {
        let xs = &x.data()[b * in_len..(b + 1) * in_len];
        let dst = &mut out.data_mut()[b * out_c * p..(b + 1) * out_c * p];
        for (oc, chunk) in dst.chunks_mut(p).enumerate() {
            chunk.fill(bias.data()[oc]);
        }
        let cols_ref: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        T::gemm(
            out_c,
            rows,
            p,
            weight.data(),
            (rows as isize, 1),
            cols_ref,
            (p as isize, 1),
            T::one(),
            dst,
        );
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &ConvGeometry,
    needs: [bool; 3],
) -> ConvGrads<T> {
    let n = x.shape().n;
    let out_c = weight.shape().n;
    let (rows, p) = (g.rows(), g.cols());
    let in_len = g.in_c * g.h * g.w;

    let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
    let mut dw = needs[1].then(|| Tensor::zeros(weight.shape()));
    let db = needs[2].then(|| {
        let mut db = Tensor::zeros(Shape4::new(1, out_c, 1, 1));
        for b in 0..n {
            for oc in 0..out_c {
                let off = (b * out_c + oc) * p;
                let s: T = grad_out.data()[off..off + p].iter().copied().sum();
                db.data_mut()[oc] = db.data()[oc] + s;
            }
        }
        db
    });

    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * p }];
    let mut dcols = vec![T::zero(); if dx.is_some() { rows * p } else { 0 }];
    for b in 0..n {
        let go = &grad_out.data()[b * out_c * p..(b + 1) * out_c * p];
        if let Some(dw) = dw.as_mut() {
            let xs = &x.data()[b * in_len..(b + 1) * in_len];
            let cols_ref: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            // dW += dOut * cols^T
            T::gemm(
                out_c,
                p,
                rows,
                go,
                (p as isize, 1),
                cols_ref,
                (1, p as isize),
                T::one(),
                dw.data_mut(),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                T::gemm(
                    rows,
                    out_c,
                    p,
                    weight.data(),
                    (1, rows as isize),
                    go,
                    (p as isize, 1),
                    T::zero(),
                    dxs,
                );
            } else {
                T::gemm(
                    rows,
                    out_c,
                    p,
                    weight.data(),
                    (1, rows as isize),
                    go,
                    (p as isize, 1),
                    T::zero(),
                    &mut dcols,
                );
                col2im(&dcols, g, dxs);
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Corner indices and weights of a bilinear sample at a continuous position,
/// with out-of-image corners contributing zero. Also carries the partial
/// derivatives of the four weights with respect to y and x.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct BilinearTap<T> {
    /// Flat plane indices of the four corners (y0x0, y0x1, y1x0, y1x1);
    /// `usize::MAX` marks an out-of-bounds corner.
    pub idx: [usize; 4],
    pub weight: [T; 4],
    pub dweight_dy: [T; 4],
    pub dweight_dx: [T; 4],
}

impl<T: Real> BilinearTap<T> {
    pub const OUTSIDE: usize = usize::MAX;

    /// Zero-padded bilinear tap. At exact integer coordinates the floor
    /// branch is used, so derivatives are right-continuous.
    pub fn zero_padded(y: T, x: T, h: usize, w: usize) -> Self {
        let y0f = y.floor();
        let x0f = x.floor();
        let ly = y - y0f;
        let lx = x - x0f;
        let hy = T::one() - ly;
        let hx = T::one() - lx;
        let y0 = y0f.to_f64() as isize;
        let x0 = x0f.to_f64() as isize;
        let mut tap = BilinearTap {
            idx: [Self::OUTSIDE; 4],
            weight: [hy * hx, hy * lx, ly * hx, ly * lx],
            dweight_dy: [-hx, -lx, hx, lx],
            dweight_dx: [-hy, hy, -ly, ly],
        };
        let corners = [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)];
        for (slot, (cy, cx)) in corners.into_iter().enumerate() {
            if cy >= 0 && cy < h as isize && cx >= 0 && cx < w as isize {
                tap.idx[slot] = cy as usize * w + cx as usize;
            }
        }
        tap
    }

    #[inline]
    pub fn sample(&self, plane: &[T]) -> T {
        let mut acc = T::zero();
        for i in 0..4 {
            if self.idx[i] != Self::OUTSIDE {
                acc = acc + self.weight[i] * plane[self.idx[i]];
            }
        }
        acc
    }

    /// Returns (value, d value/dy, d value/dx).
    #[inline]
    pub fn sample_with_derivatives(&self, plane: &[T]) -> (T, T, T) {
        let (mut v, mut dy, mut dx) = (T::zero(), T::zero(), T::zero());
        for i in 0..4 {
            if self.idx[i] != Self::OUTSIDE {
                let p = plane[self.idx[i]];
                v = v + self.weight[i] * p;
                dy = dy + self.dweight_dy[i] * p;
                dx = dx + self.dweight_dx[i] * p;
            }
        }
        (v, dy, dx)
    }

    #[inline]
    pub fn scatter(&self, plane: &mut [T], g: T) {
        for i in 0..4 {
            if self.idx[i] != Self::OUTSIDE {
                plane[self.idx[i]] = plane[self.idx[i]] + self.weight[i] * g;
            }
        }
    }
}
