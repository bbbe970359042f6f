//! Alignment primitives: correlation cost volume, offset heads and
//! modulated deformable convolution.
//!
//! Offset fields carry `3K` channels. The first `2K` channels hold per-tap
//! displacements in pixels, interleaved as `(dy_0, dx_0, dy_1, dx_1, ...)`;
//! the last `K` channels are modulation logits that pass through a sigmoid.
//! Positions that fall outside the image read zero.

use crate::error::{Error, Result};
use crate::tensor::kernels::BilinearTap;
use crate::tensor::{ConvParams, Graph, Operation, Real, Shape4, Tensor, Var};

/// Number of displacement channels for a search radius.
pub fn displacement_count(radius: usize) -> usize {
    (2 * radius + 1) * (2 * radius + 1)
}

/// Channel of displacement `(dy, dx)`; row-major from `(-r, -r)` to `(r, r)`.
pub fn displacement_channel(dy: isize, dx: isize, radius: usize) -> usize {
    let side = 2 * radius as isize + 1;
    ((dy + radius as isize) * side + dx + radius as isize) as usize
}

/// Inverse of [`displacement_channel`].
pub fn displacement_of(channel: usize, radius: usize) -> (isize, isize) {
    let side = 2 * radius + 1;
    (
        (channel / side) as isize - radius as isize,
        (channel % side) as isize - radius as isize,
    )
}

struct CostVolumeOp {
    radius: usize,
}

/// Visits every in-bounds `(y, x)` row span for displacement `(dy, dx)`:
/// calls `f(y, x_start, x_end)` with target row `y + dy` and columns shifted by `dx`.
fn for_valid_rows(h: usize, w: usize, dy: isize, dx: isize, mut f: impl FnMut(usize, usize, usize)) {
    let x_start = (-dx).max(0) as usize;
    let x_end = (w as isize - dx.max(0)).max(0) as usize;
    if x_start >= x_end {
        return;
    }
    let y_start = (-dy).max(0) as usize;
    let y_end = (h as isize - dy.max(0)).max(0) as usize;
    for y in y_start..y_end {
        f(y, x_start, x_end);
    }
}

impl<T: Real> Operation<T> for CostVolumeOp {
    fn name(&self) -> &'static str {
        "cost_volume"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (left, right) = (inputs[0], inputs[1]);
        let s = left.shape();
        let d = self.radius;
        let count = displacement_count(d);
        let inv_c = T::one() / T::from_f64(s.c as f64);
        let plane = s.plane();
        let mut dl = needs[0].then(|| Tensor::zeros(s));
        let mut dr = needs[1].then(|| Tensor::zeros(s));
        for n in 0..s.n {
            for ch in 0..count {
                let (dy, dx) = displacement_of(ch, d);
                let go = &grad_output.data()[(n * count + ch) * plane..(n * count + ch + 1) * plane];
                for c in 0..s.c {
                    let base = (n * s.c + c) * plane;
                    let lp = &left.data()[base..base + plane];
                    let rp = &right.data()[base..base + plane];
                    if let Some(dl) = dl.as_mut() {
                        let dlp = &mut dl.data_mut()[base..base + plane];
                        for_valid_rows(s.h, s.w, dy, dx, |y, x0, x1| {
                            let ty = (y as isize + dy) as usize;
                            for x in x0..x1 {
                                let tx = (x as isize + dx) as usize;
                                dlp[y * s.w + x] = dlp[y * s.w + x] + go[y * s.w + x] * rp[ty * s.w + tx] * inv_c;
                            }
                        });
                    }
                    if let Some(dr) = dr.as_mut() {
                        let drp = &mut dr.data_mut()[base..base + plane];
                        for_valid_rows(s.h, s.w, dy, dx, |y, x0, x1| {
                            let ty = (y as isize + dy) as usize;
                            for x in x0..x1 {
                                let tx = (x as isize + dx) as usize;
                                drp[ty * s.w + tx] = drp[ty * s.w + tx] + go[y * s.w + x] * lp[y * s.w + x] * inv_c;
                            }
                        });
                    }
                }
            }
        }
        vec![dl, dr]
    }
}

/// Correlation between left features at `x1` and right features at every
/// `x2` with `|x1 - x2|_inf <= radius`, divided by the channel count.
/// Output has `(2r+1)^2` channels; out-of-image targets give exactly 0.
pub fn cost_volume<T: Real>(g: &mut Graph<T>, left: Var, right: Var, radius: usize) -> Result<Var> {
    let (sl, sr) = (g.shape(left), g.shape(right));
    if sl != sr {
        return Err(Error::shape("cost_volume", sl, sr));
    }
    if radius == 0 {
        return Err(Error::Config("cost_volume: radius must be at least 1".into()));
    }
    let count = displacement_count(radius);
    let plane = sl.plane();
    let inv_c = T::one() / T::from_f64(sl.c as f64);
    let mut out = Tensor::zeros(Shape4::new(sl.n, count, sl.h, sl.w));
    {
        let (l, r) = (g.value(left).data(), g.value(right).data());
        let o = out.data_mut();
        for n in 0..sl.n {
            for ch in 0..count {
                let (dy, dx) = displacement_of(ch, radius);
                let op = &mut o[(n * count + ch) * plane..(n * count + ch + 1) * plane];
                for c in 0..sl.c {
                    let base = (n * sl.c + c) * plane;
                    let lp = &l[base..base + plane];
                    let rp = &r[base..base + plane];
                    for_valid_rows(sl.h, sl.w, dy, dx, |y, x0, x1| {
                        let ty = (y as isize + dy) as usize;
                        let lrow = &lp[y * sl.w + x0..y * sl.w + x1];
                        let rrow = &rp[ty * sl.w + (x0 as isize + dx) as usize..];
                        let orow = &mut op[y * sl.w + x0..y * sl.w + x1];
                        for ((o, &a), &b) in orow.iter_mut().zip(lrow).zip(rrow) {
                            *o = *o + a * b;
                        }
                    });
                }
                for v in op.iter_mut() {
                    *v = *v * inv_c;
                }
            }
        }
    }
    Ok(g.record(CostVolumeOp { radius }, &[left, right], out))
}

/// Single convolution producing a raw `3K`-channel offset field.
pub fn offset_head<T: Real>(g: &mut Graph<T>, context: Var, params: ConvParams, taps: usize) -> Result<Var> {
    let out_c = g.shape(params.weight).n;
    if out_c != 3 * taps {
        return Err(Error::Config(format!(
            "offset head must produce 3K = {} channels for K = {taps}, weights have {out_c}",
            3 * taps
        )));
    }
    g.conv2d(context, params)
}

/// Splits a raw field into `(offsets: 2K channels, modulation: K channels in (0,1))`.
pub fn split_offset_field<T: Real>(g: &mut Graph<T>, raw: Var) -> Result<(Var, Var)> {
    let c = g.shape(raw).c;
    if c == 0 || c % 3 != 0 {
        return Err(Error::shape(
            "split_offset_field",
            "a positive multiple of 3 channels",
            format!("{c} channels"),
        ));
    }
    let taps = c / 3;
    let offsets = g.slice_channels(raw, 0, 2 * taps)?;
    let logits = g.slice_channels(raw, 2 * taps, taps)?;
    let modulation = g.sigmoid(logits);
    Ok((offsets, modulation))
}

/// Weights `(out_c, in_c, k, k)` and bias of a modulated deformable convolution.
#[derive(Clone, Copy, Debug)]
pub struct DeformKernel {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
struct DeformGeometry {
    in_c: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl DeformGeometry {
    fn taps(&self) -> usize {
        self.k * self.k
    }

    fn pad(&self) -> isize {
        (self.k as isize - 1) / 2
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Bilinear taps for one sample, indexed `[tap * plane + pixel]`.
    fn sample_taps<T: Real>(&self, offsets: &[T]) -> Vec<BilinearTap<T>> {
        let (plane, pad) = (self.plane(), self.pad());
        let mut taps = Vec::with_capacity(self.taps() * plane);
        for tap in 0..self.taps() {
            let ky = (tap / self.k) as isize - pad;
            let kx = (tap % self.k) as isize - pad;
            let oy = &offsets[2 * tap * plane..(2 * tap + 1) * plane];
            let ox = &offsets[(2 * tap + 1) * plane..(2 * tap + 2) * plane];
            for y in 0..self.h {
                for x in 0..self.w {
                    let p = y * self.w + x;
                    let sy = T::from_f64((y as isize + ky) as f64) + oy[p];
                    let sx = T::from_f64((x as isize + kx) as f64) + ox[p];
                    taps.push(BilinearTap::zero_padded(sy, sx, self.h, self.w));
                }
            }
        }
        taps
    }

    /// Modulated, deformably sampled columns `[(c*K + tap) * plane + pixel]`.
    fn columns<T: Real>(&self, input: &[T], taps: &[BilinearTap<T>], modulation: &[T]) -> Vec<T> {
        let (plane, kk) = (self.plane(), self.taps());
        let mut cols = vec![T::zero(); self.in_c * kk * plane];
        for c in 0..self.in_c {
            let src = &input[c * plane..(c + 1) * plane];
            for tap in 0..kk {
                let row = &mut cols[(c * kk + tap) * plane..(c * kk + tap + 1) * plane];
                let tp = &taps[tap * plane..(tap + 1) * plane];
                let mp = &modulation[tap * plane..(tap + 1) * plane];
                for p in 0..plane {
                    row[p] = tp[p].sample(src) * mp[p];
                }
            }
        }
        cols
    }
}

struct DeformConvOp {
    geometry: DeformGeometry,
}

impl<T: Real> Operation<T> for DeformConvOp {
    fn name(&self) -> &'static str {
        "deform_conv2d"
    }

    fn branches(&self, inputs: &[&Tensor<T>], emit: &mut dyn FnMut(u64)) {
        // The interpolation cell of every tap; inputs are
        // [input, weight, bias, offsets, modulation].
        for v in inputs[3].data() {
            emit(v.floor().to_f64() as i64 as u64);
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (x, weight, offsets, modulation) = (inputs[0], inputs[1], inputs[3], inputs[4]);
        let geo = self.geometry;
        let n = x.shape().n;
        let out_c = weight.shape().n;
        let (plane, kk) = (geo.plane(), geo.taps());
        let rows = geo.in_c * kk;

        let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut dw = needs[1].then(|| Tensor::zeros(weight.shape()));
        let db = needs[2].then(|| {
            let mut db = Tensor::zeros(Shape4::new(1, out_c, 1, 1));
            for b in 0..n {
                for oc in 0..out_c {
                    let off = (b * out_c + oc) * plane;
                    let s: T = grad_output.data()[off..off + plane].iter().copied().sum();
                    db.data_mut()[oc] = db.data()[oc] + s;
                }
            }
            db
        });
        let mut doff = needs[3].then(|| Tensor::zeros(offsets.shape()));
        let mut dmod = needs[4].then(|| Tensor::zeros(modulation.shape()));
        let need_cols_grad = needs[0] || needs[3] || needs[4];

        let mut dcols = vec![T::zero(); if need_cols_grad { rows * plane } else { 0 }];
        for b in 0..n {
            let xs = &x.data()[b * geo.in_c * plane..(b + 1) * geo.in_c * plane];
            let offs = &offsets.data()[b * 2 * kk * plane..(b + 1) * 2 * kk * plane];
            let mods = &modulation.data()[b * kk * plane..(b + 1) * kk * plane];
            let go = &grad_output.data()[b * out_c * plane..(b + 1) * out_c * plane];
            let taps = geo.sample_taps(offs);

            if let Some(dw) = dw.as_mut() {
                let cols = geo.columns(xs, &taps, mods);
                T::gemm(
                    out_c,
                    plane,
                    rows,
                    go,
                    (plane as isize, 1),
                    &cols,
                    (1, plane as isize),
                    T::one(),
                    dw.data_mut(),
                );
            }
            if !need_cols_grad {
                continue;
            }
            T::gemm(
                rows,
                out_c,
                plane,
                weight.data(),
                (1, rows as isize),
                go,
                (plane as isize, 1),
                T::zero(),
                &mut dcols,
            );

            let mut dxs = dx
                .as_mut()
                .map(|t| &mut t.data_mut()[b * geo.in_c * plane..(b + 1) * geo.in_c * plane]);
            let mut doffs = doff
                .as_mut()
                .map(|t| &mut t.data_mut()[b * 2 * kk * plane..(b + 1) * 2 * kk * plane]);
            let mut dmods = dmod
                .as_mut()
                .map(|t| &mut t.data_mut()[b * kk * plane..(b + 1) * kk * plane]);
            for tap in 0..kk {
                for p in 0..plane {
                    let t = &taps[tap * plane + p];
                    let m = mods[tap * plane + p];
                    let (mut gm, mut gy, mut gx) = (T::zero(), T::zero(), T::zero());
                    for c in 0..geo.in_c {
                        let gc = dcols[(c * kk + tap) * plane + p];
                        if gc == T::zero() {
                            continue;
                        }
                        let src = &xs[c * plane..(c + 1) * plane];
                        let (v, vy, vx) = t.sample_with_derivatives(src);
                        gm = gm + gc * v;
                        gy = gy + gc * m * vy;
                        gx = gx + gc * m * vx;
                        if let Some(dxs) = dxs.as_deref_mut() {
                            t.scatter(&mut dxs[c * plane..(c + 1) * plane], gc * m);
                        }
                    }
                    if let Some(dm) = dmods.as_deref_mut() {
                        dm[tap * plane + p] = gm;
                    }
                    if let Some(d) = doffs.as_deref_mut() {
                        d[2 * tap * plane + p] = gy;
                        d[(2 * tap + 1) * plane + p] = gx;
                    }
                }
            }
        }
        vec![dx, dw, db, doff, dmod]
    }
}

/// Modulated deformable convolution with stride 1 and "same" padding:
///
/// `out(p) = bias + sum_k w_k * input(p + p_k + offset_k(p)) * modulation_k(p)`
///
/// where fractional positions are bilinearly interpolated.
pub fn deform_conv2d<T: Real>(
    g: &mut Graph<T>,
    input: Var,
    kernel: DeformKernel,
    offsets: Var,
    modulation: Var,
) -> Result<Var> {
    let xs = g.shape(input);
    let ws = g.shape(kernel.weight);
    let bs = g.shape(kernel.bias);
    if ws.c != xs.c || ws.h != ws.w || ws.h % 2 == 0 {
        return Err(Error::shape(
            "deform_conv2d",
            format!("odd square kernel with {} input channels", xs.c),
            format!("weight {ws}"),
        ));
    }
    if bs.numel() != ws.n {
        return Err(Error::shape("deform_conv2d", format!("bias with {} entries", ws.n), bs));
    }
    let kk = ws.h * ws.w;
    let expect_off = Shape4::new(xs.n, 2 * kk, xs.h, xs.w);
    let expect_mod = Shape4::new(xs.n, kk, xs.h, xs.w);
    if g.shape(offsets) != expect_off {
        return Err(Error::shape("deform_conv2d offsets", expect_off, g.shape(offsets)));
    }
    if g.shape(modulation) != expect_mod {
        return Err(Error::shape(
            "deform_conv2d modulation",
            expect_mod,
            g.shape(modulation),
        ));
    }
    let geo = DeformGeometry {
        in_c: xs.c,
        h: xs.h,
        w: xs.w,
        k: ws.h,
    };
    let plane = geo.plane();
    let rows = geo.in_c * kk;
    let out_c = ws.n;
    let mut out = Tensor::zeros(Shape4::new(xs.n, out_c, xs.h, xs.w));
    {
        let (x, w, b) = (g.value(input), g.value(kernel.weight), g.value(kernel.bias));
        let (off, m) = (g.value(offsets), g.value(modulation));
        for n in 0..xs.n {
            let xn = &x.data()[n * xs.c * plane..(n + 1) * xs.c * plane];
            let taps = geo.sample_taps(&off.data()[n * 2 * kk * plane..(n + 1) * 2 * kk * plane]);
            let cols = geo.columns(xn, &taps, &m.data()[n * kk * plane..(n + 1) * kk * plane]);
            let dst = &mut out.data_mut()[n * out_c * plane..(n + 1) * out_c * plane];
            for (oc, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.fill(b.data()[oc]);
            }
            T::gemm(
                out_c,
                rows,
                plane,
                w.data(),
                (rows as isize, 1),
                &cols,
                (plane as isize, 1),
                T::one(),
                dst,
            );
        }
    }
    Ok(g.record(
        DeformConvOp { geometry: geo },
        &[input, kernel.weight, kernel.bias, offsets, modulation],
        out,
    ))
}
