//! Full-reference image quality metrics on `[0, 1]` images.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Neumaier-compensated sum; the mean of equal values comes out exact.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
    }
    sum + comp
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("mse", a, b)?;
    let n = a.len().max(1) as f64;
    Ok(compensated_sum(
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x.to_f64() - y.to_f64()).powi(2)),
    ) / n)
}

/// `10 log10(1 / MSE)` with the MSE pooled over every channel; capped at
/// [`PSNR_CAP_DB`].
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / e).log10()).min(PSNR_CAP_DB))
}

pub fn mae<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("mae", a, b)?;
    let n = a.len().max(1) as f64;
    Ok(compensated_sum(
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x.to_f64() - y.to_f64()).abs()),
    ) / n)
}

/// Normalised 1-D Gaussian of length [`SSIM_WINDOW`].
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity: 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1, averaged over every valid window position
/// and every channel.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("image at least {SSIM_WINDOW}x{SSIM_WINDOW}"),
            format!("{}x{}", s.h, s.w),
        ));
    }
    let k = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let plane = s.plane();
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..s.n * s.c {
        let pa: Vec<f64> = a.data()[p * plane..(p + 1) * plane]
            .iter()
            .map(|&v| Real::to_f64(v))
            .collect();
        let pb: Vec<f64> = b.data()[p * plane..(p + 1) * plane]
            .iter()
            .map(|&v| Real::to_f64(v))
            .collect();
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { pa.iter().zip(&pb).map(|(&x, &y)| f(x, y)).collect() };
        let mu_a = filter_valid(&pa, s.h, s.w, &k);
        let mu_b = filter_valid(&pb, s.h, s.w, &k);
        let aa = filter_valid(&prod(&|x, _| x * x), s.h, s.w, &k);
        let bb = filter_valid(&prod(&|_, y| y * y), s.h, s.w, &k);
        let ab = filter_valid(&prod(&|x, y| x * y), s.h, s.w, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
