//! Brute-force reference implementations and seeded comparison sweeps.

#![allow(dead_code)]

use dpanet::align::{cost_volume, deform_conv2d, displacement_channel, DeformKernel};
use dpanet::metrics::{gaussian_window, ssim, SSIM_K1, SSIM_K2, SSIM_WINDOW};
use dpanet::rng;
use dpanet::synth::{Layer, Scene};
use dpanet::tensor::ConvParams;
use dpanet::{Graph, Tensor};
use rand::Rng;

pub const CASES: u64 = 24;

/// Cases compared and the worst error seen.
#[derive(Clone, Copy, Debug)]
pub struct Sweep {
    pub cases: usize,
    pub worst: f64,
}

impl Sweep {
    fn new() -> Self {
        Self { cases: 0, worst: 0.0 }
    }

    fn record(&mut self, err: f64) {
        self.worst = self.worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
}

/// `|a - b| / max(|b|, 1)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

pub fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let oh = (xs.h + 2 * pad - ws.h) / stride + 1;
    let ow = (xs.w + 2 * pad - ws.w) / stride + 1;
    let mut out = Tensor::zeros([xs.n, ws.n, oh, ow]);
    for n in 0..xs.n {
        for o in 0..ws.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..xs.c {
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                acc += w.at(o, c, ky, kx) * x.at(n, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(n, o, oy, ox, acc);
                }
            }
        }
    }
    out
}

pub fn run_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, padding: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g
        .conv2d(
            xv,
            ConvParams {
                weight: wv,
                bias: bv,
                stride,
                padding,
            },
        )
        .unwrap();
    g.value(y).clone()
}

/// Relative error of `conv2d` against nested loops.
pub fn conv_sweep(cases: u64) -> Sweep {
    let mut s = Sweep::new();
    let mut seed = 0;
    while s.cases < cases as usize {
        let mut r = rng::seeded(seed);
        seed += 1;
        let n = r.random_range(1..=2);
        let c = r.random_range(1..=4);
        let o = r.random_range(1..=5);
        let k = [1, 3, 5][r.random_range(0..3)];
        let stride = r.random_range(1..=2);
        let pad = r.random_range(0..=k / 2);
        let h = r.random_range(k.max(2)..=9);
        let w = r.random_range(k.max(2)..=9);
        if (h + 2 * pad - k) % stride != 0 || (w + 2 * pad - k) % stride != 0 {
            continue;
        }
        let x = Tensor::<f64>::randn([n, c, h, w], 1.0, &mut r);
        let wt = Tensor::<f64>::randn([o, c, k, k], 1.0, &mut r);
        let b = Tensor::<f64>::randn([1, o, 1, 1], 1.0, &mut r);
        let got = run_conv(&x, &wt, &b, stride, pad);
        let want = conv_oracle(&x, &wt, &b, stride, pad);
        if got.shape() != want.shape() {
            s.record(f64::INFINITY);
        }
        for (a, b) in got.data().iter().zip(want.data()) {
            s.record(rel_err(*a, *b));
        }
        s.cases += 1;
    }
    s
}

/// Largest deviation of `maxpool2` values or gradients from a window scan
/// that routes each gradient to the first maximal element.
pub fn maxpool_sweep(cases: u64) -> Sweep {
    let mut s = Sweep::new();
    for seed in 0..cases {
        let mut r = rng::seeded(100 + seed);
        let (n, c) = (r.random_range(1..=2), r.random_range(1..=3));
        let (h, w) = (2 * r.random_range(1..=5), 2 * r.random_range(1..=5));
        // Coarse values make ties common.
        let x = Tensor::<f64>::from_fn([n, c, h, w], |_, _, _, _| r.random_range(0..4) as f64);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let y = g.maxpool2(xv).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        let got = g.value(y).clone();
        let grad = g.grad(xv);
        let mut want_grad = Tensor::<f64>::zeros(x.shape());
        for b in 0..n {
            for ch in 0..c {
                for oy in 0..h / 2 {
                    for ox in 0..w / 2 {
                        let mut best = (f64::NEG_INFINITY, 0, 0);
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let v = x.at(b, ch, 2 * oy + dy, 2 * ox + dx);
                                if v > best.0 {
                                    best = (v, 2 * oy + dy, 2 * ox + dx);
                                }
                            }
                        }
                        s.record((got.at(b, ch, oy, ox) - best.0).abs());
                        want_grad.set(b, ch, best.1, best.2, 1.0);
                    }
                }
            }
        }
        s.record(grad.max_abs_diff(&want_grad));
        s.cases += 1;
    }
    s
}

/// Absolute error of `cost_volume` against a quadruple loop.
pub fn cost_volume_sweep(cases: u64) -> Sweep {
    let mut s = Sweep::new();
    for seed in 0..cases {
        let mut r = rng::seeded(200 + seed);
        let c = r.random_range(1..=8);
        let (h, w) = (r.random_range(3..=10), r.random_range(3..=10));
        let d = r.random_range(1..=3);
        let el = Tensor::<f64>::randn([1, c, h, w], 1.0, &mut r);
        let er = Tensor::<f64>::randn([1, c, h, w], 1.0, &mut r);
        let mut g = Graph::new();
        let (lv, rv) = (g.constant(el.clone()), g.constant(er.clone()));
        let v = cost_volume(&mut g, lv, rv, d).unwrap();
        let got = g.value(v);
        let di = d as isize;
        for y in 0..h {
            for x in 0..w {
                for dy in -di..=di {
                    for dx in -di..=di {
                        let (ty, tx) = (y as isize + dy, x as isize + dx);
                        let mut want = 0.0;
                        if ty >= 0 && tx >= 0 && ty < h as isize && tx < w as isize {
                            for ch in 0..c {
                                want += el.at(0, ch, y, x) * er.at(0, ch, ty as usize, tx as usize);
                            }
                            want /= c as f64;
                        }
                        s.record((got.at(0, displacement_channel(dy, dx, d), y, x) - want).abs());
                    }
                }
            }
        }
        s.cases += 1;
    }
    s
}

fn bilinear_zero(plane: &dyn Fn(isize, isize) -> f64, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    plane(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + plane(y0, x0 + 1) * (1.0 - fy) * fx
        + plane(y0 + 1, x0) * fy * (1.0 - fx)
        + plane(y0 + 1, x0 + 1) * fy * fx
}

/// Relative error of `deform_conv2d` against per-tap bilinear sampling of a
/// zero-padded input.
pub fn deform_sweep(cases: u64) -> Sweep {
    let mut s = Sweep::new();
    for seed in 0..cases {
        let mut r = rng::seeded(300 + seed);
        let (n, c, o) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
        let k = [1, 3][r.random_range(0..2)];
        let (h, w) = (r.random_range(3..=7), r.random_range(3..=7));
        let kk = k * k;
        let x = Tensor::<f64>::randn([n, c, h, w], 1.0, &mut r);
        let wt = Tensor::<f64>::randn([o, c, k, k], 1.0, &mut r);
        let b = Tensor::<f64>::randn([1, o, 1, 1], 1.0, &mut r);
        let off = Tensor::<f64>::randn([n, 2 * kk, h, w], 1.5, &mut r);
        let m = Tensor::<f64>::rand_uniform([n, kk, h, w], 0.0, 1.0, &mut r);

        let mut g = Graph::new();
        let vars: Vec<_> = [&x, &wt, &b, &off, &m]
            .iter()
            .map(|t| g.constant((*t).clone()))
            .collect();
        let kernel = DeformKernel {
            weight: vars[1],
            bias: vars[2],
        };
        let y = deform_conv2d(&mut g, vars[0], kernel, vars[3], vars[4]).unwrap();
        let got = g.value(y);

        let half = (k / 2) as isize;
        for bn in 0..n {
            for oc in 0..o {
                for py in 0..h {
                    for px in 0..w {
                        let mut want = b.data()[oc];
                        for tap in 0..kk {
                            let gy = (tap / k) as isize - half;
                            let gx = (tap % k) as isize - half;
                            let sy = py as f64 + gy as f64 + off.at(bn, 2 * tap, py, px);
                            let sx = px as f64 + gx as f64 + off.at(bn, 2 * tap + 1, py, px);
                            for ic in 0..c {
                                let plane = |yy: isize, xx: isize| {
                                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                        0.0
                                    } else {
                                        x.at(bn, ic, yy as usize, xx as usize)
                                    }
                                };
                                want += wt.at(oc, ic, tap / k, tap % k)
                                    * bilinear_zero(&plane, sy, sx)
                                    * m.at(bn, tap, py, px);
                            }
                        }
                        s.record(rel_err(got.at(bn, oc, py, px), want));
                    }
                }
            }
        }
        s.cases += 1;
    }
    s
}

/// SSIM evaluated window by window with the full 2-D Gaussian.
pub fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let s = a.shape();
    let g = gaussian_window();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    let mut count = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            for y0 in 0..=s.h - SSIM_WINDOW {
                for x0 in 0..=s.w - SSIM_WINDOW {
                    let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..SSIM_WINDOW {
                        for j in 0..SSIM_WINDOW {
                            let wgt = g[i] * g[j];
                            let (va, vb) = (a.at(n, c, y0 + i, x0 + j), b.at(n, c, y0 + i, x0 + j));
                            ma += wgt * va;
                            mb += wgt * vb;
                            aa += wgt * va * va;
                            bb += wgt * vb * vb;
                            ab += wgt * va * vb;
                        }
                    }
                    let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                    total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
        }
    }
    total / count as f64
}

/// Absolute error of `ssim` against the window loop on noisy pairs.
pub fn ssim_sweep(cases: u64) -> Sweep {
    let mut s = Sweep::new();
    for seed in 0..cases {
        let mut r = rng::seeded(400 + seed);
        let (h, w) = (r.random_range(11..=20), r.random_range(11..=20));
        let a = Tensor::<f64>::rand_uniform([1, 3, h, w], 0.0, 1.0, &mut r);
        let noise = Tensor::<f64>::randn([1, 3, h, w], 0.1, &mut r);
        let b = Tensor::from_fn([1, 3, h, w], |n, c, y, x| {
            (a.at(n, c, y, x) + noise.at(n, c, y, x)).clamp(0.0, 1.0)
        });
        s.record((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs());
        s.cases += 1;
    }
    s
}

/// Absolute gap between `deform_conv2d` with zero offsets and unit
/// modulation and a same-padded `conv2d`.
pub fn reduction_sweep(cases: u64) -> Sweep {
    let mut s = Sweep::new();
    for seed in 0..cases {
        let mut r = rng::seeded(500 + seed);
        let (n, c, o) = (r.random_range(1..=2), r.random_range(1..=4), r.random_range(1..=4));
        let k = [1, 3, 5][r.random_range(0..3)];
        let (h, w) = (r.random_range(k..=9), r.random_range(k..=9));
        let x = Tensor::<f64>::randn([n, c, h, w], 1.0, &mut r);
        let wt = Tensor::<f64>::randn([o, c, k, k], 1.0, &mut r);
        let b = Tensor::<f64>::randn([1, o, 1, 1], 1.0, &mut r);
        let conv = run_conv(&x, &wt, &b, 1, k / 2);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let kernel = DeformKernel {
            weight: g.constant(wt),
            bias: g.constant(b),
        };
        let off = g.constant(Tensor::zeros([n, 2 * k * k, h, w]));
        let m = g.constant(Tensor::full([n, k * k, h, w], 1.0));
        let y = deform_conv2d(&mut g, xv, kernel, off, m).unwrap();
        s.record(g.value(y).max_abs_diff(&conv));
        s.cases += 1;
    }
    s
}

/// For each horizontal shift `s` in `[-d, d]`, the fraction of interior
/// pixels whose cost-volume argmax is the `(0, s)` channel. Features are
/// smooth and of constant norm: each channel pair is the (cos, sin) of one
/// low-frequency plane wave.
pub fn shift_recovery_rates(c: usize, h: usize, w: usize, d: usize, seed: u64) -> Vec<(isize, f64)> {
    let mut r = rng::seeded(seed);
    let waves: Vec<[f64; 3]> = (0..c / 2)
        .map(|_| {
            [
                r.random_range(-0.6..0.6),
                r.random_range(0.3..0.9),
                r.random_range(0.0..std::f64::consts::TAU),
            ]
        })
        .collect();
    let field = |ch: usize, y: f64, x: f64| -> f64 {
        let [fy, fx, ph] = waves[ch / 2];
        let t = fy * y + fx * x + ph;
        if ch % 2 == 0 {
            t.cos()
        } else {
            t.sin()
        }
    };
    (-(d as isize)..=d as isize)
        .map(|s| {
            let el = Tensor::<f64>::from_fn([1, c, h, w], |_, ch, y, x| field(ch, y as f64, x as f64));
            let er = Tensor::<f64>::from_fn([1, c, h, w], |_, ch, y, x| field(ch, y as f64, x as f64 - s as f64));
            let mut g = Graph::new();
            let (lv, rv) = (g.constant(el), g.constant(er));
            let v = cost_volume(&mut g, lv, rv, d).unwrap();
            let vol = g.value(v);
            let (mut hits, mut total) = (0, 0);
            for y in d..h - d {
                for x in d..w - d {
                    let best = (0..vol.shape().c)
                        .max_by(|&a, &b| vol.at(0, a, y, x).total_cmp(&vol.at(0, b, y, x)))
                        .unwrap();
                    total += 1;
                    if best == displacement_channel(0, s, d) {
                        hits += 1;
                    }
                }
            }
            (s, hits as f64 / total as f64)
        })
        .collect()
}

/// One full-frame layer of per-pixel noise at `depth`.
pub fn noise_scene(seed: u64, h: usize, w: usize, depth: f64) -> Scene {
    let mut r = rng::seeded(seed);
    let color = (0..3 * h * w).map(|_| r.random::<f64>()).collect();
    Scene {
        height: h,
        width: w,
        layers: vec![Layer {
            depth,
            mask: vec![1.0; h * w],
            color,
        }],
    }
}

/// Horizontal shift `s` minimising the squared difference between
/// `left(y, x)` and `right(y, x + s)` over an interior window.
pub fn best_shift(left: &Tensor<f64>, right: &Tensor<f64>, max_shift: isize, margin: usize) -> isize {
    let s = left.shape();
    let (h, w, plane) = (s.h, s.w, s.plane());
    let (l, r) = (left.data(), right.data());
    let ssd = |shift: isize| {
        let mut acc = 0.0;
        for c in 0..3 {
            for y in margin..h - margin {
                for x in margin..w - margin {
                    let xr = (x as isize + shift) as usize;
                    let d = l[c * plane + y * w + x] - r[c * plane + y * w + xr];
                    acc += d * d;
                }
            }
        }
        acc
    };
    (-max_shift..=max_shift)
        .min_by(|a, b| ssd(*a).total_cmp(&ssd(*b)))
        .unwrap()
}
