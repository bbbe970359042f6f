//! Finite-difference checks over every differentiable operator and a tiny
//! end-to-end network, in 64-bit mode.

use std::fmt;

use rand::Rng as _;

use crate::align::{cost_volume, deform_conv2d, offset_head, split_offset_field, DeformKernel};
use crate::error::Result;
use crate::model::{init_params, BoundParams, LossMode, Net, NetConfig, ParamStore};
use crate::rng;
use crate::tensor::{
    finite_diff_report, Activation, ConvParams, GradCheckOptions, GradCheckReport, Graph, Tensor, Var,
};
use crate::train::reconstruction_loss;

/// Tolerance for single operators and modules.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the end-to-end network.
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
    pub probes: usize,
    /// Probes discarded for crossing a non-differentiable point.
    pub kinks: usize,
}

impl GradRow {
    pub const HEADER: &'static str = "operator                          error      tol probes  kinks  result";

    pub fn passed(&self) -> bool {
        self.probes > 0 && self.error.is_finite() && self.error < self.tolerance
    }
}

impl fmt::Display for GradRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} {:>10.3e} {:>8.0e} {:>6} {:>6}  {}",
            self.name,
            self.error,
            self.tolerance,
            self.probes,
            self.kinks,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Network used by the module and end-to-end rows.
pub fn tiny_config() -> NetConfig {
    NetConfig {
        blocks: 3,
        base_channels: 4,
        radius: 2,
        ..NetConfig::default()
    }
}

/// Side length of the tiny network's input.
pub const TINY_SIZE: usize = 16;

fn randn(shape: [usize; 4], r: &mut rng::Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, r)
}

/// Values with magnitude at least 0.1, so activations stay off their kinks.
fn away_from_zero(shape: [usize; 4], r: &mut rng::Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = r.random_range(0.1..2.0);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Offsets `integer + fraction` with the fraction in `[0.1, 0.9]`.
fn fractional_offsets(shape: [usize; 4], r: &mut rng::Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        r.random_range(-2i32..=1) as f64 + r.random_range(0.1..0.9)
    })
}

/// Parameters of the tiny network with offset heads moved off zero, so the
/// deformable taps sit at fractional positions.
pub fn perturbed_params(cfg: &NetConfig, seed: u64) -> Result<ParamStore<f64>> {
    let mut store = init_params::<f64>(cfg, seed)?;
    let mut r = rng::derived(seed, 0x0ff5);
    for (name, t) in store.iter_mut() {
        if name.contains(".offset_") {
            let noise = Tensor::<f64>::randn(t.shape(), 0.05, &mut r);
            t.add_assign(&noise);
        }
    }
    Ok(store)
}

/// Checks `build` over image-like inputs plus the parameters whose names
/// start with one of `prefixes`; the remaining parameters are constants.
fn check_with_params<F>(
    store: &ParamStore<f64>,
    prefixes: &[&str],
    images: Vec<Tensor<f64>>,
    opts: GradCheckOptions,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var], &BoundParams) -> Result<Var>,
{
    let probed: Vec<&str> = store
        .names()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
        .collect();
    let mut inputs = images;
    let n_images = inputs.len();
    inputs.extend(probed.iter().map(|n| store.get(n).expect("listed").clone()));
    finite_diff_report(
        &inputs,
        |g, vars| {
            let mut pairs: Vec<(String, Var)> = probed
                .iter()
                .zip(&vars[n_images..])
                .map(|(n, &v)| (n.to_string(), v))
                .collect();
            for (name, t) in store.iter() {
                if !probed.contains(&name) {
                    pairs.push((name.to_owned(), g.constant(t.clone())));
                }
            }
            build(g, &vars[..n_images], &BoundParams::from_vars(pairs))
        },
        opts,
    )
}

/// Runs every row. Each row is deterministic under `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<GradRow>> {
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let mut r = rng::seeded(seed);
    let mut rows = Vec::new();
    let mut push = |name: &str, report: GradCheckReport, tolerance: f64| {
        rows.push(GradRow {
            name: name.to_owned(),
            error: report.max_error,
            tolerance,
            probes: report.probes,
            kinks: report.kinks,
        })
    };

    let w = randn([4, 3, 3, 3], &mut r);
    let b = randn([1, 4, 1, 1], &mut r);
    for (name, size, stride, padding) in [("conv2d", 6, 1, 1), ("conv2d_stride2", 7, 2, 0)] {
        let x = randn([2, 3, size, size], &mut r);
        let e = finite_diff_report(
            &[x, w.clone(), b.clone()],
            |g, v| {
                g.conv2d(
                    v[0],
                    ConvParams {
                        weight: v[1],
                        bias: v[2],
                        stride,
                        padding,
                    },
                )
            },
            opts,
        )?;
        push(name, e, OP_TOLERANCE);
    }

    let a = away_from_zero([1, 2, 4, 4], &mut r);
    for (name, mode) in [
        ("relu", Activation::Relu),
        ("leaky_relu", Activation::LeakyRelu(0.1)),
        ("sigmoid", Activation::Sigmoid),
    ] {
        let e = finite_diff_report(std::slice::from_ref(&a), |g, v| Ok(g.activation(v[0], mode)), opts)?;
        push(name, e, OP_TOLERANCE);
    }

    let p = randn([1, 2, 6, 6], &mut r);
    let e = finite_diff_report(std::slice::from_ref(&p), |g, v| g.maxpool2(v[0]), opts)?;
    push("maxpool2", e, OP_TOLERANCE);
    let e = finite_diff_report(std::slice::from_ref(&p), |g, v| Ok(g.upsample_bilinear2(v[0])), opts)?;
    push("upsample_bilinear2", e, OP_TOLERANCE);
    let q = randn([1, 3, 6, 6], &mut r);
    let e = finite_diff_report(&[p.clone(), q], |g, v| g.concat_channels(&[v[0], v[1]]), opts)?;
    push("concat_channels", e, OP_TOLERANCE);

    let fl = randn([1, 3, 7, 8], &mut r);
    let fr = randn([1, 3, 7, 8], &mut r);
    let e = finite_diff_report(&[fl, fr], |g, v| cost_volume(g, v[0], v[1], 2), opts)?;
    push("cost_volume", e, OP_TOLERANCE);

    let ctx = randn([1, 5, 6, 6], &mut r);
    let hw = randn([27, 5, 3, 3], &mut r).map(|v| v * 0.2);
    let hb = randn([1, 27, 1, 1], &mut r);
    let e = finite_diff_report(
        &[ctx, hw, hb],
        |g, v| {
            let raw = offset_head(g, v[0], ConvParams::same(v[1], v[2], 3), 9)?;
            let (o, m) = split_offset_field(g, raw)?;
            g.concat_channels(&[o, m])
        },
        opts,
    )?;
    push("offset_field", e, OP_TOLERANCE);

    let dx = randn([2, 3, 6, 7], &mut r);
    let dw = randn([4, 3, 3, 3], &mut r);
    let db = randn([1, 4, 1, 1], &mut r);
    let doff = fractional_offsets([2, 18, 6, 7], &mut r);
    let dmod = Tensor::<f64>::rand_uniform([2, 9, 6, 7], 0.1, 0.9, &mut r);
    let deform_inputs = [dx, dw, db, doff, dmod];
    for (which, name) in [
        (0, "deform_conv2d_input"),
        (1, "deform_conv2d_weight"),
        (3, "deform_conv2d_offsets"),
        (4, "deform_conv2d_modulation"),
    ] {
        // Only the probed tensor is a leaf; the others enter as constants.
        let fixed = deform_inputs.clone();
        let e = finite_diff_report(
            std::slice::from_ref(&deform_inputs[which]),
            |g, v| {
                let vars: Vec<Var> = (0..5)
                    .map(|i| if i == which { v[0] } else { g.constant(fixed[i].clone()) })
                    .collect();
                deform_conv2d(
                    g,
                    vars[0],
                    DeformKernel {
                        weight: vars[1],
                        bias: vars[2],
                    },
                    vars[3],
                    vars[4],
                )
            },
            opts,
        )?;
        push(name, e, OP_TOLERANCE);
    }

    let cfg = tiny_config();
    let store = perturbed_params(&cfg, seed)?;
    let c0 = cfg.base_channels;
    let s = TINY_SIZE;

    let img = Tensor::<f64>::rand_uniform([1, 3, s, s], 0.0, 1.0, &mut r);
    let e = check_with_params(&store, &["enc.pfem."], vec![img], opts, |g, v, p| {
        Net::new(&cfg, p).pfem_forward(g, v[0], false)
    })?;
    push("pfem", e, OP_TOLERANCE);

    let el = randn([1, c0, s, s], &mut r);
    let er = randn([1, c0, s, s], &mut r);
    let e = check_with_params(&store, &["eam1."], vec![el, er], opts, |g, v, p| {
        let (l, r) = Net::new(&cfg, p).eam_forward(g, 1, v[0], v[1])?;
        g.concat_channels(&[l, r])
    })?;
    push("eam", e, OP_TOLERANCE);

    let prev = randn([1, 2 * c0, s / 2, s / 2], &mut r);
    let sl = randn([1, c0, s, s], &mut r);
    let sr = randn([1, c0, s, s], &mut r);
    let e = check_with_params(&store, &["dam2."], vec![prev, sl, sr], opts, |g, v, p| {
        let (l, r, d) = Net::new(&cfg, p).dam_forward(g, 2, v[0], v[1], v[2])?;
        g.concat_channels(&[l, d, r])
    })?;
    push("dam", e, OP_TOLERANCE);

    let pred = Tensor::<f64>::rand_uniform([2, 3, 4, 4], 0.0, 1.0, &mut r);
    let target = Tensor::<f64>::rand_uniform([2, 3, 4, 4], 0.0, 1.0, &mut r);
    for (name, mode) in [("charbonnier_loss", LossMode::Charbonnier), ("mse_loss", LossMode::Mse)] {
        let e = finite_diff_report(
            &[pred.clone(), target.clone()],
            |g, v| reconstruction_loss(g, v[0], v[1], mode, 1e-3),
            opts,
        )?;
        push(name, e, OP_TOLERANCE);
    }

    let left = Tensor::<f64>::rand_uniform([1, 3, s, s], 0.0, 1.0, &mut r);
    let right = Tensor::<f64>::rand_uniform([1, 3, s, s], 0.0, 1.0, &mut r);
    let sharp = Tensor::<f64>::rand_uniform([1, 3, s, s], 0.0, 1.0, &mut r);
    let e = check_with_params(&store, &[""], vec![left, right], opts, |g, v, p| {
        let out = Net::new(&cfg, p).forward(g, v[0], v[1])?.output;
        let t = g.constant(sharp.clone());
        reconstruction_loss(g, out, t, cfg.loss, 1e-3)
    })?;
    push("dpanet_tiny_end_to_end", e, MODEL_TOLERANCE);

    Ok(rows)
}
