//! Losses, the Adam optimizer, the step learning-rate schedule and the
//! training loop.

mod adam;
mod loss;

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, OptimState};
pub use loss::reconstruction_loss;

use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{init_params, predict, Net, NetConfig, ParamStore};
use crate::rng;
use crate::synth::DpSample;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_lr: f64,
    /// Epochs between learning-rate halvings.
    pub lr_half_period: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    /// Charbonnier epsilon.
    pub loss_eps: f64,
    pub seed: u64,
    /// Fraction of samples held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 2e-5,
            lr_half_period: 60,
            total_epochs: 150,
            batch_size: 4,
            patch_size: 64,
            loss_eps: 1e-3,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, net: &NetConfig) -> Result<()> {
        if !(self.initial_lr > 0.0) || !(self.loss_eps > 0.0) {
            return Err(Error::Config("initial_lr and loss_eps must be positive".into()));
        }
        if self.lr_half_period == 0 || self.batch_size == 0 || self.patch_size == 0 {
            return Err(Error::Config(
                "lr_half_period, batch_size and patch_size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        net.validate()?;
        let m = net.size_multiple();
        if self.patch_size % m != 0 {
            return Err(Error::Config(format!(
                "patch_size {} must be a multiple of {m} for this network",
                self.patch_size
            )));
        }
        Ok(())
    }
}

/// `initial_lr * 0.5^floor(epoch / lr_half_period)` for a 0-based epoch.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.initial_lr * 0.5f64.powi((epoch / cfg.lr_half_period) as i32)
}

/// One line of the training log. `epoch` is 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub val_mae: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,lr,mean_loss,val_psnr,val_ssim,val_mae";
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{:e},{:.9},{:.6},{:.6},{:.6}",
            self.epoch, self.lr, self.mean_loss, self.val_psnr, self.val_ssim, self.val_mae
        )
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: ParamStore<f32>,
    /// Parameters with the highest validation PSNR (the initial parameters
    /// when no epoch ran).
    pub best: ParamStore<f32>,
    pub log: Vec<EpochRecord>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// Seeded train/validation split: `max(1, round(fraction * n))` samples
/// are held out. Returns sorted index lists.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let val = ((fraction * n as f64).round() as usize).max(1);
    if n < val + 1 {
        return Err(Error::Dataset(format!(
            "{n} samples cannot be split into training and {val} validation samples"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::derived(seed, 0x5711));
    let mut v = idx[..val].to_vec();
    let mut t = idx[val..].to_vec();
    v.sort_unstable();
    t.sort_unstable();
    Ok((t, v))
}

/// Mean PSNR, SSIM and MAE of the clamped predictions over `samples`.
pub fn evaluate(net: &NetConfig, params: &ParamStore<f32>, samples: &[&DpSample]) -> Result<(f64, f64, f64)> {
    let mut acc = (0.0, 0.0, 0.0);
    for s in samples {
        let out = predict(net, params, &s.left, &s.right)?;
        acc.0 += metrics::psnr(&out, &s.sharp)?;
        acc.1 += metrics::ssim(&out, &s.sharp)?;
        acc.2 += metrics::mae(&out, &s.sharp)?;
    }
    let n = samples.len().max(1) as f64;
    Ok((acc.0 / n, acc.1 / n, acc.2 / n))
}

fn check_dataset(samples: &[DpSample], cfg: &TrainConfig, net: &NetConfig) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    for s in samples {
        let shape = s.left.shape();
        if shape.n != 1 || shape.c != 3 || s.right.shape() != shape || s.sharp.shape() != shape {
            return Err(Error::Dataset(format!(
                "sample {}: views and target must share one 1x3xHxW shape (got {}, {}, {})",
                s.id,
                shape,
                s.right.shape(),
                s.sharp.shape()
            )));
        }
        if shape.h < cfg.patch_size || shape.w < cfg.patch_size {
            return Err(Error::Dataset(format!(
                "sample {} is {}x{}, smaller than the {} patch",
                s.id, shape.h, shape.w, cfg.patch_size
            )));
        }
        net.check_input_size(shape.h, shape.w)
            .map_err(|e| Error::Dataset(format!("sample {}: {e}", s.id)))?;
    }
    Ok(())
}

fn crop_batch(samples: &[&DpSample], patch: usize, r: &mut rng::Rng) -> Result<[Tensor<f32>; 3]> {
    let mut parts: [Vec<Tensor<f32>>; 3] = Default::default();
    for s in samples {
        let shape = s.left.shape();
        let top = r.random_range(0..=shape.h - patch);
        let left = r.random_range(0..=shape.w - patch);
        parts[0].push(s.left.crop(top, left, patch, patch)?);
        parts[1].push(s.right.crop(top, left, patch, patch)?);
        parts[2].push(s.sharp.crop(top, left, patch, patch)?);
    }
    let [a, b, c] = parts;
    Ok([Tensor::stack(&a)?, Tensor::stack(&b)?, Tensor::stack(&c)?])
}

/// One forward, loss and backward pass; returns the loss value and the
/// parameter gradients.
pub fn loss_and_grads(
    net: &NetConfig,
    params: &ParamStore<f32>,
    left: &Tensor<f32>,
    right: &Tensor<f32>,
    target: &Tensor<f32>,
    eps: f64,
) -> Result<(f64, std::collections::BTreeMap<String, Tensor<f32>>)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let l = g.constant(left.clone());
    let r = g.constant(right.clone());
    let t = g.constant(target.clone());
    let out = Net::new(net, &bound).forward(&mut g, l, r)?.output;
    let loss = reconstruction_loss(&mut g, out, t, net.loss, eps)?;
    let value = g.value(loss).data()[0] as f64;
    g.backward(loss)?;
    Ok((value, bound.grads(&mut g)))
}

/// Trains from a seeded initialisation. `on_epoch` sees each log record as
/// soon as the epoch finishes.
pub fn train_loop(
    samples: &[DpSample],
    cfg: &TrainConfig,
    net: &NetConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate(net)?;
    check_dataset(samples, cfg, net)?;
    let (train_idx, val_idx) = split_indices(samples.len(), cfg.val_fraction, cfg.seed)?;
    let val: Vec<&DpSample> = val_idx.iter().map(|&i| &samples[i]).collect();

    let mut params = init_params::<f32>(net, cfg.seed)?;
    let mut best = params.clone();
    let mut best_psnr = f64::NEG_INFINITY;
    let mut state = OptimState::<f32>::new(cfg.initial_lr);
    let mut log = Vec::with_capacity(cfg.total_epochs);

    for epoch in 0..cfg.total_epochs {
        state.lr = lr_at_epoch(epoch, cfg);
        let mut r = rng::derived(cfg.seed, 1 + epoch as u64);
        let mut order = train_idx.clone();
        order.shuffle(&mut r);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&DpSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let [l, rt, s] = crop_batch(&batch, cfg.patch_size, &mut r)?;
            let (loss, grads) = loss_and_grads(net, &params, &l, &rt, &s, cfg.loss_eps)?;
            if !loss.is_finite() {
                return Err(Error::Dataset(format!(
                    "loss diverged to {loss} in epoch {}",
                    epoch + 1
                )));
            }
            adam_step(&mut params, &grads, &mut state)?;
            total += loss * chunk.len() as f64;
        }
        let (val_psnr, val_ssim, val_mae) = evaluate(net, &params, &val)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr: state.lr,
            mean_loss: total / train_idx.len() as f64,
            val_psnr,
            val_ssim,
            val_mae,
        };
        on_epoch(&record);
        log.push(record);
        if val_psnr > best_psnr {
            best_psnr = val_psnr;
            best = params.clone();
        }
    }
    let ids = |idx: &[usize]| idx.iter().map(|&i| samples[i].id.clone()).collect();
    Ok(TrainOutcome {
        best,
        train_ids: ids(&train_idx),
        val_ids: ids(&val_idx),
        last: params,
        log,
    })
}
