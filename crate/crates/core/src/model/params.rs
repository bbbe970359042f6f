use std::collections::BTreeMap;

use super::config::{EamContext, NetConfig};
use crate::align::displacement_count;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Real, Shape4, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    He,
    /// He scaled by [`RESIDUAL_INIT_SCALE`]; the last conv of each residual
    /// branch, so a chain of residual blocks starts close to the identity.
    HeResidual,
    Zero,
}

pub const RESIDUAL_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape4,
    pub init: Init,
}

/// Named parameters in deterministic (lexicographic) order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Option<Tensor<T>> {
        self.entries.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> BoundParams {
        BoundParams {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), g.leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Wraps graph handles created elsewhere, e.g. by a gradient checker.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::ParamMismatch(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients of every parameter after a backward pass.
    pub fn grads<T: Real>(&self, g: &mut Graph<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars.iter().map(|(k, &v)| (k.clone(), g.take_grad(v))).collect()
    }
}

struct SpecBuilder {
    specs: Vec<ParamSpec>,
}

impl SpecBuilder {
    fn conv(&mut self, name: &str, in_c: usize, out_c: usize, k: usize, init: Init) {
        self.specs.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: Shape4::new(out_c, in_c, k, k),
            init,
        });
        self.specs.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: Shape4::new(1, out_c, 1, 1),
            init: Init::Zero,
        });
    }

    fn block(&mut self, name: &str, in_c: usize, out_c: usize) {
        self.conv(&format!("{name}.conv"), in_c, out_c, 3, Init::He);
        for r in 1..=2 {
            self.conv(&format!("{name}.res{r}.conv1"), out_c, out_c, 3, Init::He);
            self.conv(&format!("{name}.res{r}.conv2"), out_c, out_c, 3, Init::HeResidual);
        }
    }

    fn align_pair(&mut self, name: &str, context_c: usize, feat_c: usize, cfg: &NetConfig) {
        for side in ["left", "right"] {
            self.conv(&format!("{name}.offset_{side}"), context_c, 3 * cfg.taps, 3, Init::Zero);
            self.conv(
                &format!("{name}.deform_{side}"),
                feat_c,
                feat_c,
                cfg.kernel_size(),
                Init::He,
            );
        }
    }
}

/// Encoder parameter prefix for a view.
pub fn encoder_prefix(cfg: &NetConfig, right: bool) -> &'static str {
    match (cfg.share_encoder, right) {
        (true, _) => "enc",
        (false, false) => "enc_left",
        (false, true) => "enc_right",
    }
}

/// Offset-head input channels of encoder alignment module `i`.
pub fn eam_context_channels(cfg: &NetConfig, stage: usize) -> usize {
    let c = cfg.stage_channels(stage);
    let v = displacement_count(cfg.radius);
    match cfg.eam_context {
        EamContext::CorrPlusFeatures => 2 * c + v,
        EamContext::FeaturesOnly => 2 * c,
        EamContext::CorrOnly => v,
    }
}

/// Every parameter the configuration needs, with shapes and init rules.
pub fn param_specs(cfg: &NetConfig) -> Vec<ParamSpec> {
    let m = cfg.blocks;
    let c0 = cfg.base_channels;
    let mut b = SpecBuilder { specs: Vec::new() };

    let prefixes: Vec<&str> = if cfg.share_encoder {
        vec!["enc"]
    } else {
        vec!["enc_left", "enc_right"]
    };
    for p in prefixes {
        if cfg.use_pfem {
            b.conv(&format!("{p}.pfem.level0"), 3, c0, 3, Init::He);
            b.conv(&format!("{p}.pfem.level1"), c0, c0, 3, Init::He);
            b.conv(&format!("{p}.pfem.level2"), c0, c0, 3, Init::He);
            b.conv(&format!("{p}.pfem.fuse"), 3 * c0, c0, 1, Init::He);
        } else {
            b.conv(&format!("{p}.stem"), 3, c0, 3, Init::He);
        }
        for i in 1..m {
            let in_c = if i == 1 { c0 } else { cfg.stage_channels(i - 1) };
            b.block(&format!("{p}.block{i}"), in_c, cfg.stage_channels(i));
        }
    }
    if cfg.use_eam {
        for i in 1..m {
            b.align_pair(
                &format!("eam{i}"),
                eam_context_channels(cfg, i),
                cfg.stage_channels(i),
                cfg,
            );
        }
    }
    let last = cfg.stage_channels(m - 1);
    b.block("bottleneck", 2 * last, last);
    for j in 1..m {
        let skip = cfg.stage_channels(m - j);
        let prev = if j == 1 { last } else { cfg.stage_channels(m - j + 1) };
        if cfg.use_dam {
            b.align_pair(&format!("dam{j}"), 2 * skip + prev, skip, cfg);
        }
        b.block(&format!("dec.block{j}"), 2 * skip + prev, skip);
    }
    b.conv("dec.final", c0, 3, 3, Init::He);
    b.specs.sort_by(|a, b| a.name.cmp(&b.name));
    b.specs
}

/// Total parameter count of a configuration.
pub fn param_count(cfg: &NetConfig) -> usize {
    param_specs(cfg).iter().map(|s| s.shape.numel()).sum()
}

fn name_stream(name: &str) -> u64 {
    // FNV-1a; stable across platforms and releases.
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// He-normal weights, zero biases and zero offset heads. Each tensor draws
/// from its own stream keyed by name, so configurations that share a
/// parameter name also share its initial value.
pub fn init_params<T: Real>(cfg: &NetConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for spec in param_specs(cfg) {
        let t = match spec.init {
            Init::Zero => Tensor::zeros(spec.shape),
            Init::He | Init::HeResidual => {
                let fan_in = spec.shape.c * spec.shape.h * spec.shape.w;
                let scale = if spec.init == Init::HeResidual {
                    RESIDUAL_INIT_SCALE
                } else {
                    1.0
                };
                let mut r = rng::derived(seed, name_stream(&spec.name));
                Tensor::randn(spec.shape, scale * (2.0 / fan_in as f64).sqrt(), &mut r)
            }
        };
        store.insert(spec.name, t);
    }
    Ok(store)
}

/// Checks names and shapes of `store` against the configuration, reporting
/// the first discrepancy in name order.
pub fn validate_store<T: Real>(cfg: &NetConfig, store: &ParamStore<T>) -> Result<()> {
    let expected: BTreeMap<String, Shape4> = param_specs(cfg).into_iter().map(|s| (s.name, s.shape)).collect();
    let mut names: Vec<&str> = expected.keys().map(String::as_str).chain(store.names()).collect();
    names.sort_unstable();
    names.dedup();
    for name in names {
        match (expected.get(name), store.get(name)) {
            (Some(shape), Some(t)) if *shape != t.shape() => {
                return Err(Error::ParamMismatch(format!(
                    "parameter `{name}` has shape {} in checkpoint, configuration expects {shape}",
                    t.shape()
                )))
            }
            (Some(_), None) => {
                return Err(Error::ParamMismatch(format!(
                    "parameter `{name}` missing from checkpoint"
                )))
            }
            (None, Some(_)) => {
                return Err(Error::ParamMismatch(format!(
                    "checkpoint has parameter `{name}` that the configuration does not use"
                )))
            }
            _ => {}
        }
    }
    Ok(())
}
