//! Forward pass of the alignment network.
//!
//! ```text
//! I_L, I_R -> pyramid extractor -> (encoder block i, EAM i) x (M-1) -> bottleneck = D^0
//! D^{j-1} -> [2x upsample if j >= 2] -> DAM j with skips E^{M-j} -> decoder block j   (j = 1..M-1)
//! D^{M-1} -> 3x3 conv -> restored image
//! ```
//!
//! Parameter names are documented in [`super::params::param_specs`].

use super::config::{EamContext, NetConfig};
use super::params::{encoder_prefix, BoundParams, ParamStore};
use crate::align::{cost_volume, deform_conv2d, offset_head, split_offset_field, DeformKernel};
use crate::error::{Error, Result};
use crate::tensor::{Activation, ConvParams, Graph, Real, Shape4, Tensor, Var};

const LEAKY_SLOPE: f64 = 0.1;

/// Graph handles produced by a full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    /// Restored image, unclamped.
    pub output: Var,
    /// `(E_L^{i-0.5}, E_R^{i-0.5})` for `i = 1..M-1`.
    pub pre_align: Vec<(Var, Var)>,
    /// `(E_L^i, E_R^i)` for `i = 1..M-1`.
    pub post_align: Vec<(Var, Var)>,
    /// `D^0 .. D^{M-1}`.
    pub decoder: Vec<Var>,
}

/// A configuration bound to a set of graph parameters.
pub struct Net<'a> {
    pub cfg: &'a NetConfig,
    pub params: &'a BoundParams,
}

fn expect_shape<T: Real>(g: &Graph<T>, v: Var, expected: Shape4, stage: &'static str) -> Result<()> {
    let got = g.shape(v);
    if got != expected {
        return Err(Error::shape(stage, expected, got));
    }
    Ok(())
}

impl<'a> Net<'a> {
    pub fn new(cfg: &'a NetConfig, params: &'a BoundParams) -> Self {
        Self { cfg, params }
    }

    fn conv<T: Real>(&self, g: &mut Graph<T>, x: Var, name: &str) -> Result<Var> {
        let weight = self.params.get(&format!("{name}.weight"))?;
        let bias = self.params.get(&format!("{name}.bias"))?;
        let k = g.shape(weight).h;
        g.conv2d(x, ConvParams::same(weight, bias, k))
    }

    fn conv_lrelu<T: Real>(&self, g: &mut Graph<T>, x: Var, name: &str) -> Result<Var> {
        let y = self.conv(g, x, name)?;
        Ok(g.activation(y, Activation::LeakyRelu(LEAKY_SLOPE)))
    }

    /// `x + conv2(relu(conv1(x)))`
    fn res_block<T: Real>(&self, g: &mut Graph<T>, x: Var, name: &str) -> Result<Var> {
        let h = self.conv(g, x, &format!("{name}.conv1"))?;
        let h = g.relu(h);
        let h = self.conv(g, h, &format!("{name}.conv2"))?;
        g.add(x, h)
    }

    /// Leading conv plus two residual blocks.
    fn conv_block<T: Real>(&self, g: &mut Graph<T>, x: Var, name: &str) -> Result<Var> {
        let mut h = self.conv_lrelu(g, x, &format!("{name}.conv"))?;
        for r in 1..=2 {
            h = self.res_block(g, h, &format!("{name}.res{r}"))?;
        }
        Ok(h)
    }

    /// Initial feature extractor. Three pyramid levels (full, 1/2, 1/4)
    /// fused by a 1x1 conv; a single 3x3 conv when the pyramid is disabled.
    pub fn pfem_forward<T: Real>(&self, g: &mut Graph<T>, image: Var, right: bool) -> Result<Var> {
        let s = g.shape(image);
        if s.c != 3 {
            return Err(Error::shape("pfem", "3-channel image", s));
        }
        let p = encoder_prefix(self.cfg, right);
        let c0 = self.cfg.base_channels;
        let out = if self.cfg.use_pfem {
            let l0 = self.conv_lrelu(g, image, &format!("{p}.pfem.level0"))?;
            let d1 = g.maxpool2(l0)?;
            let l1 = self.conv_lrelu(g, d1, &format!("{p}.pfem.level1"))?;
            let d2 = g.maxpool2(l1)?;
            let l2 = self.conv_lrelu(g, d2, &format!("{p}.pfem.level2"))?;
            let u1 = g.upsample_bilinear2(l1);
            let u2 = g.upsample_bilinear2(l2);
            let u2 = g.upsample_bilinear2(u2);
            let cat = g.concat_channels(&[l0, u1, u2])?;
            self.conv_lrelu(g, cat, &format!("{p}.pfem.fuse"))?
        } else {
            self.conv_lrelu(g, image, &format!("{p}.stem"))?
        };
        expect_shape(g, out, Shape4::new(s.n, c0, s.h, s.w), "pfem")?;
        Ok(out)
    }

    /// Encoder feature extractor `i` in `1..M`. Blocks after the first halve
    /// the resolution with max pooling and double the channels.
    pub fn encoder_block_forward<T: Real>(&self, g: &mut Graph<T>, stage: usize, x: Var, right: bool) -> Result<Var> {
        if stage == 0 || stage >= self.cfg.blocks {
            return Err(Error::Index(format!(
                "encoder block {stage} (valid 1..={})",
                self.cfg.blocks - 1
            )));
        }
        let s = g.shape(x);
        let x = if stage == 1 { x } else { g.maxpool2(x)? };
        let p = encoder_prefix(self.cfg, right);
        let out = self.conv_block(g, x, &format!("{p}.block{stage}"))?;
        let (h, w) = if stage == 1 { (s.h, s.w) } else { (s.h / 2, s.w / 2) };
        expect_shape(
            g,
            out,
            Shape4::new(s.n, self.cfg.stage_channels(stage), h, w),
            "encoder block",
        )?;
        Ok(out)
    }

    fn align_pair<T: Real>(
        &self,
        g: &mut Graph<T>,
        module: &str,
        context: Var,
        left: Var,
        right: Var,
    ) -> Result<(Var, Var)> {
        let mut out = [left, right];
        for (slot, side) in out.iter_mut().zip(["left", "right"]) {
            let head = ConvParams::same(
                self.params.get(&format!("{module}.offset_{side}.weight"))?,
                self.params.get(&format!("{module}.offset_{side}.bias"))?,
                3,
            );
            let raw = offset_head(g, context, head, self.cfg.taps)?;
            let (offsets, modulation) = split_offset_field(g, raw)?;
            let kernel = DeformKernel {
                weight: self.params.get(&format!("{module}.deform_{side}.weight"))?,
                bias: self.params.get(&format!("{module}.deform_{side}.bias"))?,
            };
            *slot = deform_conv2d(g, *slot, kernel, offsets, modulation)?;
        }
        Ok((out[0], out[1]))
    }

    /// Encoder alignment module `i`: correlation, per-view offset heads and
    /// per-view deformable convolutions. Identity when disabled.
    pub fn eam_forward<T: Real>(&self, g: &mut Graph<T>, stage: usize, left: Var, right: Var) -> Result<(Var, Var)> {
        let (sl, sr) = (g.shape(left), g.shape(right));
        if sl != sr {
            return Err(Error::shape("eam", sl, sr));
        }
        if !self.cfg.use_eam {
            return Ok((left, right));
        }
        let context = match self.cfg.eam_context {
            EamContext::CorrPlusFeatures => {
                let v = cost_volume(g, left, right, self.cfg.radius)?;
                g.concat_channels(&[left, v, right])?
            }
            EamContext::FeaturesOnly => g.concat_channels(&[left, right])?,
            EamContext::CorrOnly => cost_volume(g, left, right, self.cfg.radius)?,
        };
        let (l, r) = self.align_pair(g, &format!("eam{stage}"), context, left, right)?;
        expect_shape(g, l, sl, "eam")?;
        Ok((l, r))
    }

    /// `F_E^M`: concatenation of the last aligned features, conv, two ResBlocks.
    pub fn encoder_bottleneck<T: Real>(&self, g: &mut Graph<T>, left: Var, right: Var) -> Result<Var> {
        let (sl, sr) = (g.shape(left), g.shape(right));
        let c = self.cfg.stage_channels(self.cfg.blocks - 1);
        if sl != sr || sl.c != c {
            return Err(Error::shape(
                "bottleneck",
                format!("two equal tensors with {c} channels"),
                format!("{sl} and {sr}"),
            ));
        }
        let cat = g.concat_channels(&[left, right])?;
        let out = self.conv_block(g, cat, "bottleneck")?;
        expect_shape(g, out, sl, "bottleneck")?;
        Ok(out)
    }

    /// Decoder alignment module `j`. Returns `(D_L, D_R, D_prev)` where
    /// `D_prev` has been upsampled to the skip resolution for `j >= 2`.
    pub fn dam_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        stage: usize,
        prev: Var,
        skip_left: Var,
        skip_right: Var,
    ) -> Result<(Var, Var, Var)> {
        if stage == 0 || stage >= self.cfg.blocks {
            return Err(Error::Index(format!("decoder alignment module {stage}")));
        }
        let prev = if stage >= 2 { g.upsample_bilinear2(prev) } else { prev };
        let (sp, sl, sr) = (g.shape(prev), g.shape(skip_left), g.shape(skip_right));
        for (i, s) in [sl, sr].into_iter().enumerate() {
            if (s.n, s.h, s.w) != (sp.n, sp.h, sp.w) {
                return Err(Error::SpatialMismatch {
                    op: "dam",
                    index: i + 1,
                    expected: format!("{}x{}", sp.h, sp.w),
                    got: format!("{}x{}", s.h, s.w),
                });
            }
        }
        if !self.cfg.use_dam {
            return Ok((skip_left, skip_right, prev));
        }
        let context = g.concat_channels(&[skip_left, prev, skip_right])?;
        let (l, r) = self.align_pair(g, &format!("dam{stage}"), context, skip_left, skip_right)?;
        Ok((l, r, prev))
    }

    /// Decoder block `j`. For `j < M`: concat `[D_L, D_prev, D_R]`, conv,
    /// two ResBlocks. For `j == M`: a single conv of `D_prev` to RGB.
    pub fn decoder_block_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        stage: usize,
        left: Option<Var>,
        prev: Var,
        right: Option<Var>,
    ) -> Result<Var> {
        let m = self.cfg.blocks;
        if stage == 0 || stage > m {
            return Err(Error::Index(format!("decoder block {stage} (valid 1..={m})")));
        }
        if stage == m {
            let out = self.conv(g, prev, "dec.final")?;
            let s = g.shape(prev);
            expect_shape(g, out, Shape4::new(s.n, 3, s.h, s.w), "decoder output")?;
            return Ok(out);
        }
        let (Some(l), Some(r)) = (left, right) else {
            return Err(Error::Config(format!(
                "decoder block {stage} needs both aligned skip features"
            )));
        };
        let cat = g.concat_channels(&[l, prev, r])?;
        let out = self.conv_block(g, cat, &format!("dec.block{stage}"))?;
        let s = g.shape(l);
        expect_shape(
            g,
            out,
            Shape4::new(s.n, self.cfg.stage_channels(m - stage), s.h, s.w),
            "decoder block",
        )?;
        Ok(out)
    }

    /// Full network on a pair of `n x 3 x H x W` views.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, left: Var, right: Var) -> Result<ForwardOutputs> {
        let (sl, sr) = (g.shape(left), g.shape(right));
        if sl != sr || sl.c != 3 {
            return Err(Error::shape(
                "dpanet",
                "two equal 3-channel images",
                format!("{sl} and {sr}"),
            ));
        }
        self.cfg.check_input_size(sl.h, sl.w)?;
        let m = self.cfg.blocks;

        let mut el = self.pfem_forward(g, left, false)?;
        let mut er = self.pfem_forward(g, right, true)?;
        let mut pre_align = Vec::with_capacity(m - 1);
        let mut post_align = Vec::with_capacity(m - 1);
        for i in 1..m {
            el = self.encoder_block_forward(g, i, el, false)?;
            er = self.encoder_block_forward(g, i, er, true)?;
            pre_align.push((el, er));
            (el, er) = self.eam_forward(g, i, el, er)?;
            post_align.push((el, er));
        }

        let mut d = self.encoder_bottleneck(g, el, er)?;
        let mut decoder = vec![d];
        for j in 1..m {
            let skips = if self.cfg.skip_pre_eam { &pre_align } else { &post_align };
            let (skip_l, skip_r) = skips[m - j - 1];
            let (dl, dr, prev) = self.dam_forward(g, j, d, skip_l, skip_r)?;
            d = self.decoder_block_forward(g, j, Some(dl), prev, Some(dr))?;
            decoder.push(d);
        }
        let output = self.decoder_block_forward(g, m, None, d, None)?;
        expect_shape(g, output, sl, "dpanet output")?;
        Ok(ForwardOutputs {
            output,
            pre_align,
            post_align,
            decoder,
        })
    }
}

/// Restores images outside any training graph; output clamped to `[0, 1]`.
pub fn predict<T: Real>(
    cfg: &NetConfig,
    params: &ParamStore<T>,
    left: &Tensor<T>,
    right: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let l = g.constant(left.clone());
    let r = g.constant(right.clone());
    let out = Net::new(cfg, &bound).forward(&mut g, l, r)?.output;
    Ok(g.value(out).map(|v| v.max(T::zero()).min(T::one())))
}
