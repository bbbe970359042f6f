use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Charbonnier,
    Mse,
}

/// What the encoder alignment module feeds to its offset heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EamContext {
    /// `[E_L, V, E_R]`
    CorrPlusFeatures,
    /// `[E_L, E_R]`, no correlation layer.
    FeaturesOnly,
    /// `V` only.
    CorrOnly,
}

macro_rules! string_enum {
    ($ty:ty { $($s:literal => $v:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{other}` (expected one of: {})",
                        stringify!($ty),
                        [$($s),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = match self {
                    $(v if *v == $v => $s,)+
                    _ => unreachable!(),
                };
                f.write_str(s)
            }
        }
    };
}

string_enum!(LossMode { "charbonnier" => LossMode::Charbonnier, "mse" => LossMode::Mse });
string_enum!(EamContext {
    "corr_plus_features" => EamContext::CorrPlusFeatures,
    "features_only" => EamContext::FeaturesOnly,
    "corr_only" => EamContext::CorrOnly,
});

/// Network hyper-parameters and ablation toggles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Encoder/decoder block count `M`.
    pub blocks: usize,
    /// Channel width of the first stage; stage `i` has `base_channels * 2^(i-1)`.
    pub base_channels: usize,
    /// Cost-volume search radius `d`.
    pub radius: usize,
    /// Deformable kernel taps `K` (an odd square, 9 for 3x3).
    pub taps: usize,
    pub loss: LossMode,
    pub share_encoder: bool,
    pub use_pfem: bool,
    pub use_eam: bool,
    pub eam_context: EamContext,
    pub use_dam: bool,
    /// Feed pre-alignment encoder features to the skip connections.
    #[serde(default)]
    pub skip_pre_eam: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            blocks: 5,
            base_channels: 16,
            radius: 9,
            taps: 9,
            loss: LossMode::Charbonnier,
            share_encoder: true,
            use_pfem: true,
            use_eam: true,
            eam_context: EamContext::CorrPlusFeatures,
            use_dam: true,
            skip_pre_eam: false,
        }
    }
}

impl NetConfig {
    /// Desk-scale defaults: the full network with a radius-4 cost volume.
    pub fn desk() -> Self {
        Self {
            radius: 4,
            ..Self::default()
        }
    }

    /// Ablation variant `#1..=#7` applied to `self`.
    ///
    /// 1: unshared encoder, 2: no pyramid extractor, 3: MSE loss, 4: no EAM,
    /// 5: EAM offsets from features only, 6: EAM offsets from the cost volume
    /// only, 7: no DAM.
    pub fn ablation(mut self, variant: usize) -> Result<Self> {
        match variant {
            1 => self.share_encoder = false,
            2 => self.use_pfem = false,
            3 => self.loss = LossMode::Mse,
            4 => self.use_eam = false,
            5 => self.eam_context = EamContext::FeaturesOnly,
            6 => self.eam_context = EamContext::CorrOnly,
            7 => self.use_dam = false,
            other => {
                return Err(Error::Config(format!(
                    "ablation variant #{other} does not exist (1..=7)"
                )))
            }
        }
        Ok(self)
    }

    pub fn kernel_size(&self) -> usize {
        (self.taps as f64).sqrt().round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks < 2 {
            return Err(Error::Config(format!(
                "blocks (M) must be at least 2, got {}",
                self.blocks
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.radius == 0 {
            return Err(Error::Config("radius (d) must be at least 1".into()));
        }
        let k = self.kernel_size();
        if k * k != self.taps || k % 2 == 0 {
            return Err(Error::Config(format!(
                "taps (K) must be the square of an odd kernel size, got {}",
                self.taps
            )));
        }
        Ok(())
    }

    /// Channels of encoder stage `i` (1-based).
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << (stage - 1)
    }

    /// Required divisor of the input height and width.
    pub fn size_multiple(&self) -> usize {
        let schedule = 1 << (self.blocks - 2);
        if self.use_pfem {
            schedule.max(4)
        } else {
            schedule
        }
    }

    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Divisibility { h, w, multiple: m });
        }
        Ok(())
    }
}
