//! Resolved run configuration: network, training, generator and paths.
//!
//! Sources are applied in order defaults, config file, command line; later
//! values win. Config files hold one `key = value` per line, `#` starts a
//! comment.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dpanet::model::NetConfig;
use dpanet::synth::SynthConfig;
use dpanet::train::TrainConfig;

/// Keys accepted in config files and as `--key=value` flags.
pub const KEYS: &[&str] = &[
    "blocks",
    "base_channels",
    "radius",
    "taps",
    "loss",
    "share_encoder",
    "use_pfem",
    "use_eam",
    "eam_context",
    "use_dam",
    "ablation",
    "initial_lr",
    "lr_half_period",
    "total_epochs",
    "batch_size",
    "patch_size",
    "loss_eps",
    "val_fraction",
    "seed",
    "count",
    "height",
    "width",
    "regions",
    "focal_depth",
    "blur_gain",
    "max_radius",
    "data",
    "out",
    "checkpoint",
    "split_file",
];

/// Accepted but left out of help and echoes unless set.
const HIDDEN_KEYS: &[&str] = &["skip_pre_eam"];

pub fn is_key(key: &str) -> bool {
    KEYS.contains(&key) || HIDDEN_KEYS.contains(&key)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    /// Ablation variant applied on top of the network keys.
    pub ablation: Option<usize>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// `split.json` written by `train`; restricts `eval` to its held-out ids.
    pub split_file: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::desk(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            ablation: None,
            data: None,
            out: None,
            checkpoint: None,
            split_file: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("invalid value `{value}` for `{key}`: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(format!("invalid value `{value}` for `{key}`: expected true or false")),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key {
            "blocks" => self.net.blocks = parse(key, v)?,
            "base_channels" => self.net.base_channels = parse(key, v)?,
            "radius" => self.net.radius = parse(key, v)?,
            "taps" => self.net.taps = parse(key, v)?,
            "loss" => self.net.loss = parse(key, v)?,
            "share_encoder" => self.net.share_encoder = parse_bool(key, v)?,
            "use_pfem" => self.net.use_pfem = parse_bool(key, v)?,
            "use_eam" => self.net.use_eam = parse_bool(key, v)?,
            "eam_context" => self.net.eam_context = parse(key, v)?,
            "use_dam" => self.net.use_dam = parse_bool(key, v)?,
            "skip_pre_eam" => self.net.skip_pre_eam = parse_bool(key, v)?,
            "ablation" => {
                let a: usize = parse(key, v)?;
                if !(1..=7).contains(&a) {
                    return Err(format!("invalid value `{v}` for `ablation`: expected 1..=7"));
                }
                self.ablation = Some(a);
            }
            "initial_lr" => self.train.initial_lr = parse(key, v)?,
            "lr_half_period" => self.train.lr_half_period = parse(key, v)?,
            "total_epochs" => self.train.total_epochs = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "patch_size" => self.train.patch_size = parse(key, v)?,
            "loss_eps" => self.train.loss_eps = parse(key, v)?,
            "val_fraction" => self.train.val_fraction = parse(key, v)?,
            "seed" => {
                let s: u64 = parse(key, v)?;
                self.train.seed = s;
                self.synth.seed = s;
            }
            "count" => self.synth.count = parse(key, v)?,
            "height" => self.synth.height = parse(key, v)?,
            "width" => self.synth.width = parse(key, v)?,
            "regions" => self.synth.regions = parse(key, v)?,
            "focal_depth" => self.synth.lens.focal_depth = parse(key, v)?,
            "blur_gain" => self.synth.lens.gain = parse(key, v)?,
            "max_radius" => self.synth.lens.max_radius = parse(key, v)?,
            "data" => self.data = Some(PathBuf::from(v)),
            "out" => self.out = Some(PathBuf::from(v)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "split_file" => self.split_file = Some(PathBuf::from(v)),
            _ => {
                return Err(format!(
                    "unknown configuration key `{key}`; known keys: {}",
                    KEYS.join(", ")
                ))
            }
        }
        Ok(())
    }

    /// Applies a config file.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("{}:{}: expected `key = value`", path.display(), i + 1))?;
            self.set(key.trim(), value)
                .map_err(|e| format!("{}:{}: {e}", path.display(), i + 1))?;
        }
        Ok(())
    }

    /// Network configuration with the ablation variant applied.
    pub fn net_config(&self) -> Result<NetConfig, String> {
        let net = match self.ablation {
            Some(a) => self.net.clone().ablation(a).map_err(|e| e.to_string())?,
            None => self.net.clone(),
        };
        net.validate().map_err(|e| e.to_string())?;
        Ok(net)
    }

    /// Checks every value before any work starts.
    pub fn validate(&self) -> Result<(), String> {
        let net = self.net_config()?;
        self.train.validate(&net).map_err(|e| e.to_string())?;
        let s = &self.synth;
        if s.count == 0 || s.regions == 0 {
            return Err("count and regions must be positive".into());
        }
        if s.height == 0 || s.width == 0 || s.height % 8 != 0 || s.width % 8 != 0 {
            return Err(format!(
                "height and width must be positive multiples of 8, got {}x{}",
                s.height, s.width
            ));
        }
        if !(s.lens.gain > 0.0) || !(s.lens.max_radius >= 0.0) || !s.lens.focal_depth.is_finite() {
            return Err("blur_gain must be positive, max_radius non-negative and focal_depth finite".into());
        }
        Ok(())
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn render(&self) -> String {
        let net = &self.net;
        let t = &self.train;
        let s = &self.synth;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut entries: Vec<(&str, String)> = vec![
            ("blocks", net.blocks.to_string()),
            ("base_channels", net.base_channels.to_string()),
            ("radius", net.radius.to_string()),
            ("taps", net.taps.to_string()),
            ("loss", net.loss.to_string()),
            ("share_encoder", net.share_encoder.to_string()),
            ("use_pfem", net.use_pfem.to_string()),
            ("use_eam", net.use_eam.to_string()),
            ("eam_context", net.eam_context.to_string()),
            ("use_dam", net.use_dam.to_string()),
            ("ablation", self.ablation.map(|a| a.to_string()).unwrap_or_default()),
            ("initial_lr", t.initial_lr.to_string()),
            ("lr_half_period", t.lr_half_period.to_string()),
            ("total_epochs", t.total_epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("patch_size", t.patch_size.to_string()),
            ("loss_eps", t.loss_eps.to_string()),
            ("val_fraction", t.val_fraction.to_string()),
            ("seed", t.seed.to_string()),
            ("count", s.count.to_string()),
            ("height", s.height.to_string()),
            ("width", s.width.to_string()),
            ("regions", s.regions.to_string()),
            ("focal_depth", s.lens.focal_depth.to_string()),
            ("blur_gain", s.lens.gain.to_string()),
            ("max_radius", s.lens.max_radius.to_string()),
            ("data", path(&self.data)),
            ("out", path(&self.out)),
            ("checkpoint", path(&self.checkpoint)),
            ("split_file", path(&self.split_file)),
        ];
        if net.skip_pre_eam {
            entries.push(("skip_pre_eam", "true".into()));
        }
        let mut out = String::new();
        for (k, v) in entries {
            if v.is_empty() {
                let _ = writeln!(out, "# {k} =");
            } else {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        let mut c = RunConfig::default();
        c.set("radius", "3").unwrap();
        c.set("use_dam", "false").unwrap();
        c.set("loss", "mse").unwrap();
        c.set("out", "/tmp/x").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, c.render()).unwrap();
        let mut back = RunConfig::default();
        back.apply_file(&p).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn schema_errors() {
        let mut c = RunConfig::default();
        assert!(c.set("radiuss", "3").unwrap_err().contains("unknown configuration key"));
        assert!(c.set("radius", "x").is_err());
        assert!(c.set("use_eam", "maybe").is_err());
        assert!(c.set("ablation", "9").is_err());
        c.set("patch_size", "60").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let mut c = RunConfig::default();
        for key in KEYS {
            let value = match *key {
                "loss" => "mse",
                "eam_context" => "corr_only",
                k if k.starts_with("use_") || k == "share_encoder" => "true",
                "data" | "out" | "checkpoint" | "split_file" => "/tmp/p",
                "initial_lr" | "loss_eps" | "val_fraction" | "focal_depth" | "blur_gain" | "max_radius" => "0.5",
                "taps" => "9",
                _ => "2",
            };
            c.set(key, value).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }
}
