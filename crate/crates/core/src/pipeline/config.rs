//! Run configuration and its INI form.
//!
//! Sections are `[data] [unet] [loda] [diffusion] [dp] [pipeline]`. Keys not
//! listed in [`RunConfig::entries`] are rejected. Values written by
//! [`RunConfig::to_ini`] parse back to an identical config.

use std::str::FromStr;

use ini::Ini;
use serde::{Deserialize, Serialize};

use crate::adapters::{LodaConfig, TargetFilter};
use crate::diffusion::{GuidanceConfig, NoiseSchedule};
use crate::dp::DpSgdConfig;
use crate::error::{Error, Result};
use crate::nn::{ClassifierConfig, UNetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    Loda,
    LoraReshaped,
    Full,
}

impl FinetuneMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FinetuneMode::Loda => "loda",
            FinetuneMode::LoraReshaped => "lora_reshaped",
            FinetuneMode::Full => "full",
        }
    }

    pub fn code(self) -> u64 {
        match self {
            FinetuneMode::Loda => 0,
            FinetuneMode::LoraReshaped => 1,
            FinetuneMode::Full => 2,
        }
    }
}

impl FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loda" => Ok(FinetuneMode::Loda),
            "lora_reshaped" => Ok(FinetuneMode::LoraReshaped),
            "full" => Ok(FinetuneMode::Full),
            other => Err(Error::Config(format!(
                "unknown fine-tuning mode `{other}` (loda|lora_reshaped|full)"
            ))),
        }
    }
}

impl std::fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub num_classes: usize,
    pub public_per_class: usize,
    pub private_per_class: usize,
    pub test_per_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetSection {
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    pub attention: bool,
    pub time_dim: usize,
    pub norm_groups: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LodaSection {
    pub rank: usize,
    pub slope: f64,
    pub scale: f64,
    pub targets: TargetFilter,
    pub lora_rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub guidance_w: f64,
    pub p_uncond: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpSection {
    pub mode: FinetuneMode,
    pub clip_norm: f64,
    pub sample_rate: f64,
    pub lr: f64,
    pub epochs: usize,
    pub target_epsilon: f64,
    pub delta: f64,
    /// Explicit noise multiplier; calibrated from the target when unset.
    pub noise_multiplier: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSection {
    pub seed: u64,
    pub pretrain1_epochs: usize,
    pub pretrain2_epochs: usize,
    pub step2_fraction: f64,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub synthetic_per_class: usize,
    pub sample_batch: usize,
    pub classifier_width: usize,
    pub classifier_epochs: usize,
    pub classifier_batch: usize,
    pub classifier_lr: f64,
    pub baseline_epochs: usize,
    pub baseline_lr: f64,
    pub compare_full: bool,
    pub grid_per_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSection,
    pub unet: UNetSection,
    pub loda: LodaSection,
    pub diffusion: DiffusionSection,
    pub dp: DpSection,
    pub pipeline: PipelineSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let u = UNetConfig::default();
        let l = LodaConfig::default();
        let g = GuidanceConfig::default();
        let d = DpSgdConfig::default();
        RunConfig {
            data: DataSection {
                num_classes: u.num_classes,
                public_per_class: 500,
                private_per_class: 250,
                test_per_class: 250,
            },
            unet: UNetSection {
                image_size: u.image_size,
                base_channels: u.base_channels,
                channel_mults: u.channel_mults,
                res_blocks: u.res_blocks,
                attention: u.attention,
                time_dim: u.time_dim,
                norm_groups: u.norm_groups,
            },
            loda: LodaSection {
                rank: l.rank,
                slope: l.slope,
                scale: l.scale,
                targets: l.target,
                lora_rank: 4,
            },
            diffusion: DiffusionSection {
                steps: 400,
                beta_start: 1e-4,
                beta_end: 0.02,
                guidance_w: g.w,
                p_uncond: g.p_uncond,
            },
            dp: DpSection {
                mode: FinetuneMode::Loda,
                clip_norm: d.clip_norm,
                sample_rate: d.sample_rate,
                lr: d.lr,
                epochs: 20,
                target_epsilon: 10.0,
                delta: d.delta,
                noise_multiplier: None,
            },
            pipeline: PipelineSection {
                seed: 42,
                pretrain1_epochs: 30,
                pretrain2_epochs: 30,
                step2_fraction: 0.5,
                pretrain_batch: 32,
                pretrain_lr: 1e-3,
                synthetic_per_class: 2500,
                sample_batch: 64,
                classifier_width: 8,
                classifier_epochs: 10,
                classifier_batch: 32,
                classifier_lr: 1e-3,
                baseline_epochs: 20,
                baseline_lr: 0.1,
                compare_full: true,
                grid_per_class: 8,
            },
        }
    }
}

/// A config value with a textual INI form.
trait IniValue: Sized {
    fn parse_ini(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! ini_from_str {
    ($($t:ty),*) => {$(
        impl IniValue for $t {
            fn parse_ini(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
ini_from_str!(usize, u64, f64, bool);

impl IniValue for Vec<usize> {
    fn parse_ini(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
            .collect()
    }

    fn render(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

impl IniValue for Option<f64> {
    fn parse_ini(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            Ok(None)
        } else {
            s.parse::<f64>().map(Some).map_err(|e| e.to_string())
        }
    }

    fn render(&self) -> String {
        match self {
            None => "auto".into(),
            Some(v) => v.to_string(),
        }
    }
}

impl IniValue for TargetFilter {
    fn parse_ini(s: &str) -> std::result::Result<Self, String> {
        if s == "all" {
            return Ok(TargetFilter::AllEligible);
        }
        let pats: Vec<String> = s
            .split(',')
            .map(|p| p.trim().to_string())
            .filter(|p| !p.is_empty())
            .collect();
        Ok(TargetFilter::Matching(pats))
    }

    fn render(&self) -> String {
        match self {
            TargetFilter::AllEligible => "all".into(),
            TargetFilter::Matching(p) => p.join(","),
        }
    }
}

impl IniValue for FinetuneMode {
    fn parse_ini(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: Error| e.to_string())
    }

    fn render(&self) -> String {
        self.as_str().into()
    }
}

/// One documented configuration key.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub section: &'static str,
    pub key: &'static str,
    pub value: String,
    pub doc: &'static str,
}

macro_rules! config_fields {
    ($($sec:ident . $key:ident : $doc:literal;)*) => {
        impl RunConfig {
            fn set_field(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
                match (section, key) {
                    $((stringify!($sec), stringify!($key)) => {
                        self.$sec.$key = IniValue::parse_ini(value).map_err(|e| {
                            Error::Config(format!("[{section}] {key} = {value}: {e}"))
                        })?;
                        Ok(())
                    })*
                    _ => Err(Error::Config(format!("unknown key `{key}` in section [{section}]"))),
                }
            }

            /// Every key with its current value and documentation, in file order.
            pub fn entries(&self) -> Vec<Entry> {
                vec![$(Entry {
                    section: stringify!($sec),
                    key: stringify!($key),
                    value: self.$sec.$key.render(),
                    doc: $doc,
                }),*]
            }
        }
    };
}

config_fields! {
    data.num_classes: "number of shape classes (1-4)";
    data.public_per_class: "public images per class for pre-training";
    data.private_per_class: "private training images per class";
    data.test_per_class: "private held-out images per class";
    unet.image_size: "image side length";
    unet.base_channels: "channels at full resolution";
    unet.channel_mults: "channel multiplier per resolution, comma separated";
    unet.res_blocks: "residual blocks per resolution";
    unet.attention: "self-attention at the lowest resolution";
    unet.time_dim: "sinusoidal time-embedding width";
    unet.norm_groups: "group-norm groups";
    loda.rank: "adapter dimension r";
    loda.slope: "leaky-ReLU negative slope between A and B";
    loda.scale: "multiplier on the adapter branch";
    loda.targets: "`all` or comma-separated layer-name patterns";
    loda.lora_rank: "rank of the reshaped-LoRA baseline";
    diffusion.steps: "diffusion steps";
    diffusion.beta_start: "first beta of the linear schedule";
    diffusion.beta_end: "last beta of the linear schedule";
    diffusion.guidance_w: "classifier-free guidance weight";
    diffusion.p_uncond: "conditioning dropout probability";
    dp.mode: "fine-tuning mode: loda, lora_reshaped, or full";
    dp.clip_norm: "per-example clipping norm C";
    dp.sample_rate: "Poisson sampling rate q";
    dp.lr: "SGD learning rate";
    dp.epochs: "fine-tuning epochs; steps = epochs / q";
    dp.target_epsilon: "privacy budget epsilon";
    dp.delta: "privacy parameter delta";
    dp.noise_multiplier: "noise multiplier, or `auto` to calibrate to the budget";
    pipeline.seed: "master seed";
    pipeline.pretrain1_epochs: "unconditional pre-training epochs";
    pipeline.pretrain2_epochs: "conditional pre-training epochs";
    pipeline.step2_fraction: "fraction of the public set used by conditional pre-training";
    pipeline.pretrain_batch: "pre-training batch size";
    pipeline.pretrain_lr: "pre-training Adam learning rate";
    pipeline.synthetic_per_class: "generated images per class";
    pipeline.sample_batch: "sampling chains per forward batch";
    pipeline.classifier_width: "downstream classifier base width";
    pipeline.classifier_epochs: "downstream classifier epochs";
    pipeline.classifier_batch: "downstream classifier batch size";
    pipeline.classifier_lr: "downstream classifier Adam learning rate";
    pipeline.baseline_epochs: "direct DP-SGD classifier epochs";
    pipeline.baseline_lr: "direct DP-SGD classifier learning rate";
    pipeline.compare_full: "also run full DP fine-tuning for comparison";
    pipeline.grid_per_class: "samples per class in exported image grids";
}

const SECTIONS: [&str; 6] = ["data", "unet", "loda", "diffusion", "dp", "pipeline"];

impl RunConfig {
    /// Parses INI text over the defaults. Unknown sections and keys are errors.
    pub fn from_ini(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(format!("INI syntax: {e}")))?;
        let mut cfg = RunConfig::default();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(Error::Config(format!("key `{k}` outside any section")));
                }
                continue;
            };
            if !SECTIONS.contains(&section) {
                return Err(Error::Config(format!("unknown section [{section}]")));
            }
            for (k, v) in props.iter() {
                cfg.set_field(section, k, v.trim())?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ini(&text)
    }

    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for e in self.entries() {
            if e.section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{}]\n", e.section));
                current = e.section;
            }
            out.push_str(&format!("# {}\n{} = {}\n", e.doc, e.key, e.value));
        }
        out
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{spec}` is not section.key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override `{spec}` is not section.key=value")))?;
        self.set_field(section, key, value.trim())?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.unet_config().validate()?;
        self.schedule()?;
        self.guidance().validate()?;
        if self.unet.image_size != crate::data::IMAGE_SIZE {
            return Err(Error::Config(format!(
                "unet.image_size must be {} to match the generated data, got {}",
                crate::data::IMAGE_SIZE,
                self.unet.image_size
            )));
        }
        let p = &self.pipeline;
        if self.data.public_per_class == 0 || self.data.private_per_class == 0 || self.data.test_per_class == 0 {
            return Err(Error::Config("every dataset needs at least one image per class".into()));
        }
        if !(p.step2_fraction > 0.0 && p.step2_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "step2_fraction {} outside (0, 1]",
                p.step2_fraction
            )));
        }
        if p.pretrain_batch == 0 || p.sample_batch == 0 || p.classifier_batch == 0 || p.synthetic_per_class == 0 {
            return Err(Error::Config(
                "batch sizes and synthetic_per_class must be positive".into(),
            ));
        }
        if !(self.dp.target_epsilon > 0.0) {
            return Err(Error::Config(format!(
                "target epsilon {} must be > 0",
                self.dp.target_epsilon
            )));
        }
        if self.dp.epochs == 0 || p.baseline_epochs == 0 {
            return Err(Error::Config("DP epochs must be positive".into()));
        }
        DpSgdConfig {
            noise_multiplier: self.dp.noise_multiplier.unwrap_or(1.0),
            ..self.dp_template(1)
        }
        .validate()
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            image_size: self.unet.image_size,
            in_channels: 1,
            base_channels: self.unet.base_channels,
            channel_mults: self.unet.channel_mults.clone(),
            res_blocks: self.unet.res_blocks,
            attention: self.unet.attention,
            num_classes: self.data.num_classes,
            time_dim: self.unet.time_dim,
            norm_groups: self.unet.norm_groups,
        }
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            image_size: self.unet.image_size,
            in_channels: 1,
            num_classes: self.data.num_classes,
            width: self.pipeline.classifier_width,
        }
    }

    pub fn loda_config(&self, init_seed: u64) -> LodaConfig {
        LodaConfig {
            rank: self.loda.rank,
            slope: self.loda.slope,
            scale: self.loda.scale,
            init_seed,
            target: self.loda.targets.clone(),
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion.steps, self.diffusion.beta_start, self.diffusion.beta_end)
    }

    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            w: self.diffusion.guidance_w,
            p_uncond: self.diffusion.p_uncond,
        }
    }

    /// `epochs / q`, rounded to the nearest step and at least one.
    pub fn dp_steps_for(&self, epochs: usize) -> u64 {
        ((epochs as f64 / self.dp.sample_rate).round() as u64).max(1)
    }

    /// DP-SGD settings for `steps` steps with the noise multiplier still at
    /// its default; see [`crate::pipeline::dp_config`].
    pub fn dp_template(&self, steps: u64) -> DpSgdConfig {
        DpSgdConfig {
            clip_norm: self.dp.clip_norm,
            noise_multiplier: 1.0,
            sample_rate: self.dp.sample_rate,
            steps,
            lr: self.dp.lr,
            delta: self.dp.delta,
            target_epsilon: Some(self.dp.target_epsilon),
        }
    }

    /// `section.key = default  # doc` lines, for help output.
    pub fn describe_defaults() -> String {
        RunConfig::default()
            .entries()
            .iter()
            .map(|e| format!("  {}.{} = {}  ({})", e.section, e.key, e.value, e.doc))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ini_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.dp.noise_multiplier = Some(1.234567891234);
        cfg.loda.targets = TargetFilter::Matching(vec!["attn".into(), "res.conv1".into()]);
        cfg.diffusion.beta_start = 1e-5;
        cfg.dp.mode = FinetuneMode::LoraReshaped;
        let text = cfg.to_ini();
        assert_eq!(RunConfig::from_ini(&text).unwrap(), cfg);
        assert_eq!(
            RunConfig::from_ini(&RunConfig::default().to_ini()).unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn rejects_unknown_keys_and_sections() {
        assert!(RunConfig::from_ini("[dp]\nclip = 1\n").is_err());
        assert!(RunConfig::from_ini("[extra]\nx = 1\n").is_err());
        assert!(RunConfig::from_ini("x = 1\n").is_err());
        assert!(RunConfig::from_ini("[dp]\nsample_rate = 2\n").is_err());
        let cfg = RunConfig::from_ini("# comment\n[dp]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.dp.epochs, 3);
    }

    #[test]
    fn overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("unet.channel_mults=1,2,2").unwrap();
        assert_eq!(cfg.unet.channel_mults, vec![1, 2, 2]);
        assert!(cfg.apply_override("unet.nope=1").is_err());
        assert!(cfg.apply_override("garbage").is_err());
        assert_eq!(cfg.dp_steps_for(20), 400);
    }
}
