//! Run configuration as `key = value` text.
//!
//! A `preset = toy|paper` line (default `toy`) selects the base values;
//! every other key overrides one field. Blank lines and `#` comments are
//! ignored and unknown keys are rejected. [`RunConfig::to_text`] writes every
//! key in a fixed order, which is the canonical form stored in checkpoints.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::analysis::AnalysisConfig;
use crate::data::SampleConfig;
use crate::error::{Error, Result};
use crate::synthesis::SynthesisConfig;
use crate::train::{Stage, TrainPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Paper,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Paper => "paper",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub analysis: AnalysisConfig,
    pub synthesis: SynthesisConfig,
    pub sample: SampleConfig,
    /// Optimizer settings shared by all stages; the stage itself is chosen per command.
    pub train: TrainPlan,
    /// Batch size of the classifier stage, which is cheap per sample.
    pub classifier_batch_size: usize,
    /// Held-out samples used by evaluation and the ablation harness.
    pub eval_samples: usize,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Toy => RunConfig {
                preset,
                analysis: AnalysisConfig::toy(),
                synthesis: SynthesisConfig::toy(),
                sample: SampleConfig::toy(),
                train: TrainPlan::toy(Stage::PretrainSynthesis),
                classifier_batch_size: 16,
                eval_samples: 64,
            },
            Preset::Paper => RunConfig {
                preset,
                analysis: AnalysisConfig::paper(),
                synthesis: SynthesisConfig::paper(),
                sample: SampleConfig::paper(),
                train: TrainPlan::paper(Stage::PretrainSynthesis),
                classifier_batch_size: 4,
                eval_samples: 64,
            },
        }
    }

    pub fn toy() -> Self {
        Self::preset(Preset::Toy)
    }

    pub fn paper() -> Self {
        Self::preset(Preset::Paper)
    }

    /// The kernel grid side shared by every module.
    pub fn m(&self) -> usize {
        self.analysis.m
    }

    pub fn plan(&self, stage: Stage) -> TrainPlan {
        let batch_size = match stage {
            Stage::Classifier => self.classifier_batch_size,
            _ => self.train.batch_size,
        };
        TrainPlan {
            stage,
            batch_size,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.analysis.validate()?;
        self.synthesis.validate()?;
        self.sample.trajectory.validate()?;
        self.train.validate()?;
        if self.classifier_batch_size == 0 {
            return Err(Error::Config("classifier batch size must be at least 1".into()));
        }
        let m = self.analysis.m;
        if self.synthesis.m != m || self.sample.trajectory.m != m {
            return Err(Error::Config("kernel size m differs between modules".into()));
        }
        let s = self.sample.crop;
        for (what, mult) in [
            ("analysis levels", self.analysis.size_multiple()),
            ("synthesis depth", self.synthesis.size_multiple()),
        ] {
            if !s.is_multiple_of(mult) {
                return Err(Error::Config(format!(
                    "crop {s} is not divisible by {mult} required by the {what}"
                )));
            }
        }
        self.analysis.check_input(s, s)?;
        let [a, b] = self.sample.class_bounds;
        if !(a < b && b <= m) {
            return Err(Error::Config(format!("class bounds {a}, {b} must satisfy a < b <= m")));
        }
        let (noise, mass) = (self.sample.noise_sigma, self.sample.support_mass);
        if noise.is_nan() || noise < 0.0 || mass.is_nan() || mass <= 0.0 || mass > 1.0 {
            return Err(Error::Config("noise_sigma must be >= 0 and support_mass in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut preset = Preset::Toy;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "preset" {
                preset = value.parse()?;
                continue;
            }
            if entries.insert(key.to_string(), (n + 1, value.to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
        }
        let mut cfg = Self::preset(preset);
        for (key, (line, value)) in entries {
            cfg.set(&key, &value)
                .map_err(|e| Error::Config(format!("line {line}: {key}: {}", strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip(e))))
    }

    /// Read a preset name or a config file path.
    pub fn resolve(spec: &str) -> Result<Self> {
        match spec.parse::<Preset>() {
            Ok(p) => Ok(Self::preset(p)),
            Err(_) => Self::load(Path::new(spec)),
        }
    }

    /// Set one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let a = &mut self.analysis;
        let s = &mut self.synthesis;
        let d = &mut self.sample;
        let t = &mut d.trajectory;
        let p = &mut self.train;
        match key {
            "m" => {
                let m = num(value)?;
                a.m = m;
                s.m = m;
                t.m = m;
            }
            "analysis.levels" => a.levels = num(value)?,
            "analysis.feat_channels" => a.feat_channels = num(value)?,
            "analysis.reduced_channels" => a.reduced_channels = num(value)?,
            "analysis.feat_kernel" => a.feat_kernel = num(value)?,
            "analysis.convs_per_level" => a.convs_per_level = num(value)?,
            "analysis.integrate_kernel" => a.integrate_kernel = num(value)?,
            "analysis.head_channels" => {
                a.head_channels = value.split(',').map(|v| num(v.trim())).collect::<Result<_>>()?
            }
            "analysis.head_kernel" => a.head_kernel = num(value)?,
            "analysis.pair_mode" => a.pair_mode = value.parse()?,
            "synthesis.depth" => s.depth = num(value)?,
            "synthesis.channels" => s.channels = num(value)?,
            "synthesis.guide_hidden" => s.guide_hidden = num(value)?,
            "synthesis.convs_per_block" => s.convs_per_block = num(value)?,
            "synthesis.guidance" => s.guidance = value.parse()?,
            "synthesis.residual" => s.residual = num(value)?,
            "trajectory.control_points" => t.num_control_points = num(value)?,
            "trajectory.max_speed" => t.max_speed = num(value)?,
            "trajectory.max_accel" => t.max_accel = num(value)?,
            "trajectory.samples_per_segment" => t.samples_per_segment = num(value)?,
            "trajectory.psf_sigma_min" => t.psf_sigma_range.0 = num(value)?,
            "trajectory.psf_sigma_max" => t.psf_sigma_range.1 = num(value)?,
            "trajectory.exposure_jitter" => t.exposure_jitter = num(value)?,
            "data.crop" => d.crop = num(value)?,
            "data.noise_sigma" => d.noise_sigma = num(value)?,
            "data.class_bound_small" => d.class_bounds[0] = num(value)?,
            "data.class_bound_medium" => d.class_bounds[1] = num(value)?,
            "data.support_mass" => d.support_mass = num(value)?,
            "data.balance_classes" => d.balance_classes = num(value)?,
            "train.lr" => p.lr = num(value)?,
            "train.lr_decay" => p.lr_decay = num(value)?,
            "train.plateau_epochs" => p.plateau_epochs = num(value)?,
            "train.stagnation" => p.stagnation = num(value)?,
            "train.epoch_iterations" => p.epoch_iterations = num(value)?,
            "train.batch_size" => p.batch_size = num(value)?,
            "train.iterations" => p.iterations = num(value)?,
            "train.seed" => p.seed = num(value)?,
            "train.checkpoint_every" => p.checkpoint_every = num(value)?,
            "train.classifier_batch_size" => self.classifier_batch_size = num(value)?,
            "eval.samples" => self.eval_samples = num(value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Canonical text: every key, fixed order.
    pub fn to_text(&self) -> String {
        let (a, s, d, p) = (&self.analysis, &self.synthesis, &self.sample, &self.train);
        let t = &d.trajectory;
        let head: Vec<String> = a.head_channels.iter().map(usize::to_string).collect();
        let lines: Vec<(&str, String)> = vec![
            ("preset", self.preset.as_str().into()),
            ("m", a.m.to_string()),
            ("analysis.levels", a.levels.to_string()),
            ("analysis.feat_channels", a.feat_channels.to_string()),
            ("analysis.reduced_channels", a.reduced_channels.to_string()),
            ("analysis.feat_kernel", a.feat_kernel.to_string()),
            ("analysis.convs_per_level", a.convs_per_level.to_string()),
            ("analysis.integrate_kernel", a.integrate_kernel.to_string()),
            ("analysis.head_channels", head.join(",")),
            ("analysis.head_kernel", a.head_kernel.to_string()),
            ("analysis.pair_mode", a.pair_mode.to_string()),
            ("synthesis.depth", s.depth.to_string()),
            ("synthesis.channels", s.channels.to_string()),
            ("synthesis.guide_hidden", s.guide_hidden.to_string()),
            ("synthesis.convs_per_block", s.convs_per_block.to_string()),
            ("synthesis.guidance", s.guidance.to_string()),
            ("synthesis.residual", s.residual.to_string()),
            ("trajectory.control_points", t.num_control_points.to_string()),
            ("trajectory.max_speed", fmt_f(t.max_speed)),
            ("trajectory.max_accel", fmt_f(t.max_accel)),
            ("trajectory.samples_per_segment", t.samples_per_segment.to_string()),
            ("trajectory.psf_sigma_min", fmt_f(t.psf_sigma_range.0)),
            ("trajectory.psf_sigma_max", fmt_f(t.psf_sigma_range.1)),
            ("trajectory.exposure_jitter", fmt_f(t.exposure_jitter)),
            ("data.crop", d.crop.to_string()),
            ("data.noise_sigma", fmt_f(d.noise_sigma)),
            ("data.class_bound_small", d.class_bounds[0].to_string()),
            ("data.class_bound_medium", d.class_bounds[1].to_string()),
            ("data.support_mass", fmt_f(d.support_mass)),
            ("data.balance_classes", d.balance_classes.to_string()),
            ("train.lr", fmt_f(p.lr)),
            ("train.lr_decay", fmt_f(p.lr_decay)),
            ("train.plateau_epochs", p.plateau_epochs.to_string()),
            ("train.stagnation", fmt_f(p.stagnation)),
            ("train.epoch_iterations", p.epoch_iterations.to_string()),
            ("train.batch_size", p.batch_size.to_string()),
            ("train.iterations", p.iterations.to_string()),
            ("train.seed", p.seed.to_string()),
            ("train.checkpoint_every", p.checkpoint_every.to_string()),
            ("train.classifier_batch_size", self.classifier_batch_size.to_string()),
            ("eval.samples", self.eval_samples.to_string()),
        ];
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy()
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}

fn num<T: FromStr>(value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {value:?}")))
}

/// Shortest text that parses back to the same `f64`.
fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}
