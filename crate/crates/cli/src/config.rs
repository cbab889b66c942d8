//! Flat `key = value` run configuration.
//!
//! Every key has a default from the active preset (`desk` or `paper`);
//! files and `--set` overrides may only name known keys. The resolved
//! config lists every key, sorted, one per line.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use skelflow_core::c3d::{AttentionLevel, C3dConfig};
use skelflow_core::dataset::{BenchmarkConfig, Protocol, RenderConfig};
use skelflow_core::fusion::{FusionConfig, FusionPolicy};
use skelflow_core::optim::LrSchedule;
use skelflow_core::skeleton::{LayerSelection, LayerSpec, ResTcnConfig};
use skelflow_core::train::{InputConfig, TrainOptions};

const DESK: &[(&str, &str)] = &[
    ("preset", "desk"),
    ("data.dir", "data"),
    ("data.classes", "4"),
    ("data.samples_per_class", "40"),
    ("data.frames", "60"),
    ("data.noise", "0.3"),
    ("data.nuisance_motions", "0"),
    ("render.height", "36"),
    ("render.width", "36"),
    ("render.pixels_per_meter", "15"),
    ("render.disc_radius", "2"),
    ("render.actors", "4"),
    ("render.views", "3"),
    ("render.view_step_degrees", "10"),
    ("render.posture_jitter", "0.05"),
    ("render.flow_noise", "0.05"),
    ("render.skeleton_noise", "0.02"),
    ("render.clutter_per_sigma", "10"),
    ("render.clutter_speed", "0.06"),
    ("split.protocol", "cross_subject"),
    ("input.skeleton_frames", "60"),
    ("input.flow_downsample", "2"),
    ("input.clip_len", "8"),
    ("input.clip_overlap", "4"),
    ("input.crop_height", "32"),
    ("input.crop_width", "32"),
    ("skeleton.tcn_filters", "8,8,16,32"),
    ("skeleton.tcn_strides", "1,1,2,2"),
    ("skeleton.tcn_filter_size", "3"),
    ("skeleton.bjcn_downsample", "5"),
    ("skeleton.bjcn_multiplier", "2"),
    ("skeleton.bjcn_norm_over_rows", "true"),
    ("skeleton.center_trajectories", "true"),
    ("skeleton.fc_tcn_width", "16"),
    ("skeleton.fc_bjcn_width", "32"),
    ("skeleton.dropout", "0"),
    ("skeleton.epochs", "40"),
    ("skeleton.batch_size", "16"),
    ("skeleton.learning_rate", "0.01"),
    ("skeleton.lr_factor", "10"),
    ("skeleton.lr_patience", "5"),
    ("skeleton.momentum", "0.9"),
    ("skeleton.nesterov", "true"),
    ("skeleton.l1", "0.0001"),
    ("skeleton.bn_momentum", "0.9"),
    ("skeleton.checkpoint", ""),
    ("flow.conv_channels", "8,16,16,32"),
    ("flow.fc_widths", "64,64"),
    ("flow.attention", "none"),
    ("flow.radius", "auto"),
    ("flow.dropout", "0"),
    ("flow.epochs", "16"),
    ("flow.batch_size", "16"),
    ("flow.learning_rate", "0.02"),
    ("flow.lr_factor", "5"),
    ("flow.lr_every", "8"),
    ("flow.momentum", "0.9"),
    ("flow.nesterov", "true"),
    ("flow.l1", "0.0001"),
    ("flow.bn_momentum", "0.9"),
    ("flow.clips_per_sample", "1"),
    ("scores.layers", "sum"),
    ("scores.file", ""),
    ("fusion.policy", "joint"),
    ("fusion.allow_untrained_skeleton", "false"),
    ("masks.sample", "0"),
    ("eval.model", "flow"),
    ("eval.checkpoint", ""),
    ("eval.predictions", ""),
    ("report.wall_time", "false"),
];

/// Training values as published, over the desk model sizes.
const PAPER: &[(&str, &str)] = &[
    ("preset", "paper"),
    ("skeleton.epochs", "150"),
    ("skeleton.batch_size", "128"),
    ("skeleton.dropout", "0.5"),
    ("skeleton.bn_momentum", "0.99"),
    ("flow.epochs", "30"),
    ("flow.batch_size", "60"),
    ("flow.learning_rate", "0.003"),
    ("flow.lr_every", "4"),
    ("flow.dropout", "0.5"),
    ("flow.bn_momentum", "0.99"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn defaults(preset: &str) -> Result<BTreeMap<String, String>> {
    let mut m: BTreeMap<String, String> = DESK.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    match preset {
        "desk" => {}
        "paper" => m.extend(PAPER.iter().map(|(k, v)| (k.to_string(), v.to_string()))),
        _ => bail!("unknown preset `{preset}` (desk | paper)"),
    }
    Ok(m)
}

fn split_pair(line: &str) -> Result<(String, String)> {
    let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("expected `key = value`, got `{line}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: defaults("desk").expect("desk preset") }
    }
}

impl RunConfig {
    /// Config text plus `key=value` overrides applied in order. A `preset`
    /// key (in either) selects the defaults before anything else applies.
    pub fn from_parts(text: &str, overrides: &[String]) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            pairs.push(split_pair(line).with_context(|| format!("config line {}", n + 1))?);
        }
        for o in overrides {
            pairs.push(split_pair(o).context("--set")?);
        }
        let preset = pairs.iter().rev().find(|(k, _)| k == "preset").map_or("desk", |(_, v)| v.as_str());
        let mut values = defaults(preset)?;
        for (k, v) in pairs {
            match values.get_mut(&k) {
                Some(slot) => *slot = v,
                None => bail!("unknown config key `{k}`"),
            }
        }
        let cfg = Self { values };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_parts(text, &[])
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => *slot = value.to_string(),
            None => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    pub fn resolved(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.values.get(key).map(String::as_str).ok_or_else(|| anyhow!("unknown config key `{key}`"))
    }

    fn typed<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key)?;
        v.parse().map_err(|e| anyhow!("config key `{key}`: cannot parse `{v}`: {e}"))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.typed(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.typed(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.typed(key)
    }

    pub fn list(&self, key: &str) -> Result<Vec<usize>> {
        self.get(key)?
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| anyhow!("config key `{key}`: bad list item `{s}`")))
            .collect()
    }

    /// A path key that the current command needs; empty means unset.
    pub fn required_path(&self, key: &str) -> Result<PathBuf> {
        match self.get(key)? {
            "" => bail!("missing config key `{key}`: this command needs it set"),
            p => Ok(PathBuf::from(p)),
        }
    }

    pub fn optional_path(&self, key: &str) -> Result<Option<PathBuf>> {
        Ok(match self.get(key)? {
            "" => None,
            p => Some(PathBuf::from(p)),
        })
    }

    /// Builds every typed view once so bad values fail before any work.
    fn check(&self) -> Result<()> {
        self.benchmark()?;
        self.input()?;
        self.skeleton_model()?.validate()?;
        self.flow_model()?.validate()?;
        self.skeleton_train()?.validate()?;
        self.flow_train()?.validate()?;
        self.selection()?;
        self.policy()?;
        self.bool("report.wall_time")?;
        self.usize("masks.sample")?;
        match self.get("eval.model")? {
            "skeleton" | "flow" | "fused" => Ok(()),
            m => bail!("config key `eval.model`: `{m}` is not skeleton, flow or fused"),
        }
    }

    pub fn render(&self) -> Result<RenderConfig> {
        Ok(RenderConfig {
            height: self.usize("render.height")?,
            width: self.usize("render.width")?,
            pixels_per_meter: self.f64("render.pixels_per_meter")?,
            disc_radius: self.usize("render.disc_radius")?,
            actors: self.usize("render.actors")?,
            views: self.usize("render.views")?,
            view_step_degrees: self.f64("render.view_step_degrees")?,
            posture_jitter: self.f64("render.posture_jitter")?,
            flow_noise: self.f64("render.flow_noise")?,
            skeleton_noise: self.f64("render.skeleton_noise")?,
            clutter_per_sigma: self.f64("render.clutter_per_sigma")?,
            clutter_speed: self.f64("render.clutter_speed")?,
        })
    }

    pub fn benchmark(&self) -> Result<BenchmarkConfig> {
        Ok(BenchmarkConfig {
            classes: self.usize("data.classes")?,
            samples_per_class: self.usize("data.samples_per_class")?,
            frames: self.usize("data.frames")?,
            noise: self.f64("data.noise")?,
            nuisance_motions: self.usize("data.nuisance_motions")?,
            render: self.render()?,
        })
    }

    pub fn protocol(&self) -> Result<Protocol> {
        let r = self.render()?;
        Ok(Protocol::parse(self.get("split.protocol")?, r.actors, r.views)?)
    }

    pub fn input(&self) -> Result<InputConfig> {
        Ok(InputConfig {
            skeleton_frames: self.usize("input.skeleton_frames")?,
            flow_downsample: self.usize("input.flow_downsample")?,
            clip_len: self.usize("input.clip_len")?,
            clip_overlap: self.usize("input.clip_overlap")?,
            crop_height: self.usize("input.crop_height")?,
            crop_width: self.usize("input.crop_width")?,
        })
    }

    pub fn skeleton_model(&self) -> Result<ResTcnConfig> {
        let filters = self.list("skeleton.tcn_filters")?;
        let strides = self.list("skeleton.tcn_strides")?;
        if filters.len() != strides.len() {
            bail!("skeleton.tcn_filters and skeleton.tcn_strides differ in length");
        }
        let size = self.usize("skeleton.tcn_filter_size")?;
        Ok(ResTcnConfig {
            frames: self.usize("input.skeleton_frames")?,
            classes: self.usize("data.classes")?,
            tcn_layers: filters.iter().zip(&strides).map(|(&f, &s)| LayerSpec::new(f, size, s)).collect(),
            bjcn_downsample_factor: self.usize("skeleton.bjcn_downsample")?,
            bjcn_filter_multiplier: self.usize("skeleton.bjcn_multiplier")?,
            bjcn_norm_over_rows: self.bool("skeleton.bjcn_norm_over_rows")?,
            center_trajectories: self.bool("skeleton.center_trajectories")?,
            fc_tcn_width: self.usize("skeleton.fc_tcn_width")?,
            fc_bjcn_width: self.usize("skeleton.fc_bjcn_width")?,
            dropout: self.f64("skeleton.dropout")?,
            ..ResTcnConfig::desk(self.usize("data.classes")?)
        })
    }

    /// `flow.attention` is one level for every conv layer or a comma list
    /// with one level per layer.
    pub fn attention(&self) -> Result<Vec<AttentionLevel>> {
        let layers = self.list("flow.conv_channels")?.len();
        let levels = self
            .get("flow.attention")?
            .split(',')
            .map(|s| AttentionLevel::parse(s.trim()))
            .collect::<skelflow_core::Result<Vec<_>>>()?;
        match levels.len() {
            1 => Ok(vec![levels[0]; layers]),
            n if n == layers => Ok(levels),
            n => bail!("flow.attention lists {n} levels for {layers} conv layers"),
        }
    }

    pub fn flow_model(&self) -> Result<C3dConfig> {
        let channels = self.list("flow.conv_channels")?;
        let base = C3dConfig::desk(self.usize("data.classes")?);
        if channels.len() != base.pools.len() {
            bail!("flow.conv_channels needs {} layers to match the pooling layout", base.pools.len());
        }
        let radius = match self.get("flow.radius")? {
            "auto" => None,
            _ => Some(self.usize("flow.radius")?),
        };
        Ok(C3dConfig {
            frames: self.usize("input.clip_len")?,
            height: self.usize("input.crop_height")?,
            width: self.usize("input.crop_width")?,
            conv_channels: channels,
            fc_widths: self.list("flow.fc_widths")?,
            attention: self.attention()?,
            radius_override: radius,
            dropout: self.f64("flow.dropout")?,
            ..base
        })
    }

    fn train_options(&self, branch: &str, schedule: LrSchedule) -> Result<TrainOptions> {
        let k = |s: &str| format!("{branch}.{s}");
        Ok(TrainOptions {
            epochs: self.usize(&k("epochs"))?,
            batch_size: self.usize(&k("batch_size"))?,
            learning_rate: self.f64(&k("learning_rate"))?,
            schedule,
            momentum: self.f64(&k("momentum"))?,
            nesterov: self.bool(&k("nesterov"))?,
            l1: self.f64(&k("l1"))?,
            bn_momentum: self.f64(&k("bn_momentum"))?,
            clips_per_sample: 1,
            record_wall_time: self.bool("report.wall_time")?,
        })
    }

    pub fn skeleton_train(&self) -> Result<TrainOptions> {
        let schedule = LrSchedule::Plateau {
            factor: self.f64("skeleton.lr_factor")?,
            patience: self.usize("skeleton.lr_patience")?,
        };
        self.train_options("skeleton", schedule)
    }

    /// Flow and fused training share these.
    pub fn flow_train(&self) -> Result<TrainOptions> {
        let schedule =
            LrSchedule::StepDecay { factor: self.f64("flow.lr_factor")?, every: self.usize("flow.lr_every")? };
        Ok(TrainOptions { clips_per_sample: self.usize("flow.clips_per_sample")?, ..self.train_options("flow", schedule)? })
    }

    pub fn selection(&self) -> Result<LayerSelection> {
        Ok(LayerSelection::parse(self.get("scores.layers")?)?)
    }

    pub fn policy(&self) -> Result<FusionPolicy> {
        Ok(FusionPolicy::parse(self.get("fusion.policy")?)?)
    }

    pub fn fusion(&self) -> Result<FusionConfig> {
        Ok(FusionConfig {
            flow_width: self.flow_model()?.feature_width(),
            skeleton_width: self.skeleton_model()?.feature_width(),
            policy: self.policy()?,
            selection: self.selection()?,
            allow_untrained_skeleton: self.bool("fusion.allow_untrained_skeleton")?,
        })
    }
}
