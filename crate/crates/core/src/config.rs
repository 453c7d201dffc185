//! Plain-text `key = value` run configuration.
//!
//! Keys are dotted (`model.fpn_channels`) or grouped under `[model]`-style
//! section headers. Blank lines and `#` comments are ignored and unknown keys
//! are rejected. [`RunConfig::to_text`] writes every key, so a resolved config
//! can be stored next to run outputs and read back unchanged.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegressorKind {
    /// One 1x1 group per ray; ray `k` sees only its own sampled feature.
    Grouped,
    /// Dense 1x1 over all sampled features.
    Standard,
}

impl FromStr for RegressorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grouped" => Ok(Self::Grouped),
            "standard" => Ok(Self::Standard),
            _ => Err(Error::ConfigInvalid(format!("regressor must be grouped|standard, got {s}"))),
        }
    }
}

impl RegressorKind {
    fn as_str(self) -> &'static str {
        match self {
            Self::Grouped => "grouped",
            Self::Standard => "standard",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub num_rays: usize,
    /// Output stride of each pyramid level, finest first.
    pub fpn_levels: Vec<usize>,
    pub fpn_channels: usize,
    pub head_convs: usize,
    /// Channel width of each backbone stage; stage `i` has stride `2^(i+1)`.
    pub backbone_widths: Vec<usize>,
    pub hbb_enabled: bool,
    pub hbb_widths: Vec<usize>,
    pub fine_enabled: bool,
    pub regressor: RegressorKind,
    pub detach_sampling_coords: bool,
    /// Initial radius (pixels) of the coarse head before training.
    pub init_radius: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 3,
            num_rays: 36,
            fpn_levels: vec![4, 8, 16],
            fpn_channels: 32,
            head_convs: 4,
            backbone_widths: vec![16, 32, 64, 64],
            hbb_enabled: true,
            hbb_widths: vec![128, 64, 64, 64],
            fine_enabled: true,
            regressor: RegressorKind::Grouped,
            detach_sampling_coords: false,
            init_radius: 8.0,
        }
    }
}

impl ModelConfig {
    /// Heads at full scale: 80 classes, 256 pyramid channels, P3-P7.
    pub fn full_scale() -> Self {
        Self {
            num_classes: 80,
            fpn_levels: vec![8, 16, 32, 64, 128],
            fpn_channels: 256,
            backbone_widths: vec![64, 256, 512, 1024, 2048],
            ..Self::default()
        }
    }

    /// Stride of backbone stage `i`.
    pub fn backbone_stride(i: usize) -> usize {
        1 << (i + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.num_rays < 3 {
            return bad(format!("num_rays must be >= 3, got {}", self.num_rays));
        }
        if self.num_classes == 0 || self.fpn_channels == 0 || self.in_channels == 0 {
            return bad("num_classes, fpn_channels and in_channels must be positive".into());
        }
        if self.fpn_levels.is_empty() {
            return bad("at least one pyramid level is required".into());
        }
        if self.fpn_levels.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("level strides must increase strictly: {:?}", self.fpn_levels));
        }
        if self.backbone_widths.is_empty() || self.backbone_widths.contains(&0) {
            return bad("backbone widths must be non-empty and positive".into());
        }
        let top = Self::backbone_stride(self.backbone_widths.len() - 1);
        let mut seen_extra = false;
        for (i, &s) in self.fpn_levels.iter().enumerate() {
            if !s.is_power_of_two() || s < 2 {
                return bad(format!("level stride {s} is not a power of two >= 2"));
            }
            if s > top {
                if i == 0 || s != 2 * self.fpn_levels[i - 1] {
                    return bad(format!("extra level stride {s} must double the previous level"));
                }
                seen_extra = true;
            } else if seen_extra {
                return bad("backbone levels must precede extra levels".into());
            } else if i > 0 && s != 2 * self.fpn_levels[i - 1] {
                return bad(format!("pyramid levels must be consecutive octaves: {:?}", self.fpn_levels));
            }
        }
        if self.fpn_levels[0] > top {
            return bad("the finest level must come from the backbone".into());
        }
        if self.hbb_enabled && (self.hbb_widths.is_empty() || self.hbb_widths.contains(&0)) {
            return bad("hbb widths must be non-empty and positive".into());
        }
        if !(self.init_radius > 0.0) {
            return bad("init_radius must be positive".into());
        }
        Ok(())
    }

    /// Largest stride the input size must be divisible by.
    pub fn max_backbone_stride(&self) -> usize {
        Self::backbone_stride(self.backbone_widths.len() - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    /// Five-pointed star; concave.
    Star,
}

impl FromStr for ShapeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipse" => Ok(Self::Ellipse),
            "rectangle" => Ok(Self::Rectangle),
            "star" => Ok(Self::Star),
            _ => Err(Error::ConfigInvalid(format!("unknown shape {s}"))),
        }
    }
}

impl std::fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ellipse => "ellipse",
            Self::Rectangle => "rectangle",
            Self::Star => "star",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub image_size: usize,
    /// Shape palette; class id is the index in this list.
    pub classes: Vec<ShapeKind>,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub noise_std: f64,
    /// Instances with fewer visible pixels after occlusion are dropped.
    pub min_visible: usize,
    pub num_train: usize,
    pub num_eval: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            classes: vec![ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Star],
            min_instances: 1,
            max_instances: 3,
            min_radius: 6.0,
            max_radius: 22.0,
            noise_std: 0.04,
            min_visible: 16,
            num_train: 500,
            num_eval: 100,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if self.image_size < 8 {
            return bad("image_size must be >= 8");
        }
        if self.classes.is_empty() {
            return bad("at least one shape class is required");
        }
        if self.min_instances > self.max_instances {
            return bad("min_instances exceeds max_instances");
        }
        if !(self.min_radius >= 1.0 && self.min_radius <= self.max_radius) {
            return bad("radius range must satisfy 1 <= min_radius <= max_radius");
        }
        if self.max_radius * 2.0 > self.image_size as f64 {
            return bad("max_radius does not fit the image");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be >= 0");
        }
        if self.min_visible == 0 {
            return bad("min_visible must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub loss: LossWeights,
    pub implicit_coarse: bool,
    /// Weight regression losses by the centerness target.
    pub centerness_weighting: bool,
    /// Positive region radius as a multiple of the level stride.
    pub center_radius: f64,
    /// `len(levels) + 1` increasing bounds on the max ground-truth radius per level.
    pub scale_bounds: Vec<f64>,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_steps: 200,
            grad_clip: 10.0,
            loss: LossWeights::default(),
            implicit_coarse: false,
            centerness_weighting: true,
            center_radius: 1.5,
            scale_bounds: vec![0.0, 12.0, 20.0, f64::INFINITY],
            log_every: 50,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, levels: usize) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        self.loss.validate()?;
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("lr must be > 0, momentum in [0,1), weight_decay >= 0".into());
        }
        if !(self.center_radius > 0.0) {
            return bad("center_radius must be positive".into());
        }
        if self.scale_bounds.len() != levels + 1 {
            return bad(format!(
                "scale_bounds needs {} entries for {levels} levels, got {}",
                levels + 1,
                self.scale_bounds.len()
            ));
        }
        if self.scale_bounds.windows(2).any(|w| !(w[1] > w[0])) {
            return bad(format!("scale_bounds must increase: {:?}", self.scale_bounds));
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub score_thresh: f64,
    /// Candidates kept per level before NMS.
    pub topk: usize,
    pub nms_iou: f64,
    pub max_dets: usize,
    /// Area bounds (pixels) separating small/medium and medium/large instances.
    pub area_small: f64,
    pub area_large: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.05,
            topk: 100,
            nms_iou: 0.5,
            max_dets: 20,
            area_small: 144.0,
            area_large: 576.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: SceneConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::ConfigInvalid(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::ConfigInvalid(format!("bad boolean {value:?} for {key}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::ConfigInvalid(format!("line {}: expected key = value", lineno + 1)));
            };
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            self.set(&key, v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, d, t, e) = (&mut self.model, &mut self.data, &mut self.train, &mut self.eval);
        match key {
            "seed" => self.seed = parse(key, v)?,
            "model.in_channels" => m.in_channels = parse(key, v)?,
            "model.num_classes" => m.num_classes = parse(key, v)?,
            "model.num_rays" => m.num_rays = parse(key, v)?,
            "model.fpn_levels" => m.fpn_levels = parse_list(key, v)?,
            "model.fpn_channels" => m.fpn_channels = parse(key, v)?,
            "model.head_convs" => m.head_convs = parse(key, v)?,
            "model.backbone_widths" => m.backbone_widths = parse_list(key, v)?,
            "model.hbb_enabled" => m.hbb_enabled = parse_bool(key, v)?,
            "model.hbb_widths" => m.hbb_widths = parse_list(key, v)?,
            "model.fine_enabled" => m.fine_enabled = parse_bool(key, v)?,
            "model.regressor" => m.regressor = v.parse()?,
            "model.detach_sampling_coords" => m.detach_sampling_coords = parse_bool(key, v)?,
            "model.init_radius" => m.init_radius = parse(key, v)?,
            "data.image_size" => d.image_size = parse(key, v)?,
            "data.classes" => d.classes = parse_list(key, v)?,
            "data.min_instances" => d.min_instances = parse(key, v)?,
            "data.max_instances" => d.max_instances = parse(key, v)?,
            "data.min_radius" => d.min_radius = parse(key, v)?,
            "data.max_radius" => d.max_radius = parse(key, v)?,
            "data.noise_std" => d.noise_std = parse(key, v)?,
            "data.min_visible" => d.min_visible = parse(key, v)?,
            "data.num_train" => d.num_train = parse(key, v)?,
            "data.num_eval" => d.num_eval = parse(key, v)?,
            "train.steps" => t.steps = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.momentum" => t.momentum = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.warmup_steps" => t.warmup_steps = parse(key, v)?,
            "train.grad_clip" => t.grad_clip = parse(key, v)?,
            "train.alpha" => t.loss.alpha = parse(key, v)?,
            "train.gamma" => t.loss.gamma = parse(key, v)?,
            "train.focal_balance" => t.loss.focal_balance = parse(key, v)?,
            "train.implicit_coarse" => t.implicit_coarse = parse_bool(key, v)?,
            "train.centerness_weighting" => t.centerness_weighting = parse_bool(key, v)?,
            "train.center_radius" => t.center_radius = parse(key, v)?,
            "train.scale_bounds" => t.scale_bounds = parse_list(key, v)?,
            "train.log_every" => t.log_every = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "eval.score_thresh" => e.score_thresh = parse(key, v)?,
            "eval.topk" => e.topk = parse(key, v)?,
            "eval.nms_iou" => e.nms_iou = parse(key, v)?,
            "eval.max_dets" => e.max_dets = parse(key, v)?,
            "eval.area_small" => e.area_small = parse(key, v)?,
            "eval.area_large" => e.area_large = parse(key, v)?,
            _ => return Err(Error::ConfigInvalid(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate(self.model.fpn_levels.len())?;
        if self.model.num_classes != self.data.classes.len() {
            return Err(Error::ConfigInvalid(format!(
                "model.num_classes = {} but data.classes lists {}",
                self.model.num_classes,
                self.data.classes.len()
            )));
        }
        if self.data.image_size % self.model.max_backbone_stride() != 0 {
            return Err(Error::ConfigInvalid(format!(
                "image_size {} not divisible by backbone stride {}",
                self.data.image_size,
                self.model.max_backbone_stride()
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let (m, d, t, e) = (&self.model, &self.data, &self.train, &self.eval);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("model.in_channels", m.in_channels.to_string());
        kv("model.num_classes", m.num_classes.to_string());
        kv("model.num_rays", m.num_rays.to_string());
        kv("model.fpn_levels", join(&m.fpn_levels));
        kv("model.fpn_channels", m.fpn_channels.to_string());
        kv("model.head_convs", m.head_convs.to_string());
        kv("model.backbone_widths", join(&m.backbone_widths));
        kv("model.hbb_enabled", m.hbb_enabled.to_string());
        kv("model.hbb_widths", join(&m.hbb_widths));
        kv("model.fine_enabled", m.fine_enabled.to_string());
        kv("model.regressor", m.regressor.as_str().to_string());
        kv("model.detach_sampling_coords", m.detach_sampling_coords.to_string());
        kv("model.init_radius", m.init_radius.to_string());
        kv("data.image_size", d.image_size.to_string());
        kv("data.classes", join(&d.classes));
        kv("data.min_instances", d.min_instances.to_string());
        kv("data.max_instances", d.max_instances.to_string());
        kv("data.min_radius", d.min_radius.to_string());
        kv("data.max_radius", d.max_radius.to_string());
        kv("data.noise_std", d.noise_std.to_string());
        kv("data.min_visible", d.min_visible.to_string());
        kv("data.num_train", d.num_train.to_string());
        kv("data.num_eval", d.num_eval.to_string());
        kv("train.steps", t.steps.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.lr", t.lr.to_string());
        kv("train.momentum", t.momentum.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.warmup_steps", t.warmup_steps.to_string());
        kv("train.grad_clip", t.grad_clip.to_string());
        kv("train.alpha", t.loss.alpha.to_string());
        kv("train.gamma", t.loss.gamma.to_string());
        kv("train.focal_balance", t.loss.focal_balance.to_string());
        kv("train.implicit_coarse", t.implicit_coarse.to_string());
        kv("train.centerness_weighting", t.centerness_weighting.to_string());
        kv("train.center_radius", t.center_radius.to_string());
        kv("train.scale_bounds", join(&t.scale_bounds));
        kv("train.log_every", t.log_every.to_string());
        kv("train.checkpoint_every", t.checkpoint_every.to_string());
        kv("eval.score_thresh", e.score_thresh.to_string());
        kv("eval.topk", e.topk.to_string());
        kv("eval.nms_iou", e.nms_iou.to_string());
        kv("eval.max_dets", e.max_dets.to_string());
        kv("eval.area_small", e.area_small.to_string());
        kv("eval.area_large", e.area_large.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        ModelConfig::full_scale().validate().unwrap();
    }

    #[test]
    fn sections_and_dotted_keys() {
        let cfg = RunConfig::from_text(
            "seed = 7\n# comment\n[model]\nfpn_channels = 16  # inline\nfpn_levels = 8, 16\n\n[train]\nalpha=0.7\nscale_bounds = 0, 10, inf\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.fpn_channels, 16);
        assert_eq!(cfg.model.fpn_levels, vec![8, 16]);
        assert_eq!(cfg.train.loss.alpha, 0.7);
        assert_eq!(cfg.train.scale_bounds[2], f64::INFINITY);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_and_malformed_rejected() {
        assert!(RunConfig::from_text("model.nope = 1").is_err());
        assert!(RunConfig::from_text("[model]\nfpn_channels").is_err());
        assert!(RunConfig::from_text("model.hbb_enabled = maybe").is_err());
        assert!(RunConfig::from_text("model.regressor = fancy").is_err());
    }

    #[test]
    fn resolved_text_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.seed = 99;
        cfg.model.regressor = RegressorKind::Standard;
        cfg.train.loss.alpha = 0.3;
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_models() {
        let mut m = ModelConfig::default();
        m.fpn_levels = vec![8, 4];
        assert!(m.validate().is_err());
        let mut m = ModelConfig::default();
        m.fpn_levels = vec![4, 8, 16, 64];
        assert!(m.validate().is_err());
        let mut m = ModelConfig::default();
        m.num_rays = 2;
        assert!(m.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.train.scale_bounds = vec![0.0, 1.0];
        assert!(cfg.validate().is_err());
        cfg = RunConfig::default();
        cfg.data.image_size = 60;
        assert!(cfg.validate().is_err());
    }
}
