//! The segmentation model: plain conv backbone, FPN, shared classification /
//! centerness and coarse-radius heads, the coarse-to-fine module and the
//! boundary branch on the finest level.
//!
//! Parameter shapes are a pure function of [`ModelConfig`] ([`param_specs`]),
//! so budgets can be counted without allocating weights. Head weights exist
//! once and are shared by all levels; only the scale scalars are per level.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{ModelConfig, RegressorKind};
use crate::diffcore::{conv_output_size, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::polar_codec::DEGENERATE_RADIUS;

/// Prior probability used to initialise the classification biases.
const PRIOR_PROB: f64 = 0.01;
const PREDICTOR_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    Normal(f64),
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Module group: the name up to the first dot.
    pub fn module(&self) -> &str {
        module_of(&self.name)
    }
}

pub fn module_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Level name from its stride, e.g. 8 -> `P3`.
pub fn level_name(stride: usize) -> String {
    format!("P{}", stride.trailing_zeros())
}

#[derive(Clone, Copy, Debug)]
struct ConvDef {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
}

impl ConvDef {
    fn new(cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self { cin, cout, k, stride }
    }

    fn padding(&self) -> usize {
        self.k / 2
    }

    fn macs(&self, h: usize, w: usize) -> (u64, usize, usize) {
        let ho = conv_output_size(h, self.k, self.stride, self.padding());
        let wo = conv_output_size(w, self.k, self.stride, self.padding());
        let m = (ho * wo * self.cout * self.cin * self.k * self.k) as u64;
        (m, ho, wo)
    }
}

/// Every convolution of the model in declaration order, with its name prefix.
struct Layout {
    backbone: Vec<Vec<(String, ConvDef)>>,
    /// `(level index, stage index)` for levels fed by the backbone.
    lateral_levels: Vec<(usize, usize)>,
    laterals: Vec<(String, ConvDef)>,
    outputs: Vec<(String, ConvDef)>,
    extras: Vec<(String, ConvDef)>,
    cls_trunk: Vec<(String, ConvDef)>,
    cls_logits: (String, ConvDef),
    centerness: (String, ConvDef),
    reg_trunk: Vec<(String, ConvDef)>,
    radii: (String, ConvDef),
    hbb: Vec<(String, ConvDef)>,
}

fn stage_of_stride(stride: usize) -> usize {
    stride.trailing_zeros() as usize - 1
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let c = cfg.fpn_channels;
        let mut backbone = Vec::new();
        let mut cin = cfg.in_channels;
        for (i, &w) in cfg.backbone_widths.iter().enumerate() {
            let mut stage = vec![(format!("backbone.stage{i}.conv0"), ConvDef::new(cin, w, 3, 2))];
            if i > 0 {
                stage.push((format!("backbone.stage{i}.conv1"), ConvDef::new(w, w, 3, 1)));
            }
            backbone.push(stage);
            cin = w;
        }
        let top = cfg.max_backbone_stride();
        let mut lateral_levels = Vec::new();
        let (mut laterals, mut outputs, mut extras) = (Vec::new(), Vec::new(), Vec::new());
        for (li, &s) in cfg.fpn_levels.iter().enumerate() {
            let name = level_name(s);
            if s <= top {
                let stage = stage_of_stride(s);
                lateral_levels.push((li, stage));
                laterals.push((format!("fpn.lateral_{name}"), ConvDef::new(cfg.backbone_widths[stage], c, 1, 1)));
                outputs.push((format!("fpn.output_{name}"), ConvDef::new(c, c, 3, 1)));
            } else {
                extras.push((format!("fpn.extra_{name}"), ConvDef::new(c, c, 1, 2)));
            }
        }
        let trunk = |head: &str| -> Vec<(String, ConvDef)> {
            (0..cfg.head_convs)
                .map(|i| (format!("{head}.trunk{i}"), ConvDef::new(c, c, 3, 1)))
                .collect()
        };
        let mut hbb = Vec::new();
        let mut hin = c;
        for (i, &w) in cfg.hbb_widths.iter().enumerate() {
            hbb.push((format!("hbb.conv{i}"), ConvDef::new(hin, w, 3, 1)));
            hin = w;
        }
        hbb.push(("hbb.logits".to_string(), ConvDef::new(hin, 1, 1, 1)));
        Self {
            backbone,
            lateral_levels,
            laterals,
            outputs,
            extras,
            cls_trunk: trunk("cls_head"),
            cls_logits: ("cls_head.logits".into(), ConvDef::new(c, cfg.num_classes, 1, 1)),
            centerness: ("cls_head.centerness".into(), ConvDef::new(c, 1, 1, 1)),
            reg_trunk: trunk("reg_head"),
            radii: ("reg_head.radii".into(), ConvDef::new(c, cfg.num_rays, 1, 1)),
            hbb,
        }
    }
}

fn conv_specs(out: &mut Vec<ParamSpec>, name: &str, d: &ConvDef, weight: Init, bias: f64) {
    out.push(ParamSpec {
        name: format!("{name}.weight"),
        shape: vec![d.cout, d.cin, d.k, d.k],
        init: weight,
    });
    out.push(ParamSpec {
        name: format!("{name}.bias"),
        shape: vec![d.cout],
        init: Init::Const(bias),
    });
}

fn he(d: &ConvDef) -> Init {
    Init::He { fan_in: d.cin * d.k * d.k }
}

/// Parameter manifest of a model. The boundary branch comes last so that
/// enabling it does not perturb the initialisation of anything else.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let l = Layout::new(cfg);
    let prior_bias = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
    let mut s = Vec::new();
    for (name, d) in l.backbone.iter().flatten().chain(&l.laterals).chain(&l.outputs).chain(&l.extras) {
        conv_specs(&mut s, name, d, he(d), 0.0);
    }
    for (name, d) in &l.cls_trunk {
        conv_specs(&mut s, name, d, he(d), 0.0);
    }
    conv_specs(&mut s, &l.cls_logits.0, &l.cls_logits.1, Init::Normal(PREDICTOR_STD), prior_bias);
    conv_specs(&mut s, &l.centerness.0, &l.centerness.1, Init::Normal(PREDICTOR_STD), 0.0);
    for (name, d) in &l.reg_trunk {
        conv_specs(&mut s, name, d, he(d), 0.0);
    }
    conv_specs(&mut s, &l.radii.0, &l.radii.1, Init::Normal(PREDICTOR_STD), cfg.init_radius.ln());
    for &st in &cfg.fpn_levels {
        s.push(ParamSpec {
            name: format!("scales.coarse_{}", level_name(st)),
            shape: vec![1],
            init: Init::Const(1.0),
        });
    }
    if cfg.fine_enabled {
        for &st in &cfg.fpn_levels {
            s.push(ParamSpec {
                name: format!("scales.fine_{}", level_name(st)),
                shape: vec![1],
                init: Init::Const(1.0),
            });
        }
        let n = cfg.num_rays;
        let wshape = match cfg.regressor {
            RegressorKind::Grouped => vec![n, cfg.fpn_channels],
            RegressorKind::Standard => vec![n, n * cfg.fpn_channels],
        };
        s.push(ParamSpec {
            name: "fine.regressor.weight".into(),
            shape: wshape,
            init: Init::Const(0.0),
        });
        s.push(ParamSpec {
            name: "fine.regressor.bias".into(),
            shape: vec![n],
            init: Init::Const(0.0),
        });
    }
    if cfg.hbb_enabled {
        let (last, body) = l.hbb.split_last().expect("hbb has a projection");
        for (name, d) in body {
            conv_specs(&mut s, name, d, he(d), 0.0);
        }
        conv_specs(&mut s, &last.0, &last.1, Init::Normal(PREDICTOR_STD), prior_bias);
    }
    Ok(s)
}

/// Fresh parameters for `cfg`, deterministic in `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in param_specs(cfg)? {
        let n = spec.len();
        let values = match spec.init {
            Init::Const(c) => vec![c; n],
            Init::He { fan_in } => sample_normal(&mut rng, (2.0 / fan_in as f64).sqrt(), n),
            Init::Normal(std) => sample_normal(&mut rng, std, n),
        };
        store.add(spec.name, Tensor::new(spec.shape, values)?, true)?;
    }
    Ok(store)
}

fn sample_normal(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Multiply-accumulate counts per module for an `height x width` input.
/// Convolutions count `Ho*Wo*Co*Ci*k*k`; the fine module counts four taps
/// per sampled channel plus the regressor, at every location of every level.
/// `inference` leaves out the boundary branch.
pub fn count_macs(cfg: &ModelConfig, height: usize, width: usize, inference: bool) -> Result<Vec<(String, u64)>> {
    cfg.validate()?;
    let l = Layout::new(cfg);
    let mut totals: Vec<(String, u64)> = Vec::new();
    let mut add = |module: &str, m: u64| match totals.iter_mut().find(|(k, _)| k == module) {
        Some(e) => e.1 += m,
        None => totals.push((module.to_string(), m)),
    };
    let (mut h, mut w) = (height, width);
    let mut stage_sizes = Vec::new();
    for stage in &l.backbone {
        for (_, d) in stage {
            let (m, ho, wo) = d.macs(h, w);
            add("backbone", m);
            (h, w) = (ho, wo);
        }
        stage_sizes.push((h, w));
    }
    let mut level_sizes = Vec::new();
    for (i, &(_, stage)) in l.lateral_levels.iter().enumerate() {
        let (h, w) = stage_sizes[stage];
        add("fpn", l.laterals[i].1.macs(h, w).0);
        add("fpn", l.outputs[i].1.macs(h, w).0);
        level_sizes.push((h, w));
    }
    for (_, d) in &l.extras {
        let &(h, w) = level_sizes.last().expect("a backbone level precedes extras");
        let (m, ho, wo) = d.macs(h, w);
        add("fpn", m);
        level_sizes.push((ho, wo));
    }
    let c = cfg.fpn_channels as u64;
    let n = cfg.num_rays as u64;
    for &(h, w) in &level_sizes {
        for (_, d) in l.cls_trunk.iter().chain([&l.cls_logits, &l.centerness]) {
            add("cls_head", d.macs(h, w).0);
        }
        for (_, d) in l.reg_trunk.iter().chain([&l.radii]) {
            add("reg_head", d.macs(h, w).0);
        }
        if cfg.fine_enabled {
            let cells = (h * w) as u64;
            let reg = match cfg.regressor {
                RegressorKind::Grouped => n * c,
                RegressorKind::Standard => n * n * c,
            };
            add("fine", cells * (4 * n * c + reg));
        }
    }
    if cfg.hbb_enabled && !inference {
        let (mut h, mut w) = level_sizes[0];
        for (_, d) in &l.hbb {
            let (m, ho, wo) = d.macs(h, w);
            add("hbb", m);
            (h, w) = (ho, wo);
        }
    }
    Ok(totals)
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    def: ConvDef,
}

impl Conv {
    fn bind(store: &ParamStore, name: &str, def: ConvDef) -> Result<Self> {
        let weight = lookup(store, &format!("{name}.weight"), &[def.cout, def.cin, def.k, def.k])?;
        let bias = lookup(store, &format!("{name}.bias"), &[def.cout])?;
        Ok(Self { weight, bias, def })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.def.stride, self.def.padding())
    }

    fn forward_relu(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.forward(g, store, x)?;
        Ok(g.relu(y))
    }
}

fn lookup(store: &ParamStore, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter {name}")))?;
    let got = store.get(id).tensor.shape();
    if got != shape {
        return Err(Error::CheckpointMismatch(format!("{name}: expected {shape:?}, found {got:?}")));
    }
    Ok(id)
}

#[derive(Clone, Copy, Debug)]
struct FineRegressor {
    weight: ParamId,
    bias: ParamId,
}

/// Graph nodes of one pyramid level after the shared heads.
#[derive(Clone, Copy, Debug)]
pub struct LevelVars {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub features: Var,
    /// `[num_classes, H, W]`
    pub cls: Var,
    /// `[1, H, W]`
    pub centerness: Var,
    /// `[num_rays, H, W]`, image pixels.
    pub coarse: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub levels: Vec<LevelVars>,
    /// `[1, H3, W3]` boundary logits on the finest level.
    pub hbb: Option<Var>,
}

/// Dense per-level predictions of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutputs {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub cls_logits: Tensor,
    pub centerness_logits: Tensor,
    pub coarse_radii: Tensor,
    /// `[num_rays, H, W]`; absent when the fine module is disabled.
    pub fine_radii: Option<Tensor>,
}

impl LevelOutputs {
    /// Final radii at a cell: fine when available, else coarse.
    pub fn radii_at(&self, row: usize, col: usize) -> Vec<f64> {
        let t = self.fine_radii.as_ref().unwrap_or(&self.coarse_radii);
        let n = t.shape()[0];
        let plane = self.height * self.width;
        (0..n).map(|k| t.values()[k * plane + row * self.width + col]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    pub levels: Vec<LevelOutputs>,
    pub hbb_logits: Option<Tensor>,
}

/// Image-pixel position of the center of cell `(row, col)` on a stride-`s` level.
pub fn cell_center(row: usize, col: usize, stride: usize) -> (f64, f64) {
    ((col as f64 + 0.5) * stride as f64, (row as f64 + 0.5) * stride as f64)
}

/// Parameter handles of a model bound to a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    backbone: Vec<Vec<Conv>>,
    lateral_levels: Vec<(usize, usize)>,
    laterals: Vec<Conv>,
    outputs: Vec<Conv>,
    extras: Vec<Conv>,
    cls_trunk: Vec<Conv>,
    cls_logits: Conv,
    centerness: Conv,
    reg_trunk: Vec<Conv>,
    radii: Conv,
    coarse_scales: Vec<ParamId>,
    fine_scales: Vec<ParamId>,
    fine: Option<FineRegressor>,
    hbb: Option<Vec<Conv>>,
}

impl Network {
    /// Freshly initialised model and its parameters.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let store = init_params(cfg, seed)?;
        let net = Self::bind(cfg, &store)?;
        Ok((net, store))
    }

    /// Resolves every parameter of `cfg` in `store` by name and shape. Extra
    /// parameters in `store` are ignored.
    pub fn bind(cfg: &ModelConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let l = Layout::new(cfg);
        let bind_all = |v: &[(String, ConvDef)]| -> Result<Vec<Conv>> {
            v.iter().map(|(n, d)| Conv::bind(store, n, *d)).collect()
        };
        let backbone = l.backbone.iter().map(|s| bind_all(s)).collect::<Result<_>>()?;
        let scale_ids = |kind: &str| -> Result<Vec<ParamId>> {
            cfg.fpn_levels
                .iter()
                .map(|&s| lookup(store, &format!("scales.{kind}_{}", level_name(s)), &[1]))
                .collect()
        };
        let (fine, fine_scales) = if cfg.fine_enabled {
            let n = cfg.num_rays;
            let wshape = match cfg.regressor {
                RegressorKind::Grouped => vec![n, cfg.fpn_channels],
                RegressorKind::Standard => vec![n, n * cfg.fpn_channels],
            };
            let reg = FineRegressor {
                weight: lookup(store, "fine.regressor.weight", &wshape)?,
                bias: lookup(store, "fine.regressor.bias", &[n])?,
            };
            (Some(reg), scale_ids("fine")?)
        } else {
            (None, Vec::new())
        };
        let hbb = if cfg.hbb_enabled { Some(bind_all(&l.hbb)?) } else { None };
        Ok(Self {
            config: cfg.clone(),
            backbone,
            lateral_levels: l.lateral_levels.clone(),
            laterals: bind_all(&l.laterals)?,
            outputs: bind_all(&l.outputs)?,
            extras: bind_all(&l.extras)?,
            cls_trunk: bind_all(&l.cls_trunk)?,
            cls_logits: Conv::bind(store, &l.cls_logits.0, l.cls_logits.1)?,
            centerness: Conv::bind(store, &l.centerness.0, l.centerness.1)?,
            reg_trunk: bind_all(&l.reg_trunk)?,
            radii: Conv::bind(store, &l.radii.0, l.radii.1)?,
            coarse_scales: scale_ids("coarse")?,
            fine_scales,
            fine,
            hbb,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_image(&self, g: &Graph, image: Var) -> Result<(usize, usize)> {
        let s = g.shape(image);
        let &[c, h, w] = s else {
            return Err(Error::shape("network", format!("image must be [C,H,W], got {s:?}")));
        };
        let top = self.config.max_backbone_stride();
        if c != self.config.in_channels || h % top != 0 || w % top != 0 {
            return Err(Error::shape(
                "network",
                format!("image {s:?} needs {} channels and sides divisible by {top}", self.config.in_channels),
            ));
        }
        Ok((h, w))
    }

    /// Pyramid maps, finest level first, each `[fpn_channels, H_l, W_l]`.
    pub fn pyramid(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Vec<Var>> {
        self.check_image(g, image)?;
        let mut stages = Vec::with_capacity(self.backbone.len());
        let mut x = image;
        for stage in &self.backbone {
            for conv in stage {
                x = conv.forward_relu(g, store, x)?;
            }
            stages.push(x);
        }
        let nl = self.lateral_levels.len();
        let mut merged: Vec<Option<Var>> = vec![None; nl];
        for i in (0..nl).rev() {
            let (_, stage) = self.lateral_levels[i];
            let mut inner = self.laterals[i].forward(g, store, stages[stage])?;
            if let Some(coarser) = merged.get(i + 1).copied().flatten() {
                let s = g.shape(inner).to_vec();
                let up = g.upsample_nearest(coarser, s[1], s[2])?;
                inner = g.add(inner, up)?;
            }
            merged[i] = Some(inner);
        }
        let mut levels = Vec::with_capacity(self.config.fpn_levels.len());
        for (i, m) in merged.into_iter().enumerate() {
            levels.push(self.outputs[i].forward(g, store, m.expect("merged level"))?);
        }
        for conv in &self.extras {
            let prev = *levels.last().expect("a backbone level precedes extras");
            levels.push(conv.forward(g, store, prev)?);
        }
        Ok(levels)
    }

    /// Shared heads on every level, plus the boundary branch when requested
    /// and present.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var, with_hbb: bool) -> Result<ForwardVars> {
        let pyramid = self.pyramid(g, store, image)?;
        let mut levels = Vec::with_capacity(pyramid.len());
        for (li, &p) in pyramid.iter().enumerate() {
            let shape = g.shape(p).to_vec();
            let mut t = p;
            for conv in &self.cls_trunk {
                t = conv.forward_relu(g, store, t)?;
            }
            let cls = self.cls_logits.forward(g, store, t)?;
            let centerness = self.centerness.forward(g, store, t)?;
            let mut r = p;
            for conv in &self.reg_trunk {
                r = conv.forward_relu(g, store, r)?;
            }
            let z = self.radii.forward(g, store, r)?;
            let s = g.param(store, self.coarse_scales[li]);
            let z = g.scalar_scale(z, s)?;
            let coarse = g.exp(z);
            levels.push(LevelVars {
                stride: self.config.fpn_levels[li],
                height: shape[1],
                width: shape[2],
                features: p,
                cls,
                centerness,
                coarse,
            });
        }
        let hbb = match (&self.hbb, with_hbb) {
            (Some(convs), true) => {
                let (last, body) = convs.split_last().expect("hbb projection");
                let mut x = pyramid[0];
                for conv in body {
                    x = conv.forward_relu(g, store, x)?;
                }
                Some(last.forward(g, store, x)?)
            }
            _ => None,
        };
        Ok(ForwardVars { levels, hbb })
    }

    /// Coarse radii of `level` at flat cell indices, `[L, num_rays]`.
    pub fn coarse_at(&self, g: &mut Graph, level: &LevelVars, cells: &[usize]) -> Result<Var> {
        g.gather_cells(level.coarse, cells)
    }

    /// Refined radii `[L, num_rays]` at flat cell indices of level `li`, or
    /// `None` when the fine module is disabled. The correction is expressed
    /// in units of the level stride.
    pub fn fine_at(&self, g: &mut Graph, store: &ParamStore, fwd: &ForwardVars, li: usize, cells: &[usize]) -> Result<Option<Var>> {
        let Some(reg) = self.fine else {
            return Ok(None);
        };
        let level = &fwd.levels[li];
        let n = self.config.num_rays;
        let c = self.config.fpn_channels;
        let coarse = g.gather_cells(level.coarse, cells)?;
        let coords_src = if self.config.detach_sampling_coords {
            g.detach(coarse)
        } else {
            coarse
        };
        let centers: Vec<(f64, f64)> = cells
            .iter()
            .map(|&i| ((i % level.width) as f64, (i / level.width) as f64))
            .collect();
        let pts = g.transform_coordinates(coords_src, &centers, level.stride as f64)?;
        let sampled = g.bilinear_sample(level.features, pts)?;
        let flat = g.reshape(sampled, &[cells.len(), n * c])?;
        let w = g.param(store, reg.weight);
        let b = g.param(store, reg.bias);
        let correction = match self.config.regressor {
            RegressorKind::Grouped => g.grouped_conv1x1(flat, n, w, b)?,
            RegressorKind::Standard => g.linear(flat, w, b)?,
        };
        let s = g.param(store, self.fine_scales[li]);
        let correction = g.scalar_scale(correction, s)?;
        let correction = g.scale(correction, level.stride as f64);
        let sum = g.add(coarse, correction)?;
        Ok(Some(g.clamp_min(sum, DEGENERATE_RADIUS)))
    }

    /// Dense inference on one `[C,H,W]` image. Fine radii are computed at
    /// every cell; the boundary branch only runs when `with_hbb` is set.
    pub fn infer(&self, store: &ParamStore, image: &Tensor, with_hbb: bool) -> Result<HeadOutputs> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let fwd = self.forward(&mut g, store, x, with_hbb)?;
        let n = self.config.num_rays;
        let mut levels = Vec::with_capacity(fwd.levels.len());
        for (li, lv) in fwd.levels.iter().enumerate() {
            let plane = lv.height * lv.width;
            let cells: Vec<usize> = (0..plane).collect();
            let fine_radii = match self.fine_at(&mut g, store, &fwd, li, &cells)? {
                Some(v) => {
                    let rows = g.value(v);
                    let mut t = vec![0.0; n * plane];
                    for (cell, row) in rows.chunks(n).enumerate() {
                        for (k, &r) in row.iter().enumerate() {
                            t[k * plane + cell] = r;
                        }
                    }
                    Some(Tensor::new(vec![n, lv.height, lv.width], t)?)
                }
                None => None,
            };
            levels.push(LevelOutputs {
                stride: lv.stride,
                height: lv.height,
                width: lv.width,
                cls_logits: g.tensor(lv.cls),
                centerness_logits: g.tensor(lv.centerness),
                coarse_radii: g.tensor(lv.coarse),
                fine_radii,
            });
        }
        Ok(HeadOutputs {
            levels,
            hbb_logits: fwd.hbb.map(|v| g.tensor(v)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        ModelConfig {
            num_classes: 2,
            num_rays: 8,
            fpn_levels: vec![4, 8, 16],
            fpn_channels: 4,
            head_convs: 1,
            backbone_widths: vec![4, 4, 6],
            hbb_widths: vec![4, 3],
            ..ModelConfig::default()
        }
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        Tensor::from_fn(&[3, h, w], |i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0 - 0.5)
    }

    #[test]
    fn level_names() {
        assert_eq!(level_name(8), "P3");
        assert_eq!(level_name(128), "P7");
    }

    #[test]
    fn pyramid_sizes_follow_strides() {
        let cfg = ModelConfig {
            fpn_levels: vec![8, 16, 32],
            backbone_widths: vec![4, 4, 4, 4, 4],
            fpn_channels: 4,
            head_convs: 1,
            ..ModelConfig::default()
        };
        let (net, store) = Network::build(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(image(64, 64, 1));
        let p = net.pyramid(&mut g, &store, x).unwrap();
        let sizes: Vec<Vec<usize>> = p.iter().map(|&v| g.shape(v).to_vec()).collect();
        assert_eq!(sizes, vec![vec![4, 8, 8], vec![4, 4, 4], vec![4, 2, 2]]);
    }

    #[test]
    fn extra_levels_halve() {
        let cfg = ModelConfig {
            fpn_levels: vec![4, 8, 16, 32],
            backbone_widths: vec![4, 4, 4],
            fpn_channels: 4,
            head_convs: 1,
            ..ModelConfig::default()
        };
        let (net, store) = Network::build(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(image(32, 32, 2));
        let p = net.pyramid(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(p[3]), &[4, 1, 1]);
        assert!(store.id("fpn.extra_P5.weight").is_some());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_pyramid() {
        let cfg = toy();
        let (net, store) = Network::build(&cfg, 3).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 32, 32]));
        for p in net.pyramid(&mut g, &store, x).unwrap() {
            assert!(g.value(p).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rejects_bad_image() {
        let (net, store) = Network::build(&toy(), 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 30, 32]));
        assert!(net.pyramid(&mut g, &store, x).is_err());
    }

    #[test]
    fn shared_heads_one_scale_per_level() {
        let cfg = toy();
        let store = init_params(&cfg, 0).unwrap();
        let names: Vec<&str> = store.iter().map(|(_, p)| p.name.as_str()).collect();
        assert_eq!(names.iter().filter(|n| n.starts_with("reg_head.radii.weight")).count(), 1);
        assert_eq!(names.iter().filter(|n| n.starts_with("scales.coarse_")).count(), 3);
        assert_eq!(names.iter().filter(|n| n.starts_with("scales.fine_")).count(), 3);
    }

    #[test]
    fn zero_regressor_fine_equals_coarse() {
        let cfg = toy();
        let (net, store) = Network::build(&cfg, 5).unwrap();
        let out = net.infer(&store, &image(32, 32, 7), false).unwrap();
        for lv in &out.levels {
            assert_eq!(lv.fine_radii.as_ref().unwrap(), &lv.coarse_radii);
            assert!(lv.coarse_radii.values().iter().all(|&r| r > 0.0));
            assert_eq!(lv.cls_logits.shape(), &[2, lv.height, lv.width]);
        }
    }

    #[test]
    fn hbb_output_matches_finest_level() {
        let (net, store) = Network::build(&toy(), 1).unwrap();
        let out = net.infer(&store, &image(32, 32, 9), true).unwrap();
        assert_eq!(out.hbb_logits.unwrap().shape(), &[1, 8, 8]);
    }

    #[test]
    fn removing_hbb_leaves_outputs_identical() {
        let cfg = toy();
        let no_hbb = ModelConfig { hbb_enabled: false, ..cfg.clone() };
        let (a, sa) = Network::build(&cfg, 11).unwrap();
        let (b, sb) = Network::build(&no_hbb, 11).unwrap();
        let img = image(32, 32, 4);
        let mut oa = a.infer(&sa, &img, true).unwrap();
        oa.hbb_logits = None;
        assert_eq!(oa, b.infer(&sb, &img, false).unwrap());
    }

    #[test]
    fn standard_regressor_shape() {
        let cfg = ModelConfig { regressor: RegressorKind::Standard, ..toy() };
        let specs = param_specs(&cfg).unwrap();
        let w = specs.iter().find(|s| s.name == "fine.regressor.weight").unwrap();
        assert_eq!(w.shape, vec![8, 32]);
    }

    #[test]
    fn inference_macs_drop_hbb_only() {
        let cfg = toy();
        let train = count_macs(&cfg, 32, 32, false).unwrap();
        let inf = count_macs(&cfg, 32, 32, true).unwrap();
        let tot = |v: &[(String, u64)]| v.iter().map(|e| e.1).sum::<u64>();
        let hbb = train.iter().find(|e| e.0 == "hbb").unwrap().1;
        assert_eq!(tot(&train) - hbb, tot(&inf));
        assert!(inf.iter().all(|e| e.0 != "hbb"));
    }

    #[test]
    fn bind_reports_missing() {
        let cfg = toy();
        let store = init_params(&ModelConfig { hbb_enabled: false, ..cfg.clone() }, 0).unwrap();
        assert!(matches!(Network::bind(&cfg, &store), Err(Error::CheckpointMismatch(_))));
    }
}
