//! Synthetic scenes, target assignment and the SGD training loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boundary::boundary_target;
use crate::config::{ModelConfig, RunConfig, SceneConfig, ShapeKind, TrainConfig};
use crate::diffcore::{save_checkpoint, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::io::{json_lines, read_pgm, write_atomic, write_pgm, GrayImage};
use crate::losses::{centerness_bce, centerness_target, focal_loss_normalized, polar_iou_loss_weighted, total_loss, LossComponents, LossValues};
use crate::network::{cell_center, Network};
use crate::polar_codec::{encode_with_pole, mass_center, rasterize, BitMask, Polygon};

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub class: usize,
    pub mask: BitMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    /// `[3, H, W]` in `[0, 1]`, quantised to 8 bits.
    pub image: Tensor,
    pub instances: Vec<Instance>,
}

impl SyntheticScene {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Image rescaled to `[-1, 1]` for the network.
    pub fn network_input(&self) -> Tensor {
        let mut t = self.image.clone();
        t.values_mut().iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
        t
    }

    pub fn masks(&self) -> Vec<BitMask> {
        self.instances.iter().map(|i| i.mask.clone()).collect()
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Foreground test of a shape at pixel-center coordinates.
fn shape_mask(kind: ShapeKind, size: usize, cx: f64, cy: f64, a: f64, b: f64, rot: f64, inner: f64) -> Result<BitMask> {
    let (s, c) = rot.sin_cos();
    match kind {
        ShapeKind::Ellipse | ShapeKind::Rectangle => BitMask::from_fn(size, size, |i, j| {
            let (dx, dy) = (j as f64 + 0.5 - cx, i as f64 + 0.5 - cy);
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            if kind == ShapeKind::Ellipse {
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            } else {
                u.abs() <= a && v.abs() <= b
            }
        }),
        ShapeKind::Star => {
            let verts = (0..10)
                .map(|k| {
                    let t = rot + k as f64 * std::f64::consts::PI / 5.0;
                    let r = if k % 2 == 0 { a } else { a * inner };
                    (cx + r * t.sin(), cy + r * t.cos())
                })
                .collect();
            rasterize(&Polygon::new(verts)?, size, size)
        }
    }
}

/// Deterministic scene: textured background, shapes painted in z-order (later
/// shapes cover earlier ones), additive Gaussian noise. Instances left with
/// fewer than `min_visible` pixels are dropped.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.image_size;
    let mut planes = vec![0.0; 3 * n * n];
    for ch in 0..3 {
        let base = rng.gen_range(0.2..0.5);
        let (fx, fy) = (rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3));
        let (px, py) = (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
        let amp = rng.gen_range(0.03..0.12);
        for i in 0..n {
            for j in 0..n {
                planes[ch * n * n + i * n + j] = base + amp * (fx * j as f64 + px).sin() * (fy * i as f64 + py).cos();
            }
        }
    }
    let count = rng.gen_range(cfg.min_instances..=cfg.max_instances);
    let mut painted: Vec<(usize, BitMask)> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.gen_range(0..cfg.classes.len());
        let kind = cfg.classes[class];
        let a = rng.gen_range(cfg.min_radius..=cfg.max_radius);
        let b = a * rng.gen_range(0.5..=1.0);
        let rot = rng.gen_range(0.0..std::f64::consts::TAU);
        let inner = rng.gen_range(0.45..0.6);
        let margin = 0.6 * a;
        let cx = rng.gen_range(margin..=n as f64 - margin);
        let cy = rng.gen_range(margin..=n as f64 - margin);
        let mask = shape_mask(kind, n, cx, cy, a, b, rot, inner)?;
        let color: [f64; 3] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let stripe = rng.gen_range(0.2..0.8);
        for (i, j) in mask.foreground() {
            let tex = 0.05 * (stripe * (i + j) as f64).sin();
            for (ch, &col) in color.iter().enumerate() {
                planes[ch * n * n + i * n + j] = col + tex;
            }
        }
        for (_, earlier) in painted.iter_mut() {
            for (i, j) in mask.foreground() {
                earlier.set(i, j, false);
            }
        }
        painted.push((class, mask));
    }
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).expect("finite noise std");
        planes.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    planes.iter_mut().for_each(|v| *v = quantize(*v));
    let instances = painted
        .into_iter()
        .filter(|(_, m)| m.count() >= cfg.min_visible)
        .map(|(class, mask)| Instance { class, mask })
        .collect();
    Ok(SyntheticScene {
        seed,
        image: Tensor::new(vec![3, n, n], planes)?,
        instances,
    })
}

/// Per-scene seeds derived from a dataset seed.
pub fn scene_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.gen()).collect()
}

pub fn generate_dataset(seed: u64, count: usize, cfg: &SceneConfig) -> Result<Vec<SyntheticScene>> {
    scene_seeds(seed, count).into_iter().map(|s| generate_scene(s, cfg)).collect()
}

#[derive(Serialize, Deserialize)]
struct SceneMeta {
    seed: u64,
    width: usize,
    height: usize,
    classes: Vec<usize>,
    class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    count: usize,
    scenes: Vec<String>,
}

/// Writes `scene_<i>/` directories holding `image.pgm` (the three planes
/// stacked vertically), `inst_<k>.pgm` and `meta.json`, plus `manifest.json`.
pub fn save_dataset(dir: &Path, scenes: &[SyntheticScene], palette: &[ShapeKind]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::with_capacity(scenes.len());
    for (idx, scene) in scenes.iter().enumerate() {
        let name = format!("scene_{idx:05}");
        let sd = dir.join(&name);
        let (h, w) = (scene.height(), scene.width());
        let pixels = scene.image.values().iter().map(|&v| (v * 255.0).round() as u8).collect();
        write_pgm(&sd.join("image.pgm"), &GrayImage { width: w, height: 3 * h, pixels })?;
        for (k, inst) in scene.instances.iter().enumerate() {
            inst.mask.write_pgm(&sd.join(format!("inst_{k}.pgm")))?;
        }
        let meta = SceneMeta {
            seed: scene.seed,
            width: w,
            height: h,
            classes: scene.instances.iter().map(|i| i.class).collect(),
            class_names: scene.instances.iter().map(|i| palette[i.class].to_string()).collect(),
        };
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::format("json", e.to_string()))?;
        write_atomic(&sd.join("meta.json"), text.as_bytes())?;
        names.push(name);
    }
    let manifest = Manifest {
        count: scenes.len(),
        scenes: names,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format("json", e.to_string()))?;
    write_atomic(&dir.join("manifest.json"), text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format("json", format!("{}: {e}", path.display())))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SyntheticScene>> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    let mut scenes = Vec::with_capacity(manifest.count);
    for name in &manifest.scenes {
        let sd: PathBuf = dir.join(name);
        let meta: SceneMeta = read_json(&sd.join("meta.json"))?;
        let img = read_pgm(&sd.join("image.pgm"))?;
        if img.width != meta.width || img.height != 3 * meta.height {
            return Err(Error::format("pgm", format!("{}: expected {}x{}", sd.display(), meta.width, 3 * meta.height)));
        }
        let values = img.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        let image = Tensor::new(vec![3, meta.height, meta.width], values)?;
        let instances = meta
            .classes
            .iter()
            .enumerate()
            .map(|(k, &class)| {
                Ok(Instance {
                    class,
                    mask: BitMask::read_pgm(&sd.join(format!("inst_{k}.pgm")))?,
                })
            })
            .collect::<Result<_>>()?;
        scenes.push(SyntheticScene {
            seed: meta.seed,
            image,
            instances,
        });
    }
    Ok(scenes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Positive {
    /// Flat cell index `row * W + col`.
    pub cell: usize,
    pub instance: usize,
    pub class: usize,
    pub radii: Vec<f64>,
    pub centerness: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// One-hot `[num_classes, H, W]`; background cells are all zero.
    pub cls: Tensor,
    pub positives: Vec<Positive>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetSet {
    pub levels: Vec<LevelTargets>,
    /// Boundary mask on the finest level.
    pub boundary: BitMask,
}

impl TargetSet {
    pub fn num_positives(&self) -> usize {
        self.levels.iter().map(|l| l.positives.len()).sum()
    }
}

/// Positive assignment. A cell of level `l` is positive for an instance when
/// the instance's largest radius lies in `[bounds[l], bounds[l+1])` and the
/// cell center is within `center_radius * stride` of the mass center and on
/// the instance; the cell nearest the mass center is always taken. A cell
/// claimed by several instances goes to the smallest. Radii targets use the
/// cell center as pole.
pub fn assign_targets(scene: &SyntheticScene, model: &ModelConfig, train: &TrainConfig) -> Result<TargetSet> {
    let (h, w) = (scene.height(), scene.width());
    let n = model.num_rays;
    struct Info {
        center: (f64, f64),
        level: Option<usize>,
        area: usize,
    }
    let infos: Vec<Info> = scene
        .instances
        .iter()
        .map(|inst| {
            let center = mass_center(&inst.mask)?;
            let rmax = encode_with_pole(&inst.mask, center, n)?.into_iter().fold(0.0, f64::max);
            let level = train.scale_bounds.windows(2).position(|b| rmax >= b[0] && rmax < b[1]);
            Ok(Info {
                center,
                level,
                area: inst.mask.count(),
            })
        })
        .collect::<Result<_>>()?;
    let mut levels = Vec::with_capacity(model.fpn_levels.len());
    for (li, &s) in model.fpn_levels.iter().enumerate() {
        let (lh, lw) = (h.div_ceil(s), w.div_ceil(s));
        let mut owner: Vec<Option<usize>> = vec![None; lh * lw];
        let radius = train.center_radius * s as f64;
        for (k, info) in infos.iter().enumerate() {
            if info.level != Some(li) {
                continue;
            }
            let mask = &scene.instances[k].mask;
            let (cx, cy) = info.center;
            let nearest_row = ((cy / s as f64 - 0.5).round().max(0.0) as usize).min(lh - 1);
            let nearest_col = ((cx / s as f64 - 0.5).round().max(0.0) as usize).min(lw - 1);
            for row in 0..lh {
                for col in 0..lw {
                    let (px, py) = cell_center(row, col, s);
                    let on_mask = mask.get_signed(py.floor() as isize, px.floor() as isize);
                    let near = (px - cx).hypot(py - cy) <= radius;
                    let forced = row == nearest_row && col == nearest_col;
                    if !(forced || (near && on_mask)) {
                        continue;
                    }
                    let cell = row * lw + col;
                    match owner[cell] {
                        Some(o) if infos[o].area <= info.area => {}
                        _ => owner[cell] = Some(k),
                    }
                }
            }
        }
        let mut cls = Tensor::zeros(&[model.num_classes, lh, lw]);
        let mut positives = Vec::new();
        for (cell, o) in owner.iter().enumerate() {
            let Some(k) = *o else { continue };
            let inst = &scene.instances[k];
            let pole = cell_center(cell / lw, cell % lw, s);
            let radii = encode_with_pole(&inst.mask, pole, n)?;
            cls.values_mut()[inst.class * lh * lw + cell] = 1.0;
            positives.push(Positive {
                cell,
                instance: k,
                class: inst.class,
                centerness: centerness_target(&radii),
                radii,
            });
        }
        levels.push(LevelTargets {
            stride: s,
            height: lh,
            width: lw,
            cls,
            positives,
        });
    }
    let boundary = boundary_target(&scene.masks(), model.fpn_levels[0], h, w)?;
    Ok(TargetSet { levels, boundary })
}

/// A scene ready for training.
#[derive(Clone, Debug)]
pub struct Sample {
    pub input: Tensor,
    pub targets: TargetSet,
}

pub fn prepare_samples(scenes: &[SyntheticScene], model: &ModelConfig, train: &TrainConfig) -> Result<Vec<Sample>> {
    scenes
        .iter()
        .map(|s| {
            Ok(Sample {
                input: s.network_input(),
                targets: assign_targets(s, model, train)?,
            })
        })
        .collect()
}

/// Builds the loss graph of one scene.
pub fn scene_loss(g: &mut Graph, net: &Network, store: &ParamStore, sample: &Sample, train: &TrainConfig) -> Result<(Var, LossValues)> {
    let model = net.config();
    let x = g.constant(sample.input.clone());
    let fwd = net.forward(g, store, x, model.hbb_enabled)?;
    let t = &sample.targets;
    let npos = t.num_positives();
    let gamma = train.loss.gamma;
    let balance = train.loss.focal_balance;

    let cls_vars: Vec<Var> = fwd.levels.iter().map(|l| l.cls).collect();
    let cls_all = g.concat(&cls_vars);
    let cls_targets: Vec<f64> = t.levels.iter().flat_map(|l| l.cls.values().iter().copied()).collect();
    let cls_targets = Tensor::new(vec![cls_targets.len()], cls_targets)?;
    let cls = focal_loss_normalized(g, cls_all, &cls_targets, gamma, balance, npos.max(1) as f64)?;

    let (mut cnt_parts, mut coarse_parts, mut fine_parts) = (Vec::new(), Vec::new(), Vec::new());
    let (mut cnt_t, mut radii_t, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    for (li, (lv, lt)) in fwd.levels.iter().zip(&t.levels).enumerate() {
        if lt.positives.is_empty() {
            continue;
        }
        let cells: Vec<usize> = lt.positives.iter().map(|p| p.cell).collect();
        cnt_parts.push(g.gather_cells(lv.centerness, &cells)?);
        coarse_parts.push(net.coarse_at(g, lv, &cells)?);
        if let Some(f) = net.fine_at(g, store, &fwd, li, &cells)? {
            fine_parts.push(f);
        }
        for p in &lt.positives {
            cnt_t.push(p.centerness);
            radii_t.extend_from_slice(&p.radii);
            weights.push(if train.centerness_weighting { p.centerness } else { 1.0 });
        }
    }
    let n = model.num_rays;
    let zero = |g: &mut Graph| g.constant(Tensor::scalar(0.0));
    let (cnt, coarse, fine) = if npos == 0 {
        let f = model.fine_enabled.then(|| zero(g));
        (zero(g), zero(g), f)
    } else {
        let radii_t = Tensor::new(vec![npos, n], radii_t)?;
        let c = g.concat(&cnt_parts);
        let cnt = centerness_bce(g, c, &cnt_t)?;
        let c = g.concat(&coarse_parts);
        let c = g.reshape(c, &[npos, n])?;
        let coarse = polar_iou_loss_weighted(g, c, &radii_t, &weights)?;
        let fine = if fine_parts.is_empty() {
            None
        } else {
            let f = g.concat(&fine_parts);
            let f = g.reshape(f, &[npos, n])?;
            Some(polar_iou_loss_weighted(g, f, &radii_t, &weights)?)
        };
        (cnt, coarse, fine)
    };
    let hbb = match fwd.hbb {
        Some(logits) => {
            let b = &t.boundary;
            let target = Tensor::new(
                vec![1, b.height(), b.width()],
                b.bits().iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
            )?;
            Some(focal_loss_normalized(g, logits, &target, gamma, balance, b.count().max(1) as f64)?)
        }
        None => None,
    };
    let comps = LossComponents {
        cls,
        cnt,
        coarse,
        fine,
        hbb,
    };
    total_loss(g, &comps, train.loss.alpha, train.implicit_coarse)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossValues,
}

/// Learning rate at `step` (0-based): linear warm-up from a third of the base
/// rate, then 10x drops at 2/3 and 8/9 of the budget.
pub fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    let mut lr = cfg.lr;
    if step >= cfg.steps * 2 / 3 {
        lr *= 0.1;
    }
    if step >= cfg.steps * 8 / 9 {
        lr *= 0.1;
    }
    if step < cfg.warmup_steps {
        let t = step as f64 / cfg.warmup_steps as f64;
        lr *= 1.0 / 3.0 + 2.0 / 3.0 * t;
    }
    lr
}

/// SGD with momentum and L2 weight decay over the trainable parameters.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect(),
        }
    }

    /// Applies one update from the gradients stored in `store`. Gradients are
    /// first rescaled so their global norm is at most `clip` (when `clip > 0`).
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, clip: f64) {
        let norm = store
            .iter()
            .filter_map(|(_, p)| p.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        for (p, vel) in store.iter_mut().zip(&mut self.velocity) {
            if !p.trainable {
                continue;
            }
            let grad: Vec<f64> = match p.tensor.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            for ((w, v), g) in p.tensor.values_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                let d = scale * g + self.weight_decay * *w;
                *v = self.momentum * *v + d;
                *w -= lr * *v;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub store: ParamStore,
    pub log: Vec<LogRecord>,
}

/// Where training writes its artefacts.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }

    pub fn last_good_checkpoint(&self) -> PathBuf {
        self.dir.join("last_good.ckpt")
    }

    pub fn periodic_checkpoint(&self, step: usize) -> PathBuf {
        self.dir.join(format!("step_{step:06}.ckpt"))
    }
}

/// Trains from `store` on `samples` for `cfg.train.steps` steps. Each step
/// accumulates `batch_size` single-scene gradients drawn from a per-epoch
/// shuffle. With `outputs` set, the resolved config, the loss log and
/// checkpoints are written there. A non-finite loss aborts with
/// [`Error::Divergence`] after saving the parameters of the last good step.
pub fn train(cfg: &RunConfig, mut store: ParamStore, samples: &[Sample], outputs: Option<&TrainOutputs>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::ConfigInvalid("training needs at least one scene".into()));
    }
    let tc = &cfg.train;
    let net = Network::bind(&cfg.model, &store)?;
    if let Some(o) = outputs {
        write_atomic(&o.dir.join("config.txt"), cfg.to_text().as_bytes())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a1e);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut opt = Sgd::new(&store, tc.momentum, tc.weight_decay);
    let mut log = Vec::new();
    let weight = 1.0 / tc.batch_size as f64;
    for step in 0..tc.steps {
        store.zero_grads();
        let mut values = LossValues::default();
        for _ in 0..tc.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let sample = &samples[order[cursor]];
            cursor += 1;
            let mut g = Graph::new();
            // Radii that overflow or underflow also count as divergence.
            let (loss, v) = match scene_loss(&mut g, &net, &store, sample, tc) {
                Ok((loss, v)) if v.is_finite() => (loss, v),
                Ok((_, v)) => return diverged(outputs, &store, &log, step, v.total),
                Err(Error::NonPositiveRadius(_)) => return diverged(outputs, &store, &log, step, f64::NAN),
                Err(e) => return Err(e),
            };
            values.accumulate(&v, weight);
            g.backward(loss)?.accumulate_into(&mut store, weight);
        }
        opt.step(&mut store, learning_rate(tc, step), tc.grad_clip);
        if step % tc.log_every == 0 || step + 1 == tc.steps {
            log.push(LogRecord { step, losses: values });
        }
        if let Some(o) = outputs {
            if tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0 {
                save_checkpoint(&o.periodic_checkpoint(step + 1), &store)?;
                write_atomic(&o.log_path(), json_lines(&log)?.as_bytes())?;
            }
        }
    }
    if let Some(o) = outputs {
        save_checkpoint(&o.final_checkpoint(), &store)?;
        write_atomic(&o.log_path(), json_lines(&log)?.as_bytes())?;
    }
    Ok(TrainOutcome { store, log })
}

fn diverged(outputs: Option<&TrainOutputs>, store: &ParamStore, log: &[LogRecord], step: usize, loss: f64) -> Result<TrainOutcome> {
    if let Some(o) = outputs {
        save_checkpoint(&o.last_good_checkpoint(), store)?;
        write_atomic(&o.log_path(), json_lines(log)?.as_bytes())?;
    }
    Err(Error::Divergence { step, loss })
}
