//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};
use std::f64::consts::PI;

use polarseg::boundary::Pixel;
use polarseg::config::{ModelConfig, RunConfig, SceneConfig, ShapeKind, TrainConfig};
use polarseg::diffcore::{grad_check, Graph, GradCheckReport, ParamId, ParamStore, Tensor, Var};
use polarseg::losses::{centerness_bce, focal_loss, polar_iou_loss, polar_iou_loss_weighted};
use polarseg::network::Network;
use polarseg::polar_codec::BitMask;
use polarseg::training::{generate_scene, prepare_samples, Sample};
use polarseg::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Filled ellipse tested at pixel centers.
pub fn ellipse_mask(size: usize, center: (f64, f64), a: f64, b: f64, angle: f64) -> BitMask {
    let (s, c) = angle.sin_cos();
    BitMask::from_fn(size, size, |i, j| {
        let (dx, dy) = (j as f64 + 0.5 - center.0, i as f64 + 0.5 - center.1);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    })
    .unwrap()
}

/// Ellipse with axis ratio in [1, 3] and minor axis (diameter) of at least 10 px
/// on a 96 x 96 canvas.
pub fn random_ellipse(rng: &mut impl Rng) -> BitMask {
    let b: f64 = rng.gen_range(5.0..12.0);
    let a = (b * rng.gen_range(1.0..3.0)).min(30.0);
    let center = (rng.gen_range(34.0..62.0), rng.gen_range(34.0..62.0));
    ellipse_mask(96, center, a, b, rng.gen_range(0.0..PI))
}

/// Largest distance along the ray at which the sampled point falls on a
/// foreground pixel, marched in 0.1 px steps. `None` when the ray never hits.
pub fn dense_ray_march(mask: &BitMask, pole: (f64, f64), theta: f64) -> Option<f64> {
    let (h, w) = (mask.height() as f64, mask.width() as f64);
    let reach = (h * h + w * w).sqrt() + 1.0;
    let (dx, dy) = (theta.sin(), theta.cos());
    let mut best = None;
    let mut k = 0usize;
    loop {
        let t = k as f64 * 0.1;
        if t > reach {
            break best;
        }
        let (x, y) = (pole.0 + t * dx, pole.1 + t * dy);
        if mask.get_signed(y.floor() as isize, x.floor() as isize) {
            best = Some(t);
        }
        k += 1;
    }
}

/// Even-odd point-in-polygon test.
pub fn pnpoly(vertices: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = vertices.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = vertices[i];
        let (xj, yj) = vertices[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn frame_background(mask: &BitMask) -> Vec<bool> {
    // Padded grid, flood fill of 4-connected background from the frame.
    let (h, w) = (mask.height() + 2, mask.width() + 2);
    let bg = |r: usize, c: usize| r == 0 || c == 0 || r == h - 1 || c == w - 1 || !mask.get(r - 1, c - 1);
    let mut seen = vec![false; h * w];
    let mut queue = VecDeque::from([(0usize, 0usize)]);
    seen[0] = true;
    while let Some((r, c)) = queue.pop_front() {
        let nbrs = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
        for (nr, nc) in nbrs {
            if nr < h && nc < w && !seen[nr * w + nc] && bg(nr, nc) {
                seen[nr * w + nc] = true;
                queue.push_back((nr, nc));
            }
        }
    }
    seen
}

/// Checks the border invariants of one instance and returns a description of
/// the first violation.
///
/// * every traced pixel is foreground and 8-adjacent to background (the
///   frame counts as background);
/// * consecutive traced pixels of a contour are 8-adjacent, including the wrap;
/// * every foreground pixel 4-adjacent to frame-connected background is within
///   Chebyshev distance 1 of a traced pixel.
pub fn border_violation(mask: &BitMask, contours: &[Vec<Pixel>]) -> Option<String> {
    let at = |r: isize, c: isize| mask.get_signed(r, c);
    let traced: BTreeSet<Pixel> = contours.iter().flatten().copied().collect();
    for &(r, c) in &traced {
        if !mask.get(r, c) {
            return Some(format!("traced pixel ({r},{c}) is background"));
        }
        let (r, c) = (r as isize, c as isize);
        let touches = (-1..=1).any(|dr| (-1..=1).any(|dc| (dr, dc) != (0, 0) && !at(r + dr, c + dc)));
        if !touches {
            return Some(format!("traced pixel ({r},{c}) is interior"));
        }
    }
    for contour in contours {
        for (k, &(r, c)) in contour.iter().enumerate() {
            let (r2, c2) = contour[(k + 1) % contour.len()];
            if (r as isize - r2 as isize).abs() > 1 || (c as isize - c2 as isize).abs() > 1 {
                return Some(format!("contour jumps from ({r},{c}) to ({r2},{c2})"));
            }
        }
    }
    let outside = frame_background(mask);
    let pw = mask.width() + 2;
    for (r, c) in mask.foreground() {
        let (pr, pc) = (r + 1, c + 1);
        let exposed = [(pr - 1, pc), (pr + 1, pc), (pr, pc - 1), (pr, pc + 1)]
            .iter()
            .any(|&(a, b)| outside[a * pw + b]);
        if !exposed {
            continue;
        }
        let near = traced
            .iter()
            .any(|&(tr, tc)| (tr as isize - r as isize).abs() <= 1 && (tc as isize - c as isize).abs() <= 1);
        if !near {
            return Some(format!("exposed pixel ({r},{c}) has no traced pixel nearby"));
        }
    }
    None
}

/// Cells `floor(v / s)` over all traced points.
pub fn floored_cells(points: impl Iterator<Item = Pixel>, stride: usize) -> BTreeSet<Pixel> {
    points.map(|(r, c)| (r / stride, c / stride)).collect()
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink at 0.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Fractional coordinates at least 0.1 from any integer.
fn off_grid(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    let base = rng.gen_range(lo..hi).floor();
    base + rng.gen_range(0.1..0.9)
}

/// Reduces `out` to a scalar through fixed random weights.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0xabcd);
    let shape = g.shape(out).to_vec();
    let w = g.constant(random_tensor(&mut r, &shape, -1.0, 1.0));
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

pub type OpCheck = (&'static str, GradCheckReport);

/// Finite-difference checks of every differentiable op at one seed.
pub fn op_suite(seed: u64, h: f64, tol: f64) -> Result<Vec<OpCheck>> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut run = |name: &'static str,
                   inputs: Vec<Tensor>,
                   f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>|
     -> Result<()> {
        let rep = grad_check(|g, v| f(g, v).and_then(|o| project(g, o, seed)), &inputs, h, tol)?;
        out.push((name, rep));
        Ok(())
    };

    let x = random_tensor(&mut r, &[2, 5, 6], -1.0, 1.0);
    let w = random_tensor(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
    let b = random_tensor(&mut r, &[3], -0.5, 0.5);
    run("conv2d_3x3_pad1", vec![x.clone(), w.clone(), b.clone()], &|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1))?;
    run("conv2d_3x3_stride2", vec![x.clone(), w.clone(), b.clone()], &|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1))?;
    let w1 = random_tensor(&mut r, &[4, 2, 1, 1], -0.5, 0.5);
    run("conv2d_1x1_nobias", vec![x.clone(), w1], &|g, v| g.conv2d(v[0], v[1], None, 1, 0))?;
    let xb = random_tensor(&mut r, &[2, 2, 4, 4], -1.0, 1.0);
    run("conv2d_batched", vec![xb, w.clone(), b.clone()], &|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1))?;

    let rows = random_tensor(&mut r, &[3, 8], -1.0, 1.0);
    let gw = random_tensor(&mut r, &[4, 2], -1.0, 1.0);
    let gb = random_tensor(&mut r, &[4], -1.0, 1.0);
    run("grouped_conv1x1", vec![rows.clone(), gw, gb.clone()], &|g, v| g.grouped_conv1x1(v[0], 4, v[1], v[2]))?;
    let lw = random_tensor(&mut r, &[4, 8], -1.0, 1.0);
    run("linear", vec![rows.clone(), lw, gb], &|g, v| g.linear(v[0], v[1], v[2]))?;

    let feat = random_tensor(&mut r, &[3, 5, 6], -1.0, 1.0);
    // Points span the interior and the zero-padded margin.
    let pts = Tensor::from_fn(&[7, 2], |i| {
        if i % 2 == 0 {
            off_grid(&mut r, -1.0, 6.0)
        } else {
            off_grid(&mut r, -1.0, 5.0)
        }
    });
    run("bilinear_sample", vec![feat.clone(), pts], &|g, v| g.bilinear_sample(v[0], v[1]))?;

    let radii = random_tensor(&mut r, &[2, 8], 1.0, 9.0);
    let centers = [(r.gen_range(0.0..6.0), r.gen_range(0.0..6.0)), (r.gen_range(0.0..6.0), r.gen_range(0.0..6.0))];
    run("transform_coordinates", vec![radii.clone()], &|g, v| g.transform_coordinates(v[0], &centers, 4.0))?;
    // Composite used by the refinement module: coordinates feed the sampler.
    let coarse = random_tensor(&mut r, &[2, 8], 1.0, 9.0);
    run("sample_along_rays", vec![feat.clone(), coarse], &|g, v| {
        let c = g.transform_coordinates(v[1], &[(2.3, 2.6), (3.4, 1.7)], 4.0)?;
        g.bilinear_sample(v[0], c)
    })?;

    run("gather_cells", vec![feat.clone()], &|g, v| g.gather_cells(v[0], &[0, 7, 7, 29]))?;
    let small = random_tensor(&mut r, &[2, 2, 3], -1.0, 1.0);
    run("upsample_nearest", vec![small], &|g, v| g.upsample_nearest(v[0], 4, 6))?;
    run("reshape", vec![feat.clone()], &|g, v| g.reshape(v[0], &[3, 30]))?;
    let a = random_tensor(&mut r, &[4], -1.0, 1.0);
    let c = random_tensor(&mut r, &[2, 3], -1.0, 1.0);
    run("concat", vec![a.clone(), c], &|g, v| Ok(g.concat(&[v[0], v[1]])))?;
    let a2 = random_tensor(&mut r, &[4], -1.0, 1.0);
    run("add", vec![a.clone(), a2.clone()], &|g, v| g.add(v[0], v[1]))?;
    run("mul", vec![a.clone(), a2], &|g, v| g.mul(v[0], v[1]))?;
    run("relu", vec![away_from_zero(&mut r, &[10])], &|g, v| Ok(g.relu(v[0])))?;
    run("sigmoid", vec![random_tensor(&mut r, &[6], -4.0, 4.0)], &|g, v| Ok(g.sigmoid(v[0])))?;
    run("exp", vec![random_tensor(&mut r, &[6], -2.0, 2.0)], &|g, v| Ok(g.exp(v[0])))?;
    let s = random_tensor(&mut r, &[1], 0.5, 2.0);
    run("scalar_scale", vec![a.clone(), s], &|g, v| g.scalar_scale(v[0], v[1]))?;
    let k = r.gen_range(-3.0..3.0);
    run("scale", vec![a.clone()], &move |g, v| Ok(g.scale(v[0], k)))?;
    run("clamp_min", vec![away_from_zero(&mut r, &[10])], &|g, v| Ok(g.clamp_min(v[0], 0.0)))?;
    run("sum", vec![a], &|g, v| Ok(g.sum(v[0])))?;

    let logits = random_tensor(&mut r, &[12], -3.0, 3.0);
    let targets = Tensor::from_fn(&[12], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    run("focal_loss", vec![logits.clone()], &|g, v| focal_loss(g, v[0], &targets, 2.0, 0.25))?;
    let cnt_t: Vec<f64> = (0..12).map(|_| r.gen_range(0.0..1.0)).collect();
    run("centerness_bce", vec![logits], &|g, v| centerness_bce(g, v[0], &cnt_t))?;
    // Predictions kept at least 0.2 away from the targets, clear of the max/min switch.
    let target = random_tensor(&mut r, &[2, 8], 2.0, 10.0);
    let pred = Tensor::from_fn(&[2, 8], |i| {
        let d = r.gen_range(0.2..2.0);
        target.values()[i] + if r.gen_bool(0.5) { d } else { -d }
    });
    let weights = [r.gen_range(0.2..1.0), r.gen_range(0.2..1.0)];
    run("polar_iou_loss_weighted", vec![pred.clone()], &|g, v| polar_iou_loss_weighted(g, v[0], &target, &weights))?;
    let t0 = Tensor::new(vec![8], target.values()[..8].to_vec())?;
    let p0 = Tensor::new(vec![8], pred.values()[..8].to_vec())?;
    run("polar_iou_loss", vec![p0], &|g, v| polar_iou_loss(g, v[0], &t0))?;
    Ok(out)
}

/// Two-class 32 x 32 configuration small enough for exhaustive probing.
pub fn toy_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        model: ModelConfig {
            num_classes: 2,
            num_rays: 12,
            fpn_levels: vec![4, 8, 16],
            fpn_channels: 4,
            head_convs: 1,
            backbone_widths: vec![4, 4, 8, 8],
            hbb_widths: vec![6, 4, 4, 4],
            init_radius: 4.0,
            ..ModelConfig::default()
        },
        data: SceneConfig {
            image_size: 32,
            classes: vec![ShapeKind::Ellipse, ShapeKind::Rectangle],
            min_instances: 1,
            max_instances: 2,
            min_radius: 5.0,
            max_radius: 12.0,
            ..SceneConfig::default()
        },
        ..RunConfig::default()
    };
    cfg.train.scale_bounds = vec![0.0, 8.0, 12.0, f64::INFINITY];
    cfg.validate().expect("toy config is valid");
    cfg
}

/// Toy network, one scene with positives, and the training config.
pub fn toy_problem(seed: u64) -> (Network, ParamStore, Sample, TrainConfig) {
    let cfg = toy_config(seed);
    let (net, mut store) = Network::build(&cfg.model, seed).unwrap();
    // Move the refinement weights off zero so the sampling path carries
    // gradient, and jitter biases: with zero biases a dead neighbourhood puts
    // a ReLU input exactly on its kink.
    let mut r = rng(seed ^ 0x51);
    for name in ["fine.regressor.weight", "fine.regressor.bias"] {
        let id = store.id(name).unwrap();
        for v in store.get_mut(id).tensor.values_mut() {
            *v = r.gen_range(-0.05..0.05);
        }
    }
    for p in store.iter_mut().filter(|p| p.name.ends_with(".bias")) {
        for v in p.tensor.values_mut() {
            *v += r.gen_range(-0.05..0.05);
        }
    }
    let mut scene_seed = seed;
    let sample = loop {
        let scene = generate_scene(scene_seed, &cfg.data).unwrap();
        let s = prepare_samples(&[scene], &cfg.model, &cfg.train).unwrap().remove(0);
        if s.targets.num_positives() > 0 {
            break s;
        }
        scene_seed += 1000;
    };
    (net, store, sample, cfg.train)
}

fn random_probes(store: &ParamStore, seed: u64, count: usize) -> Vec<(ParamId, usize)> {
    let mut r = rng(seed ^ 0x9e37);
    let ids: Vec<(ParamId, usize)> = store.iter().map(|(id, p)| (id, p.tensor.len())).collect();
    (0..count)
        .map(|_| {
            let (id, len) = ids[r.gen_range(0..ids.len())];
            (id, r.gen_range(0..len))
        })
        .collect()
}

/// Five random coordinates plus one weight of each loss-bearing head.
pub fn e2e_probes(store: &ParamStore, seed: u64) -> Vec<(ParamId, usize)> {
    let mut probes = random_probes(store, seed, 5);
    for name in ["reg_head.radii.weight", "fine.regressor.weight", "hbb.logits.weight"] {
        probes.push((store.id(name).unwrap(), 0));
    }
    probes
}

/// Single instances cut from generated scenes, including occluded, concave
/// and multi-component ones.
pub fn scene_shapes(count: usize) -> Vec<BitMask> {
    let cfg = SceneConfig {
        image_size: 64,
        ..SceneConfig::default()
    };
    let mut out = Vec::new();
    let mut seed = 0;
    while out.len() < count {
        let scene = generate_scene(seed, &cfg).unwrap();
        out.extend(scene.instances.into_iter().map(|i| i.mask));
        seed += 1;
    }
    out.truncate(count);
    out
}
