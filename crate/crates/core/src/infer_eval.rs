//! Decoding dense predictions into instances, mask NMS, COCO-style mask AP,
//! parameter and MAC accounting, and overlay rendering.

use std::sync::OnceLock;

use serde::Serialize;

use crate::config::{EvalConfig, ModelConfig};
use crate::diffcore::{sigmoid, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::io::encode_ppm;
use crate::network::{cell_center, count_macs, module_of, param_specs, HeadOutputs, Network};
use crate::polar_codec::{mask_iou, shape_to_mask, BitMask, PolarShape, DEGENERATE_RADIUS};

/// Mask-IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

const RECALL_POINTS: usize = 101;

#[derive(Debug)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub shape: PolarShape,
    height: usize,
    width: usize,
    mask: OnceLock<BitMask>,
}

impl Clone for Detection {
    fn clone(&self) -> Self {
        Self {
            class: self.class,
            score: self.score,
            shape: self.shape.clone(),
            height: self.height,
            width: self.width,
            mask: self.mask.clone(),
        }
    }
}

impl Detection {
    pub fn new(class: usize, score: f64, shape: PolarShape, height: usize, width: usize) -> Self {
        Self {
            class,
            score,
            shape,
            height,
            width,
            mask: OnceLock::new(),
        }
    }

    /// Rasterised polygon, computed on first use.
    pub fn mask(&self) -> &BitMask {
        self.mask.get_or_init(|| {
            shape_to_mask(&self.shape, self.height, self.width).expect("image dimensions are positive")
        })
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Scored instances from dense outputs: per level, score = sigmoid(cls) *
/// sigmoid(centerness); the `topk` best (cell, class) pairs above
/// `score_thresh` are kept, each with its cell center as pole.
pub fn decode_detections(outputs: &HeadOutputs, height: usize, width: usize, score_thresh: f64, topk: usize) -> Vec<Detection> {
    let mut dets = Vec::new();
    for lv in &outputs.levels {
        let plane = lv.height * lv.width;
        let k = lv.cls_logits.shape()[0];
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for cell in 0..plane {
            let cnt = sigmoid(lv.centerness_logits.values()[cell]);
            for c in 0..k {
                let s = sigmoid(lv.cls_logits.values()[c * plane + cell]) * cnt;
                if s > score_thresh {
                    cands.push((s, cell, c));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        cands.truncate(topk);
        for (score, cell, class) in cands {
            let (row, col) = (cell / lv.width, cell % lv.width);
            let radii = lv
                .radii_at(row, col)
                .into_iter()
                .map(|r| if r.is_finite() { r.max(DEGENERATE_RADIUS) } else { DEGENERATE_RADIUS })
                .collect();
            let shape = PolarShape::new(cell_center(row, col, lv.stride), radii).expect("radii clamped positive");
            dets.push(Detection::new(class, score, shape, height, width));
        }
    }
    dets
}

fn by_score_desc(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Class-wise greedy suppression: in descending score, a detection is dropped
/// when its mask IoU with an already kept detection of its class exceeds
/// `iou_thresh`.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    by_score_desc(&mut dets);
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        let suppressed = kept
            .iter()
            .filter(|k| k.class == d.class)
            .any(|k| mask_iou(k.mask(), d.mask()).map_or(false, |iou| iou > iou_thresh));
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Full post-processing of one image: dense inference, decoding, NMS and the
/// per-image cap.
pub fn predict(net: &Network, store: &ParamStore, input: &Tensor, cfg: &EvalConfig) -> Result<Vec<Detection>> {
    let s = input.shape();
    if s.len() != 3 {
        return Err(Error::shape("predict", format!("image must be [C,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let out = net.infer(store, input, false)?;
    let mut dets = nms(decode_detections(&out, h, w, cfg.score_thresh, cfg.topk), cfg.nms_iou);
    dets.truncate(cfg.max_dets);
    Ok(dets)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub class: usize,
    pub mask: BitMask,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Mean over classes with ground truth and over the ten thresholds.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `None` when no ground truth falls in the bucket.
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    /// AP at each threshold of [`iou_thresholds`].
    pub ap_per_threshold: Vec<f64>,
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    pub num_detections: usize,
    pub num_ground_truth: usize,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("   -  ".to_string(), |v| format!("{v:.4}"));
        let mut s = format!(
            "AP      AP50    AP75    AP_S    AP_M    AP_L\n{:.4}  {:.4}  {:.4}  {}  {}  {}\n",
            self.ap,
            self.ap50,
            self.ap75,
            opt(self.ap_small),
            opt(self.ap_medium),
            opt(self.ap_large)
        );
        for (c, ap) in self.per_class.iter().enumerate() {
            s.push_str(&format!("class {c}: {}\n", opt(*ap)));
        }
        s.push_str(&format!("detections: {}  ground truth: {}\n", self.num_detections, self.num_ground_truth));
        s
    }
}

/// Matching outcome of one (image, class) pair for one threshold and area range.
struct Matched {
    /// `(score, is_tp)` of detections that are not ignored.
    dets: Vec<(f64, bool)>,
    num_gt: usize,
}

fn in_range(area: usize, range: (f64, f64)) -> bool {
    let a = area as f64;
    a >= range.0 && a < range.1
}

/// Greedy matching in descending score. Ground truth outside `range` is
/// ignored: detections matched to it are dropped, as are unmatched
/// detections whose own area is outside `range`.
fn match_image(dets: &[&Detection], gts: &[&GroundTruth], ious: &[Vec<f64>], thresh: f64, range: (f64, f64)) -> Matched {
    let ignore: Vec<bool> = gts.iter().map(|g| !in_range(g.mask.count(), range)).collect();
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by_key(|&i| ignore[i]);
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for (di, d) in dets.iter().enumerate() {
        let mut best: Option<usize> = None;
        let mut best_iou = thresh.min(1.0 - 1e-10);
        for &gi in &order {
            if taken[gi] {
                continue;
            }
            if let Some(b) = best {
                if !ignore[b] && ignore[gi] {
                    break;
                }
            }
            if ious[di][gi] < best_iou {
                continue;
            }
            best_iou = ious[di][gi];
            best = Some(gi);
        }
        match best {
            Some(gi) => {
                taken[gi] = true;
                if !ignore[gi] {
                    out.push((d.score, true));
                }
            }
            None => {
                if in_range(d.mask().count(), range) {
                    out.push((d.score, false));
                }
            }
        }
    }
    Matched {
        dets: out,
        num_gt: ignore.iter().filter(|&&i| !i).count(),
    }
}

/// 101-point interpolated AP of detections pooled across images.
fn interpolated_ap(mut dets: Vec<(f64, bool)>, num_gt: usize) -> f64 {
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    for (_, is_tp) in &dets {
        if *is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

struct ImageClass<'a> {
    dets: Vec<&'a Detection>,
    gts: Vec<&'a GroundTruth>,
    ious: Vec<Vec<f64>>,
}

/// Per class, per threshold AP for one area range. `None` where the class has
/// no ground truth in range.
fn ap_grid(cells: &[Vec<ImageClass<'_>>], num_classes: usize, thresholds: &[f64], range: (f64, f64)) -> Vec<Option<Vec<f64>>> {
    (0..num_classes)
        .map(|c| {
            let per_t: Vec<(Vec<(f64, bool)>, usize)> = thresholds
                .iter()
                .map(|&t| {
                    let mut dets = Vec::new();
                    let mut num_gt = 0;
                    for img in cells {
                        let ic = &img[c];
                        let m = match_image(&ic.dets, &ic.gts, &ic.ious, t, range);
                        dets.extend(m.dets);
                        num_gt += m.num_gt;
                    }
                    (dets, num_gt)
                })
                .collect();
            if per_t[0].1 == 0 {
                return None;
            }
            Some(per_t.into_iter().map(|(d, n)| interpolated_ap(d, n)).collect())
        })
        .collect()
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// COCO-style mask AP over images. At most `cfg.max_dets` detections per
/// image and class are considered.
pub fn evaluate(predictions: &[Vec<Detection>], ground_truth: &[Vec<GroundTruth>], num_classes: usize, cfg: &EvalConfig) -> Result<EvalReport> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} prediction sets for {} images",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let mut cells = Vec::with_capacity(predictions.len());
    for (dets, gts) in predictions.iter().zip(ground_truth) {
        let mut per_class = Vec::with_capacity(num_classes);
        for c in 0..num_classes {
            let mut d: Vec<&Detection> = dets.iter().filter(|d| d.class == c).collect();
            d.sort_by(|a, b| b.score.total_cmp(&a.score));
            d.truncate(cfg.max_dets);
            let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == c).collect();
            let ious = d
                .iter()
                .map(|det| g.iter().map(|gt| mask_iou(det.mask(), &gt.mask)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            per_class.push(ImageClass { dets: d, gts: g, ious });
        }
        if dets.iter().any(|d| d.class >= num_classes) || gts.iter().any(|g| g.class >= num_classes) {
            return Err(Error::DimensionMismatch(format!("class id outside 0..{num_classes}")));
        }
        cells.push(per_class);
    }
    let thresholds = iou_thresholds();
    let all = (0.0, f64::INFINITY);
    let grid = ap_grid(&cells, num_classes, &thresholds, all);
    let valid: Vec<&Vec<f64>> = grid.iter().flatten().collect();
    let at = |ti: usize| mean(valid.iter().map(|v| v[ti])).unwrap_or(0.0);
    let ap_per_threshold: Vec<f64> = (0..thresholds.len()).map(at).collect();
    let bucket = |range: (f64, f64)| {
        let g = ap_grid(&cells, num_classes, &thresholds, range);
        mean(g.iter().flatten().flat_map(|v| v.iter().copied()))
    };
    Ok(EvalReport {
        ap: mean(ap_per_threshold.iter().copied()).unwrap_or(0.0),
        ap50: ap_per_threshold[0],
        ap75: ap_per_threshold[5],
        ap_small: bucket((0.0, cfg.area_small)),
        ap_medium: bucket((cfg.area_small, cfg.area_large)),
        ap_large: bucket((cfg.area_large, f64::INFINITY)),
        per_class: grid.iter().map(|g| g.as_ref().and_then(|v| mean(v.iter().copied()))).collect(),
        ap_per_threshold,
        num_detections: predictions.iter().map(Vec::len).sum(),
        num_ground_truth: ground_truth.iter().map(Vec::len).sum(),
    })
}

/// Predicts on every image and evaluates against its instances.
pub fn evaluate_model(net: &Network, store: &ParamStore, images: &[(Tensor, Vec<GroundTruth>)], cfg: &EvalConfig) -> Result<(EvalReport, Vec<Vec<Detection>>)> {
    let preds = images
        .iter()
        .map(|(img, _)| predict(net, store, img, cfg))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<Vec<GroundTruth>> = images.iter().map(|(_, g)| g.clone()).collect();
    let report = evaluate(&preds, &gts, net.config().num_classes, cfg)?;
    Ok((report, preds))
}

/// One line of a prediction dump.
#[derive(Clone, Debug, Serialize)]
pub struct PredictionRecord {
    pub image: usize,
    pub class: usize,
    pub score: f64,
    pub shape: PolarShape,
}

pub fn prediction_records(preds: &[Vec<Detection>]) -> Vec<PredictionRecord> {
    preds
        .iter()
        .enumerate()
        .flat_map(|(image, dets)| {
            dets.iter().map(move |d| PredictionRecord {
                image,
                class: d.class,
                score: d.score,
                shape: d.shape.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModuleCount {
    pub module: String,
    pub count: u64,
}

/// Per-module totals in first-appearance order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Manifest {
    pub modules: Vec<ModuleCount>,
    pub total: u64,
}

impl Manifest {
    fn from_pairs(pairs: impl IntoIterator<Item = (String, u64)>) -> Self {
        let mut modules: Vec<ModuleCount> = Vec::new();
        for (m, n) in pairs {
            match modules.iter_mut().find(|e| e.module == m) {
                Some(e) => e.count += n,
                None => modules.push(ModuleCount { module: m, count: n }),
            }
        }
        let total = modules.iter().map(|m| m.count).sum();
        Self { modules, total }
    }

    pub fn get(&self, module: &str) -> u64 {
        self.modules.iter().find(|m| m.module == module).map_or(0, |m| m.count)
    }
}

/// Parameter totals of a store, grouped by the prefix before the first dot.
pub fn count_params(store: &ParamStore) -> Manifest {
    Manifest::from_pairs(store.iter().map(|(_, p)| (module_of(&p.name).to_string(), p.tensor.len() as u64)))
}

/// Parameter totals implied by a config, without allocating weights.
pub fn count_params_for(cfg: &ModelConfig) -> Result<Manifest> {
    Ok(Manifest::from_pairs(param_specs(cfg)?.into_iter().map(|s| {
        let n = s.len() as u64;
        (s.module().to_string(), n)
    })))
}

/// Multiply-accumulates per module for an `height x width` input.
pub fn count_flops(cfg: &ModelConfig, height: usize, width: usize, inference: bool) -> Result<Manifest> {
    Ok(Manifest::from_pairs(count_macs(cfg, height, width, inference)?))
}

const PALETTE: [[u8; 3]; 6] = [[255, 60, 60], [60, 220, 60], [70, 120, 255], [255, 200, 0], [255, 0, 255], [0, 230, 230]];

/// Binary PPM of the image with each detection's outline in its class colour.
pub fn render_overlay(image: &Tensor, dets: &[Detection]) -> Result<Vec<u8>> {
    let s = image.shape();
    let &[3, h, w] = s else {
        return Err(Error::shape("render_overlay", format!("image must be [3,H,W], got {s:?}")));
    };
    let v = image.values();
    let mut rgb = vec![0u8; h * w * 3];
    for i in 0..h * w {
        for ch in 0..3 {
            rgb[i * 3 + ch] = (v[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    for d in dets {
        let m = d.mask();
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::DimensionMismatch(format!("detection for {}x{} on {h}x{w}", m.height(), m.width())));
        }
        let color = PALETTE[d.class % PALETTE.len()];
        for (i, j) in m.foreground() {
            let (ii, jj) = (i as isize, j as isize);
            let edge = [(0, 1), (1, 0), (0, -1), (-1, 0)].iter().any(|(a, b)| !m.get_signed(ii + a, jj + b));
            if edge {
                rgb[(i * w + j) * 3..(i * w + j) * 3 + 3].copy_from_slice(&color);
            }
        }
    }
    Ok(encode_ppm(w, h, &rgb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LevelOutputs;

    fn square(r0: usize, c0: usize, side: usize) -> BitMask {
        BitMask::from_fn(32, 32, |i, j| i >= r0 && i < r0 + side && j >= c0 && j < c0 + side).unwrap()
    }

    fn det_from_mask(class: usize, score: f64, m: &BitMask) -> Detection {
        let shape = PolarShape::new((16.0, 16.0), vec![1.0; 8]).unwrap();
        let d = Detection::new(class, score, shape, m.height(), m.width());
        d.mask.set(m.clone()).unwrap();
        d
    }

    fn gt(class: usize, m: BitMask) -> GroundTruth {
        GroundTruth { class, mask: m }
    }

    fn cfg() -> EvalConfig {
        EvalConfig::default()
    }

    fn single_level(cls: Vec<f64>, cnt: Vec<f64>) -> HeadOutputs {
        let n = 8;
        HeadOutputs {
            levels: vec![LevelOutputs {
                stride: 8,
                height: 2,
                width: 2,
                cls_logits: Tensor::new(vec![1, 2, 2], cls).unwrap(),
                centerness_logits: Tensor::new(vec![1, 2, 2], cnt).unwrap(),
                coarse_radii: Tensor::filled(&[n, 2, 2], 5.0),
                fine_radii: None,
            }],
            hbb_logits: None,
        }
    }

    #[test]
    fn decode_empty_and_forced_product() {
        let ninf = f64::NEG_INFINITY;
        assert!(decode_detections(&single_level(vec![ninf; 4], vec![ninf; 4]), 16, 16, 0.05, 10).is_empty());
        let logit = (0.9f64 / 0.1).ln();
        let dets = decode_detections(&single_level(vec![logit, ninf, ninf, ninf], vec![f64::INFINITY; 4]), 16, 16, 0.05, 10);
        assert_eq!(dets.len(), 1);
        assert!((dets[0].score - 0.9).abs() < 1e-12);
        assert_eq!(dets[0].shape.center(), (4.0, 4.0));
    }

    #[test]
    fn nms_cases() {
        let a = square(0, 0, 10);
        let d = nms(vec![det_from_mask(0, 0.9, &a), det_from_mask(0, 0.8, &a)], 0.5);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].score, 0.9);
        let d = nms(vec![det_from_mask(0, 0.9, &a), det_from_mask(1, 0.8, &a)], 0.5);
        assert_eq!(d.len(), 2, "suppression is class-wise");
        let b = square(20, 20, 10);
        assert_eq!(nms(vec![det_from_mask(0, 0.5, &a), det_from_mask(0, 0.6, &b)], 0.5).len(), 2);
    }

    #[test]
    fn nms_chain() {
        // A overlaps B, B overlaps C, A and C disjoint.
        let a = square(0, 0, 10);
        let b = square(0, 3, 10);
        let c = square(0, 13, 10);
        let out = nms(
            vec![det_from_mask(0, 0.7, &c), det_from_mask(0, 0.9, &a), det_from_mask(0, 0.8, &b)],
            0.5,
        );
        let scores: Vec<f64> = out.iter().map(|d| d.score).collect();
        assert_eq!(scores, vec![0.9, 0.7]);
    }

    #[test]
    fn perfect_and_missing() {
        let m = square(4, 4, 8);
        let r = evaluate(&[vec![det_from_mask(0, 0.9, &m)]], &[vec![gt(0, m.clone())]], 1, &cfg()).unwrap();
        assert_eq!(r.ap, 1.0);
        assert!(r.ap_per_threshold.iter().all(|&v| v == 1.0));
        let r = evaluate(&[vec![]], &[vec![gt(0, m)]], 1, &cfg()).unwrap();
        assert_eq!(r.ap, 0.0);
    }

    #[test]
    fn partial_match_threshold_enumeration() {
        // GT a (10x10) matched by a det with IoU 0.6; GT b missed.
        let a = square(0, 0, 10);
        let p = BitMask::from_fn(32, 32, |i, j| (i < 10 && j < 10) || ((10..16).contains(&i) && j < 11)).unwrap();
        let iou = mask_iou(&p, &a).unwrap();
        assert!(iou >= 0.6 && iou < 0.65, "{iou}");
        let b = square(20, 20, 8);
        let r = evaluate(&[vec![det_from_mask(0, 0.9, &p)]], &[vec![gt(0, a), gt(0, b)]], 1, &cfg()).unwrap();
        // TP with recall 0.5 at precision 1: 51 of 101 recall points.
        for (t, ap) in iou_thresholds().iter().zip(&r.ap_per_threshold) {
            let expect = if *t <= iou { 51.0 / 101.0 } else { 0.0 };
            assert!((ap - expect).abs() < 1e-12, "t={t}: {ap}");
        }
    }

    #[test]
    fn ap_monotone_in_additions() {
        let a = square(0, 0, 8);
        let b = square(16, 16, 8);
        let gts = vec![vec![gt(0, a.clone()), gt(0, b.clone())]];
        let base = evaluate(&[vec![det_from_mask(0, 0.9, &a)]], &gts, 1, &cfg()).unwrap().ap;
        let more = evaluate(&[vec![det_from_mask(0, 0.9, &a), det_from_mask(0, 0.5, &b)]], &gts, 1, &cfg()).unwrap().ap;
        let dup = evaluate(&[vec![det_from_mask(0, 0.9, &a), det_from_mask(0, 0.95, &a)]], &gts, 1, &cfg()).unwrap().ap;
        assert!(more >= base);
        assert!(dup <= base);
    }

    #[test]
    fn size_buckets_and_classes() {
        let small = square(0, 0, 4);
        let large = square(8, 8, 24);
        let c = EvalConfig {
            area_small: 32.0,
            area_large: 256.0,
            ..cfg()
        };
        let r = evaluate(&[vec![det_from_mask(1, 0.9, &large)]], &[vec![gt(0, small), gt(1, large)]], 3, &c).unwrap();
        assert_eq!(r.ap_large, Some(1.0));
        assert_eq!(r.ap_small, Some(0.0));
        assert_eq!(r.ap_medium, None);
        assert_eq!(r.per_class, vec![Some(0.0), Some(1.0), None]);
        assert_eq!(r.ap, 0.5);
    }

    #[test]
    fn dimension_mismatch() {
        let a = square(0, 0, 4);
        let other = BitMask::new(16, 16).unwrap();
        assert!(evaluate(&[vec![det_from_mask(0, 0.9, &a)]], &[vec![gt(0, other)]], 1, &cfg()).is_err());
        assert!(evaluate(&[], &[vec![]], 1, &cfg()).is_err());
    }

    #[test]
    fn empty_config_counts_nothing() {
        let m = count_params(&ParamStore::new());
        assert_eq!((m.total, m.modules.len()), (0, 0));
    }

    #[test]
    fn overlay_is_ppm() {
        let img = Tensor::filled(&[3, 32, 32], 0.5);
        let bytes = render_overlay(&img, &[det_from_mask(0, 0.9, &square(2, 2, 6))]).unwrap();
        assert!(bytes.starts_with(b"P6\n32 32\n255\n"));
        assert_eq!(bytes.len(), 13 + 32 * 32 * 3);
    }
}
