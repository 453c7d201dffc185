//! Training objectives as fused graph ops with analytic backward passes.

use serde::Serialize;

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the coarse radius loss.
    pub alpha: f64,
    /// Focal focusing parameter, shared by classification and boundary maps.
    pub gamma: f64,
    /// Focal weight of positives; negatives get `1 - focal_balance`.
    pub focal_balance: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gamma: 2.0,
            focal_balance: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::ConfigInvalid(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::ConfigInvalid(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.focal_balance > 0.0 && self.focal_balance < 1.0) {
            return Err(Error::ConfigInvalid(format!(
                "focal_balance must be in (0,1), got {}",
                self.focal_balance
            )));
        }
        Ok(())
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

use crate::diffcore::sigmoid;

/// Per-element focal loss and its derivative w.r.t. the logit.
fn focal_term(x: f64, positive: bool, gamma: f64, balance: f64) -> (f64, f64) {
    let p = sigmoid(x);
    if positive {
        let log_p = -softplus(-x);
        let m = (1.0 - p).powf(gamma);
        (-balance * m * log_p, balance * m * (gamma * p * log_p - (1.0 - p)))
    } else {
        let log_q = -softplus(x);
        let m = p.powf(gamma);
        let w = 1.0 - balance;
        (-w * m * log_q, -w * m * (gamma * (1.0 - p) * log_q - p))
    }
}

fn check_binary(targets: &[f64]) -> Result<()> {
    match targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
        Some(t) => Err(Error::ConfigInvalid(format!("focal targets must be 0 or 1, got {t}"))),
        None => Ok(()),
    }
}

/// Sigmoid focal loss summed over all elements and divided by the number of
/// positives (at least 1).
pub fn focal_loss(g: &mut Graph, logits: Var, targets: &Tensor, gamma: f64, balance: f64) -> Result<Var> {
    let npos = targets.values().iter().filter(|&&t| t == 1.0).count();
    focal_loss_normalized(g, logits, targets, gamma, balance, npos.max(1) as f64)
}

/// Focal loss divided by an explicit `normalizer`.
pub fn focal_loss_normalized(g: &mut Graph, logits: Var, targets: &Tensor, gamma: f64, balance: f64, normalizer: f64) -> Result<Var> {
    if g.shape(logits) != targets.shape() {
        return Err(Error::shape(
            "focal_loss",
            format!("logits {:?} vs targets {:?}", g.shape(logits), targets.shape()),
        ));
    }
    check_binary(targets.values())?;
    let t: Vec<bool> = targets.values().iter().map(|&v| v == 1.0).collect();
    let mut total = 0.0;
    for (&x, &pos) in g.value(logits).iter().zip(&t) {
        total += focal_term(x, pos, gamma, balance).0;
    }
    Ok(g.custom(
        &[logits],
        vec![1],
        vec![total / normalizer],
        Box::new(move |a| {
            let s = a.grad[0] / normalizer;
            let d = a.inputs[0]
                .iter()
                .zip(&t)
                .map(|(&x, &pos)| s * focal_term(x, pos, gamma, balance).1)
                .collect();
            vec![Some(d)]
        }),
    ))
}

/// `ln(sum_k max(p_k, t_k) / sum_k min(p_k, t_k))`.
pub fn polar_iou(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape("polar_iou", format!("{} vs {} radii", pred.len(), target.len())));
    }
    if let Some(&r) = pred.iter().chain(target).find(|r| !(**r > 0.0)) {
        return Err(Error::NonPositiveRadius(r));
    }
    let (mx, mn) = pred
        .iter()
        .zip(target)
        .fold((0.0, 0.0), |(a, b), (&p, &t)| (a + p.max(t), b + p.min(t)));
    Ok((mx / mn).ln())
}

/// Polar IoU loss of one radius vector against a constant target.
pub fn polar_iou_loss(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    let n = g.value(pred).len();
    let pred2 = g.reshape(pred, &[1, n])?;
    let target = target.clone().reshaped(&[1, n])?;
    polar_iou_loss_weighted(g, pred2, &target, &[1.0])
}

/// `sum_l w_l * polar_iou(pred_l, target_l) / sum_l w_l` over rows of `[L, n]`.
/// Ties `p_k == t_k` go to the max branch. Zero rows give a constant zero.
pub fn polar_iou_loss_weighted(g: &mut Graph, pred: Var, target: &Tensor, weights: &[f64]) -> Result<Var> {
    let ps = g.shape(pred).to_vec();
    let &[l, n] = ps.as_slice() else {
        return Err(Error::shape("polar_iou_loss", format!("pred must be [L, n], got {ps:?}")));
    };
    if target.shape() != ps.as_slice() || weights.len() != l {
        return Err(Error::shape(
            "polar_iou_loss",
            format!("pred {ps:?}, target {:?}, {} weights", target.shape(), weights.len()),
        ));
    }
    let wsum: f64 = weights.iter().sum();
    if l == 0 || wsum <= 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let pv = g.value(pred);
    let tv = target.values().to_vec();
    let mut total = 0.0;
    let mut sums = Vec::with_capacity(l);
    for li in 0..l {
        let row = li * n..(li + 1) * n;
        let (p, t) = (&pv[row.clone()], &tv[row]);
        if let Some(&r) = p.iter().chain(t).find(|r| !(**r > 0.0)) {
            return Err(Error::NonPositiveRadius(r));
        }
        let (mx, mn) = p.iter().zip(t).fold((0.0, 0.0), |(a, b), (&p, &t)| (a + p.max(t), b + p.min(t)));
        total += weights[li] * (mx / mn).ln();
        sums.push((mx, mn));
    }
    let weights = weights.to_vec();
    Ok(g.custom(
        &[pred],
        vec![1],
        vec![total / wsum],
        Box::new(move |a| {
            let pv = a.inputs[0];
            let mut d = vec![0.0; l * n];
            for li in 0..l {
                let s = a.grad[0] * weights[li] / wsum;
                let (mx, mn) = sums[li];
                for k in li * n..(li + 1) * n {
                    d[k] = if pv[k] >= tv[k] { s / mx } else { -s / mn };
                }
            }
            vec![Some(d)]
        }),
    ))
}

/// Polar centerness `sqrt(min r / max r)` of ground-truth radii.
pub fn centerness_target(radii: &[f64]) -> f64 {
    let (mn, mx) = radii.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &r| (a.min(r), b.max(r)));
    if mx <= 0.0 {
        0.0
    } else {
        (mn / mx).sqrt()
    }
}

/// Mean binary cross-entropy between `sigmoid(logits)` and soft targets in `[0,1]`.
pub fn centerness_bce(g: &mut Graph, logits: Var, targets: &[f64]) -> Result<Var> {
    let n = g.value(logits).len();
    if targets.len() != n {
        return Err(Error::shape("centerness_bce", format!("{n} logits vs {} targets", targets.len())));
    }
    if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::ConfigInvalid(format!("centerness target {t} outside [0,1]")));
    }
    if n == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let t = targets.to_vec();
    let total: f64 = g.value(logits).iter().zip(&t).map(|(&x, &t)| softplus(x) - x * t).sum();
    Ok(g.custom(
        &[logits],
        vec![1],
        vec![total / n as f64],
        Box::new(move |a| {
            let s = a.grad[0] / n as f64;
            vec![Some(a.inputs[0].iter().zip(&t).map(|(&x, &t)| s * (sigmoid(x) - t)).collect())]
        }),
    ))
}

/// Loss terms of one scene. Absent terms contribute zero.
#[derive(Clone, Copy, Debug)]
pub struct LossComponents {
    pub cls: Var,
    pub cnt: Var,
    pub coarse: Var,
    pub fine: Option<Var>,
    pub hbb: Option<Var>,
}

/// Logged component values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossValues {
    pub cls: f64,
    pub cnt: f64,
    pub coarse: f64,
    pub fine: f64,
    pub hbb: f64,
    pub total: f64,
}

impl LossValues {
    pub fn accumulate(&mut self, other: &LossValues, weight: f64) {
        self.cls += weight * other.cls;
        self.cnt += weight * other.cnt;
        self.coarse += weight * other.coarse;
        self.fine += weight * other.fine;
        self.hbb += weight * other.hbb;
        self.total += weight * other.total;
    }

    pub fn is_finite(&self) -> bool {
        [self.cls, self.cnt, self.coarse, self.fine, self.hbb, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `L_cls + L_cnt + alpha * L_coarse + L_fine + L_hbb`. With `implicit_coarse`
/// the coarse term is left out of the graph entirely.
pub fn total_loss(g: &mut Graph, c: &LossComponents, alpha: f64, implicit_coarse: bool) -> Result<(Var, LossValues)> {
    let mut terms = vec![c.cls, c.cnt];
    if !implicit_coarse {
        terms.push(g.scale(c.coarse, alpha));
    }
    terms.extend(c.fine);
    terms.extend(c.hbb);
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let v = |g: &Graph, x: Option<Var>| x.map_or(0.0, |x| g.scalar_value(x));
    let values = LossValues {
        cls: g.scalar_value(c.cls),
        cnt: g.scalar_value(c.cnt),
        coarse: g.scalar_value(c.coarse),
        fine: v(g, c.fine),
        hbb: v(g, c.hbb),
        total: g.scalar_value(total),
    };
    Ok((total, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { gamma: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { focal_balance: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn focal_confident_positives_vanish() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[4], 40.0));
        let l = focal_loss(&mut g, x, &Tensor::filled(&[4], 1.0), 2.0, 0.25).unwrap();
        assert!(g.scalar_value(l) < 1e-15);
    }

    #[test]
    fn focal_gamma_zero_is_half_cross_entropy() {
        let logits = vec![-2.0, 0.3, 1.7, -0.1, 4.0];
        let targets = vec![1.0, 0.0, 1.0, 0.0, 0.0];
        let mut g = Graph::new();
        let x = g.constant(t(&[5], logits.clone()));
        let l = focal_loss(&mut g, x, &t(&[5], targets.clone()), 0.0, 0.5).unwrap();
        let ce: f64 = logits
            .iter()
            .zip(&targets)
            .map(|(&x, &y)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 2.0;
        assert!((g.scalar_value(l) - 0.5 * ce).abs() < 1e-12);
    }

    #[test]
    fn focal_rejects_non_binary_and_shape() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2]));
        assert!(focal_loss(&mut g, x, &t(&[2], vec![0.5, 1.0]), 2.0, 0.25).is_err());
        assert!(focal_loss(&mut g, x, &Tensor::zeros(&[3]), 2.0, 0.25).is_err());
    }

    #[test]
    fn focal_gradient() {
        let logits = Tensor::from_fn(&[7], |i| (i as f64 * 1.3).sin() * 3.0);
        let targets = t(&[7], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        for gamma in [0.0, 1.5, 2.0] {
            let r = grad_check(
                |g, v| focal_loss(g, v[0], &targets, gamma, 0.25),
                &[logits.clone()],
                1e-5,
                1e-6,
            )
            .unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn polar_iou_examples() {
        let target: Vec<f64> = (0..36).map(|k| 5.0 + (k as f64 * 0.4).cos()).collect();
        let double: Vec<f64> = target.iter().map(|v| 2.0 * v).collect();
        assert_eq!(polar_iou(&target, &target).unwrap(), 0.0);
        assert!((polar_iou(&double, &target).unwrap() - 2f64.ln()).abs() < 1e-12);
        let other: Vec<f64> = (0..36).map(|k| 4.0 + (k as f64 * 0.9).sin()).collect();
        assert_eq!(polar_iou(&other, &target).unwrap(), polar_iou(&target, &other).unwrap());
        assert!(matches!(polar_iou(&[1.0, 0.0, 1.0], &[1.0; 3]), Err(Error::NonPositiveRadius(_))));

        let mut g = Graph::new();
        let p = g.constant(t(&[36], double));
        let l = polar_iou_loss(&mut g, p, &t(&[36], target)).unwrap();
        assert!((g.scalar_value(l) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn polar_iou_gradient_and_weighting() {
        let pred = Tensor::from_fn(&[3, 6], |i| 2.0 + (i as f64 * 0.77).sin());
        let target = Tensor::from_fn(&[3, 6], |i| 2.0 + (i as f64 * 0.31).cos());
        let w = [0.2, 1.0, 0.7];
        let r = grad_check(|g, v| polar_iou_loss_weighted(g, v[0], &target, &w), &[pred.clone()], 1e-6, 1e-6).unwrap();
        assert!(r.passed(), "{r:?}");
        let mut g = Graph::new();
        let p = g.constant(pred.clone());
        let l = polar_iou_loss_weighted(&mut g, p, &target, &w).unwrap();
        let want: f64 = (0..3)
            .map(|i| w[i] * polar_iou(&pred.values()[i * 6..i * 6 + 6], &target.values()[i * 6..i * 6 + 6]).unwrap())
            .sum::<f64>()
            / w.iter().sum::<f64>();
        assert!((g.scalar_value(l) - want).abs() < 1e-14);
        let empty = g.constant(Tensor::zeros(&[0, 6]));
        let z = polar_iou_loss_weighted(&mut g, empty, &Tensor::zeros(&[0, 6]), &[]).unwrap();
        assert_eq!(g.scalar_value(z), 0.0);
    }

    #[test]
    fn centerness_examples() {
        assert_eq!(centerness_target(&[3.0; 36]), 1.0);
        let mut r = vec![1.0; 36];
        r[35] = 4.0;
        assert_eq!(centerness_target(&r), 0.5);
        // BCE is minimised at logit(target)
        let target = 0.3f64;
        let opt = (target / (1.0 - target)).ln();
        let at = |x: f64| {
            let mut g = Graph::new();
            let v = g.constant(Tensor::scalar(x));
            let l = centerness_bce(&mut g, v, &[target]).unwrap();
            g.scalar_value(l)
        };
        assert!(at(opt) < at(opt + 0.05) && at(opt) < at(opt - 0.05));
        let logits = Tensor::from_fn(&[5], |i| i as f64 - 2.5);
        let tg = [0.1, 0.9, 0.5, 1.0, 0.0];
        let rep = grad_check(|g, v| centerness_bce(g, v[0], &tg), &[logits], 1e-5, 1e-6).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn total_loss_arithmetic_and_implicit() {
        let mut g = Graph::new();
        let c = LossComponents {
            cls: g.constant(Tensor::scalar(1.0)),
            cnt: g.constant(Tensor::scalar(1.0)),
            coarse: g.input(Tensor::scalar(2.0)),
            fine: Some(g.constant(Tensor::scalar(1.0))),
            hbb: Some(g.constant(Tensor::scalar(1.0))),
        };
        let (l, v) = total_loss(&mut g, &c, 0.5, false).unwrap();
        assert_eq!(g.scalar_value(l), 5.0);
        assert_eq!(v.total, 5.0);
        assert_eq!(g.backward(l).unwrap().get(c.coarse).unwrap(), &[0.5]);
        let (l2, v2) = total_loss(&mut g, &c, 0.5, true).unwrap();
        assert_eq!(v2.total, 4.0);
        assert!(g.backward(l2).unwrap().get(c.coarse).is_none());
    }
}
