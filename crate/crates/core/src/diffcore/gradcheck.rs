use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

/// Denominator floor of the relative error, so exactly-zero gradients compare
/// on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Analytic-vs-central-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, coordinate, analytic, numeric)` for every coordinate over `tol`.
    pub flagged: Vec<(usize, usize, f64, f64)>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

pub(crate) fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

struct Accum {
    report: GradCheckReport,
}

impl Accum {
    fn new(tol: f64) -> Self {
        Self {
            report: GradCheckReport {
                max_rel_error: 0.0,
                flagged: Vec::new(),
                checked: 0,
                tol,
            },
        }
    }

    fn push(&mut self, input: usize, coord: usize, analytic: f64, numeric: f64) {
        let e = rel_error(analytic, numeric);
        let r = &mut self.report;
        r.checked += 1;
        if e > r.max_rel_error || e.is_nan() {
            r.max_rel_error = if e.is_nan() { f64::INFINITY } else { e };
        }
        if !(e <= r.tol) {
            r.flagged.push((input, coord, analytic, numeric));
        }
    }
}

/// Checks the gradient of scalar-valued `f` w.r.t. every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar_value(out))
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut acc = Accum::new(tol);
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let orig = inputs[i].values()[j];
            probe[i].values_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe[i].values_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe[i].values_mut()[j] = orig;
            acc.push(i, j, analytic[j], (up - down) / (2.0 * h));
        }
    }
    Ok(acc.report)
}

/// Checks the gradient of `f` w.r.t. selected parameter coordinates.
/// `probes` lists `(parameter, flat index)` pairs.
pub fn grad_check_params<F>(f: F, store: &ParamStore, probes: &[(ParamId, usize)], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;
    let mut acc = Accum::new(tol);
    let mut probe = store.clone();
    for (n, &(id, j)) in probes.iter().enumerate() {
        let analytic = grads.param(id).map_or(0.0, |s| s[j]);
        let orig = store.get(id).tensor.values()[j];
        let mut eval_at = |v: f64| -> Result<f64> {
            probe.get_mut(id).tensor.values_mut()[j] = v;
            let mut g = Graph::new();
            let out = f(&mut g, &probe)?;
            Ok(g.scalar_value(out))
        };
        let up = eval_at(orig + h)?;
        let down = eval_at(orig - h)?;
        probe.get_mut(id).tensor.values_mut()[j] = orig;
        acc.push(n, j, analytic, (up - down) / (2.0 * h));
    }
    Ok(acc.report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_fn(&[6], |i| i as f64 * 0.3 - 1.0);
        let report = grad_check(
            |g, v| {
                let y = g.scale(v[0], 2.5);
                Ok(g.sum(y))
            },
            &[x],
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert!(report.passed());
        assert_eq!(report.checked, 6);
    }

    #[test]
    fn kink_of_bilinear_kernel_is_flagged() {
        let feats = Tensor::from_fn(&[1, 3, 3], |i| ((i * i) as f64 * 0.7).sin());
        let pts = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let report = grad_check(
            |g, v| {
                let s = g.bilinear_sample(v[0], v[1])?;
                Ok(g.sum(s))
            },
            &[feats, pts],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.flagged.iter().all(|f| f.0 == 1), "only coordinates are non-smooth");
    }
}
