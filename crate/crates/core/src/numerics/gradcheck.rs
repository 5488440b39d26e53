//! Central-difference verification of recorded gradients.

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{ensure, Result};

pub const DEFAULT_STEP: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Label of the coordinate with the largest error.
    pub worst: String,
}

impl GradCheckReport {
    fn empty() -> Self {
        GradCheckReport { max_rel_error: 0.0, coordinates: 0, worst: String::new() }
    }

    fn record(&mut self, analytic: f64, numeric: f64, label: impl FnOnce() -> String) {
        let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
        self.coordinates += 1;
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = label();
        }
    }
}

fn eval_scalar<F>(store: &ParamStore, f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::inference(store);
    let xv = g.constant(x.clone());
    let out = f(&mut g, xv)?;
    ensure!(g.value(out).len() == 1, Shape, "gradient_check needs a scalar function");
    let v = g.scalar(out);
    ensure!(v.is_finite(), NonFinite, "f(x) = {v}");
    Ok(v)
}

/// Checks the gradient of a scalar function of one input tensor.
pub fn gradient_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    ensure!(h > 0.0, Invalid, "step must be positive");
    let store = ParamStore::new();
    let analytic = {
        let mut g = Graph::inference(&store);
        let xv = g.leaf(x.clone(), true);
        let out = f(&mut g, xv)?;
        ensure!(g.value(out).len() == 1, Shape, "gradient_check needs a scalar function");
        ensure!(g.scalar(out).is_finite(), NonFinite, "f(x) = {}", g.scalar(out));
        let grads = g.backward(out)?;
        grads.wrt(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()])
    };
    let mut report = GradCheckReport::empty();
    let mut probe = x.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval_scalar(&store, &f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval_scalar(&store, &f, &probe)?;
        probe.data_mut()[i] = orig;
        report.record(a, (plus - minus) / (2.0 * h), || format!("x[{i}]"));
    }
    Ok(report)
}

/// Checks gradients of a scalar function of the parameters in `store`.
///
/// `ids` selects the tensors to probe; `max_coords` caps how many evenly
/// strided coordinates of each tensor are perturbed.
pub fn gradient_check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    f: F,
    h: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    ensure!(h > 0.0, Invalid, "step must be positive");
    let grads = {
        let mut g = Graph::new(store);
        g.set_train(false);
        let out = f(&mut g)?;
        ensure!(g.value(out).len() == 1, Shape, "gradient_check needs a scalar function");
        g.backward(out)?.into_params()
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference(s);
        let out = f(&mut g)?;
        let v = g.scalar(out);
        ensure!(v.is_finite(), NonFinite, "f = {v}");
        Ok(v)
    };
    let mut work = store.clone();
    let mut report = GradCheckReport::empty();
    for &id in ids {
        let n = store.get(id).numel();
        let stride = max_coords.map_or(1, |cap| n.div_ceil(cap.max(1)));
        for i in (0..n).step_by(stride) {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let analytic = grads.get(id).map_or(0.0, |g| g[i]);
            report.record(analytic, (plus - minus) / (2.0 * h), || format!("{}[{i}]", store.name(id)));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let r = gradient_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &Tensor::row(&[3.0]),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.coordinates, 1);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let r = gradient_check(|g, _x| Ok(g.constant(Tensor::scalar(4.2))), &Tensor::row(&[1.0, 2.0]), DEFAULT_STEP)
            .unwrap();
        assert!(r.max_rel_error <= 1e-8);
    }

    #[test]
    fn non_finite_function_is_rejected() {
        let r = gradient_check(|g, x| {
                let y = g.scale(x, f64::NAN);
                Ok(g.sum(y))
            }, &Tensor::row(&[1.0]), DEFAULT_STEP);
        assert!(r.is_err());
    }
}
