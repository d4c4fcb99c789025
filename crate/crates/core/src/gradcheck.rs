//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    /// Max relative error per parameter tensor.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    /// (parameter, flat coordinate) where the max was attained.
    pub worst: (usize, usize),
    pub step: f64,
}

impl GradientReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Builds `objective` on a fresh tape with `params` as leaves, differentiates
/// it in reverse mode and compares against central differences.
pub fn finite_difference_check<F>(objective: F, params: &[Tensor], eps: f64) -> Result<GradientReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&objective, params)?;
    let value = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|t| g.leaf(t.clone())).collect();
        let out = objective(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    compare_with_finite_differences(value, params, &analytic, eps)
}

pub fn analytic_gradients<F>(objective: &F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.leaf(t.clone())).collect();
    let out = objective(&mut g, &vars)?;
    let grads = g.backward(out)?;
    Ok(vars.iter().map(|&v| grads.get(v)).collect())
}

/// Compares supplied gradients with `(f(θ+εe) − f(θ−εe)) / 2ε` coordinate by
/// coordinate; relative error uses the denominator `max(|a|, |b|, 1e-8)`.
pub fn compare_with_finite_differences<F>(value: F, params: &[Tensor], analytic: &[Tensor], eps: f64) -> Result<GradientReport>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    ensure!(eps > 0.0, "finite-difference step must be positive, got {}", eps);
    ensure!(params.len() == analytic.len(), "{} parameters but {} gradients", params.len(), analytic.len());
    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel_error = 0.0;
    let mut worst = (0, 0);
    for p in 0..params.len() {
        ensure!(analytic[p].shape() == params[p].shape(), "gradient {} has shape {:?}, parameter {:?}", p, analytic[p].shape(), params[p].shape());
        let mut param_max = 0.0f64;
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let plus = value(&work)?;
            work[p].data_mut()[i] = orig - eps;
            let minus = value(&work)?;
            work[p].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite { context: format!("objective perturbed at parameter {p}"), index: i });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_error(analytic[p].data()[i], numeric);
            if err > param_max {
                param_max = err;
            }
            if err > max_rel_error {
                max_rel_error = err;
                worst = (p, i);
            }
        }
        per_param.push(param_max);
    }
    Ok(GradientReport { per_param, max_rel_error, worst, step: eps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(g: &mut Graph, v: &[Var]) -> Result<Var> {
        // f(x) = sum(x * x) + 3 * sum(x)
        let sq = g.mul(v[0], v[0])?;
        let a = g.sum(sq);
        let s = g.sum(v[0]);
        let b = g.scale(s, 3.0);
        g.add(a, b)
    }

    #[test]
    fn quadratic_passes_tightly() {
        let x = Tensor::new(vec![4], vec![0.5, -1.25, 2.0, 3.5]).unwrap();
        let report = finite_difference_check(quadratic, &[x.clone()], 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-7, "{:?}", report);
        // the analytic gradient itself agrees with the closed form 2x + 3
        let grads = analytic_gradients(&quadratic, &[x.clone()]).unwrap();
        for (g, v) in grads[0].data().iter().zip(x.data()) {
            assert_eq!(*g, 2.0 * v + 3.0);
        }
    }

    #[test]
    fn scaled_gradient_is_reported_as_unit_error() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, -0.7]).unwrap();
        let mut grads = analytic_gradients(&quadratic, &[x.clone()]).unwrap();
        grads[0].data_mut().iter_mut().for_each(|v| *v *= 2.0);
        let value = |ps: &[Tensor]| -> Result<f64> {
            let mut g = Graph::new();
            let v = g.leaf(ps[0].clone());
            let out = quadratic(&mut g, &[v])?;
            Ok(g.value(out).item())
        };
        let report = compare_with_finite_differences(value, &[x], &grads, 1e-5).unwrap();
        // |2a - a| / |2a| = 1/2 per coordinate
        assert!((report.max_rel_error - 0.5).abs() < 1e-6, "{:?}", report);
    }

    #[test]
    fn non_finite_objective_names_the_coordinate() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let value = |ps: &[Tensor]| -> Result<f64> { Ok(if ps[0].data()[1] > 2.0 { f64::NAN } else { 0.0 }) };
        let err = compare_with_finite_differences(value, &[x.clone()], &[Tensor::zeros(&[2])], 1e-5).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }), "{err}");
        assert!(compare_with_finite_differences(value, &[x], &[Tensor::zeros(&[2])], 0.0).is_err());
    }
}
