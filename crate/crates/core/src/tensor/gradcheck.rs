//! Central finite-difference checking of graph gradients.

use super::array::Tensor;
use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// Largest per-coordinate relative error between the graph gradient of `f` at
/// `x` and a central difference with step `eps`.
///
/// The relative error of a coordinate is `|a − n| / max(1, |a|, |n|)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_difference_check_multi(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)
}

/// As [`finite_difference_check`], over several inputs at once; the result is
/// the maximum over all coordinates of all inputs.
pub fn finite_difference_check_multi<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::domain(
            "finite_difference_check",
            format!("eps {eps} outside [1e-6, 1e-4]"),
        ));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let denom = 1f64.max(a.abs()).max(numeric.abs());
            let err = (a - numeric).abs() / denom;
            if !err.is_finite() {
                return Err(Error::non_finite(format!("gradient check of input {k} coordinate {i}")));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact_with_dyadic_step() {
        let x = Tensor::matrix(2, 2, vec![1.0, -3.0, 0.5, 2.0]).unwrap();
        let eps = 2f64.powi(-17);
        let err = finite_difference_check(|g, v| Ok(g.reduce_sum(v)), &x, eps).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn exp_gradient_at_one_is_e() {
        let x = Tensor::vector(vec![1.0]);
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let e = g.exp(v);
        let s = g.reduce_sum(e);
        g.backward(s).unwrap();
        assert!((g.grad(v).unwrap().item() - std::f64::consts::E).abs() < 1e-15);
        let err = finite_difference_check(
            |g, v| {
                let e = g.exp(v);
                Ok(g.reduce_sum(e))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9);
    }

    #[test]
    fn rejects_eps_out_of_range() {
        let x = Tensor::vector(vec![1.0]);
        assert!(finite_difference_check(|g, v| Ok(g.reduce_sum(v)), &x, 1e-2).is_err());
    }

    #[test]
    fn detects_a_wrong_gradient_rule() {
        // value x², but claims derivative x
        let x = Tensor::vector(vec![0.7, -1.3, 2.0]);
        let err = finite_difference_check(
            |g, v| {
                let xv = g.value(v).clone();
                let value = xv.data().iter().map(|x| x * x).sum();
                g.fused_scalar(value, vec![(v, xv)])
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 1e-2, "harness missed a wrong rule: {err}");
    }
}
