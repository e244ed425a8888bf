//! Central finite-difference gradient checking.

use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Relative error used by the checks: `|a − n| / max(1e-12, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, 1e-12)
}

/// `|a − n| / max(floor, |a| + |n|)`. A floor near the finite-difference
/// noise level (`ulp(f) / eps`) keeps near-zero gradients from dominating.
pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

/// Maximum relative error between the autodiff gradient of scalar `f` at `x`
/// and its central-difference estimate with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)
}

/// Like [`grad_check`], checking every coordinate of every input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_floored(f, inputs, eps, 1e-12)
}

/// [`grad_check_many`] with [`relative_error_floored`].
pub fn grad_check_floored<F>(f: F, inputs: &[Tensor], eps: f64, floor: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(invalid!("grad_check: eps must be positive, got {eps}"));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).expect("param leaf has a gradient").data().to_vec();
        for (k, &a) in analytic.iter().enumerate() {
            let x0 = inputs[which].data()[k];
            probe[which].data_mut()[k] = x0 + eps;
            let plus = eval(&probe)?;
            probe[which].data_mut()[k] = x0 - eps;
            let minus = eval(&probe)?;
            probe[which].data_mut()[k] = x0;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error_floored(a, numeric, floor));
        }
    }
    Ok(worst)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(invalid!("grad_check: function must be scalar, got shape {:?}", t.shape()));
    }
    let y = t.data()[0];
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("grad_check: f(x) = {y}")));
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_sum_is_tight() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = grad_check(
            |g, x| {
                let y = g.mul(x, x)?;
                Ok(g.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn plain_sum_is_exact() {
        let x = Tensor::vector(vec![0.3, -7.0, 1e3]);
        let err = grad_check(|g, x| Ok(g.sum(x)), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn tanh_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::vector((0..5).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let err = grad_check(
            |g, x| {
                let y = g.tanh(x);
                Ok(g.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn floor_only_affects_tiny_gradients() {
        assert_eq!(relative_error_floored(1.0, 0.9, 1e-6), relative_error(1.0, 0.9));
        assert!(relative_error(1e-9, 2e-9) > 0.3);
        assert!(relative_error_floored(1e-9, 2e-9, 1e-5) < 1e-3);
    }

    #[test]
    fn rejects_bad_eps_and_non_finite() {
        let x = Tensor::vector(vec![1.0]);
        assert!(grad_check(|g, x| Ok(g.sum(x)), &x, 0.0).is_err());
        let x = Tensor::vector(vec![f64::INFINITY]);
        assert!(matches!(
            grad_check(|g, x| Ok(g.sum(x)), &x, 1e-5),
            Err(Error::NonFinite(_))
        ));
    }
}
