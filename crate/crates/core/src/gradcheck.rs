//! Finite-difference verification of [`Graph::backward`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Builds a scalar output from parameter leaves.
pub trait ScalarFn: Fn(&mut Graph, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph, &[Var]) -> Result<Var>> ScalarFn for F {}

/// Evaluates `f` at `params` without recording gradients.
pub fn eval_scalar(f: &impl ScalarFn, params: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out);
    if value.numel() != 1 {
        return Err(Error::shape("grad_check", format!("scalar output required, got {:?}", value.shape())));
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check"));
    }
    Ok(v)
}

/// Analytic gradients of `f` with respect to every parameter tensor.
pub fn analytic_gradients(f: &impl ScalarFn, params: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect())
}

/// Relative error between an analytic and a finite-difference derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Central difference at one coordinate with step `1e-5·max(1, |θ|)`.
pub fn central_difference(
    f: &impl ScalarFn,
    params: &[Tensor],
    tensor: usize,
    index: usize,
) -> Result<f64> {
    let theta = params[tensor].data()[index];
    let h = 1e-5 * theta.abs().max(1.0);
    let mut shifted = params.to_vec();
    shifted[tensor].data_mut()[index] = theta + h;
    let plus = eval_scalar(f, &shifted)?;
    shifted[tensor].data_mut()[index] = theta - h;
    let minus = eval_scalar(f, &shifted)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Compares supplied analytic gradients against central differences at
/// `n_samples` coordinates drawn without replacement (all coordinates when
/// fewer exist). Returns the maximum relative error.
pub fn compare_gradients(
    f: &impl ScalarFn,
    params: &[Tensor],
    analytic: &[Tensor],
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.numel()).map(move |i| (t, i)))
        .collect();
    if coords.is_empty() {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, coords.len(), n_samples.min(coords.len()));
    let mut worst: f64 = 0.0;
    for k in picks.iter() {
        let (t, i) = coords[k];
        let numeric = central_difference(f, params, t, i)?;
        worst = worst.max(relative_error(analytic[t].data()[i], numeric));
    }
    Ok(worst)
}

/// Maximum relative error between backward-mode and finite-difference
/// gradients of `f` over `n_samples` random parameter coordinates.
pub fn grad_check(f: &impl ScalarFn, params: &[Tensor], n_samples: usize, seed: u64) -> Result<f64> {
    eval_scalar(f, params)?;
    let analytic = analytic_gradients(f, params)?;
    compare_gradients(f, params, &analytic, n_samples, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_squares(g: &mut Graph, p: &[Var]) -> Result<Var> {
        let sq = g.mul(p[0], p[0])?;
        g.sum_all(sq)
    }

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(&[0.3, -1.7, 4.0, 12.5]).unwrap();
        let err = grad_check(&sum_squares, &[x], 4, 0).unwrap();
        assert!(err <= 1e-8, "err = {err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let x = Tensor::vector(&[0.5, -2.0, 3.0]).unwrap();
        let mut analytic = analytic_gradients(&sum_squares, std::slice::from_ref(&x)).unwrap();
        analytic[0].data_mut().iter_mut().for_each(|g| *g *= 2.0);
        let err = compare_gradients(&sum_squares, &[x], &analytic, 3, 1).unwrap();
        assert!((err - 1.0 / 3.0).abs() < 1e-6, "err = {err}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let f = |g: &mut Graph, p: &[Var]| -> Result<Var> {
            let s = g.sum_all(p[0])?;
            g.scale(s, f64::INFINITY)
        };
        let x = Tensor::vector(&[1.0]).unwrap();
        assert!(grad_check(&f, &[x], 1, 0).is_err());
    }
}
