//! Central finite-difference gradients for verifying backward passes.
//!
//! This is the oracle every analytic gradient in the crate is tested
//! against. It only evaluates the supplied closure; it shares no code with
//! the backward implementations it checks.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::volume::Volume5;

/// Central-difference gradient of `f` with respect to every element of the
/// named parameter: `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn finite_diff_gradient<F>(
    f: F,
    params: &ParamStore,
    name: &str,
    eps: f64,
) -> Result<Volume5>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::argument(format!("eps must be positive, got {eps}")));
    }
    let numel = params.value(name)?.numel();
    let indices: Vec<usize> = (0..numel).collect();
    let flat = finite_diff_at_indices(&f, params, name, eps, &indices)?;
    let mut out = Volume5::zeros_like(params.value(name)?);
    out.data_mut().copy_from_slice(&flat);
    Ok(out)
}

/// Central differences for a subset of elements of the named parameter.
/// Returns one derivative per requested index.
pub fn finite_diff_at_indices<F>(
    f: &F,
    params: &ParamStore,
    name: &str,
    eps: f64,
    indices: &[usize],
) -> Result<Vec<f64>>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::argument(format!("eps must be positive, got {eps}")));
    }
    params.value(name)?; // surface lookup errors before cloning
    let mut work = params.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let base = {
            let v = work.value(name)?;
            if i >= v.numel() {
                return Err(Error::argument(format!(
                    "index {i} out of range for parameter {name} ({} elements)",
                    v.numel()
                )));
            }
            v.data()[i]
        };
        work.value_mut(name)?.data_mut()[i] = base + eps;
        let plus = f(&work)?;
        work.value_mut(name)?.data_mut()[i] = base - eps;
        let minus = f(&work)?;
        work.value_mut(name)?.data_mut()[i] = base;
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Worst relative error between analytic and reference derivatives, with an
/// absolute floor so near-zero gradients compare on absolute difference.
pub fn max_relative_error(analytic: &[f64], reference: &[f64], atol: f64) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &r)| {
            let diff = (a - r).abs();
            let scale = a.abs().max(r.abs());
            if diff <= atol {
                0.0
            } else {
                diff / scale.max(atol)
            }
        })
        .fold(0.0, f64::max)
}

/// Default absolute floor used by the gradient test suite.
pub const GRAD_ATOL: f64 = 1e-8;
/// Default step used by the gradient test suite.
pub const GRAD_EPS: f64 = 1e-5;
/// Default relative tolerance used by the gradient test suite.
pub const GRAD_RTOL: f64 = 1e-4;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches_analytic() {
        let mut params = ParamStore::new();
        params
            .insert(
                "x",
                Volume5::from_vec([1, 1, 1, 1, 2], vec![1.0, 2.0]).unwrap(),
            )
            .unwrap();
        let f = |p: &ParamStore| Ok(p.value("x")?.data().iter().map(|v| v * v).sum());
        let g = finite_diff_gradient(f, &params, "x", 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_zero_gradient() {
        let mut params = ParamStore::new();
        params
            .insert("x", Volume5::new([1, 1, 2, 2, 2], 0.7).unwrap())
            .unwrap();
        let f = |_: &ParamStore| Ok(42.0);
        let g = finite_diff_gradient(f, &params, "x", 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn polynomial_matches_within_1e6() {
        // f(x) = sum(x^3 - 2 x), f'(x) = 3 x^2 - 2.
        let mut params = ParamStore::new();
        params
            .insert(
                "x",
                Volume5::from_vec([1, 1, 1, 1, 3], vec![0.3, -1.2, 2.0]).unwrap(),
            )
            .unwrap();
        let f = |p: &ParamStore| {
            Ok(p.value("x")?
                .data()
                .iter()
                .map(|v| v * v * v - 2.0 * v)
                .sum())
        };
        let g = finite_diff_gradient(f, &params, "x", 1e-5).unwrap();
        let expect: Vec<f64> = [0.3f64, -1.2, 2.0]
            .iter()
            .map(|v| 3.0 * v * v - 2.0)
            .collect();
        let rel = max_relative_error(g.data(), &expect, 1e-12);
        assert!(rel < 1e-6, "rel = {rel}");
    }

    #[test]
    fn unknown_name_is_lookup_error() {
        let params = ParamStore::new();
        let f = |_: &ParamStore| Ok(0.0);
        assert!(matches!(
            finite_diff_gradient(f, &params, "missing", 1e-5),
            Err(Error::Lookup(_))
        ));
    }
}
