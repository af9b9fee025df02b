//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::array::Tensor;
use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("finite_diff_check objective"))
    }
}

/// Compares a supplied analytic gradient against central differences of
/// `value` around `point`. Returns the max over coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn compare_with_differences(mut value: impl FnMut(&Tensor) -> Result<f64>, analytic: &[f64], point: &Tensor, eps: f64) -> Result<f64> {
    if analytic.len() != point.numel() {
        return Err(Error::shape("analytic gradient length differs from point"));
    }
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = point.to_vec();
        plus[i] += eps;
        let mut minus = point.to_vec();
        minus[i] -= eps;
        let fp = finite(value(&Tensor::new(point.shape(), plus)?)?)?;
        let fm = finite(value(&Tensor::new(point.shape(), minus)?)?)?;
        worst = worst.max(rel_err(a, (fp - fm) / (2.0 * eps)));
    }
    Ok(worst)
}

/// Checks the tape's gradient of a scalar function of one tensor.
pub fn finite_diff_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.input(point.clone());
    let out = f(&mut g, x)?;
    finite(g.value(out).item()?)?;
    let grads = g.backward(out)?;
    let analytic = grads.get(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; point.numel()]);
    compare_with_differences(
        |p| {
            let mut g = Graph::inference();
            let x = g.constant(p.clone());
            let out = f(&mut g, x)?;
            g.value(out).item()
        },
        &analytic,
        point,
        eps,
    )
}

/// Checks parameter gradients of a loss graph built by `f`.
///
/// When `coords_per_param` is set, at most that many coordinates per
/// parameter tensor are sampled with `rng`; otherwise every coordinate of
/// every trainable parameter is perturbed.
pub fn param_gradient_check<F>(store: &ParamStore, f: F, eps: f64, coords_per_param: Option<usize>, rng: &mut impl Rng) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut with_grad = store.clone();
    with_grad.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, &with_grad)?;
    finite(g.value(loss).item()?)?;
    g.backward_into(loss, &mut with_grad)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let loss = f(&mut g, s)?;
        finite(g.value(loss).item()?)
    };

    let mut worst = 0.0f64;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut probe = store.clone();
    for name in names {
        if !store.is_trainable(&name)? {
            continue;
        }
        let base = store.value(&name)?.clone();
        let n = base.numel();
        let coords: Vec<usize> = match coords_per_param {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let analytic = with_grad.grad(&name)?.to_vec();
        for i in coords {
            let mut plus = base.to_vec();
            plus[i] += eps;
            probe.set_value(&name, Tensor::new(base.shape(), plus)?)?;
            let fp = eval(&probe)?;
            let mut minus = base.to_vec();
            minus[i] -= eps;
            probe.set_value(&name, Tensor::new(base.shape(), minus)?)?;
            let fm = eval(&probe)?;
            worst = worst.max(rel_err(analytic[i], (fp - fm) / (2.0 * eps)));
        }
        probe.set_value(&name, base)?;
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let err = finite_diff_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &Tensor::new(&[1], vec![3.0]).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn sum_of_sines_against_cosine() {
        let point = Tensor::new(&[5], vec![0.1, -1.3, 2.2, 0.7, -0.4]).unwrap();
        let analytic: Vec<f64> = point.data().iter().map(|x| x.cos()).collect();
        let err = compare_with_differences(|p| Ok(p.data().iter().map(|x| x.sin()).sum()), &analytic, &point, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
        let tape = finite_diff_check(
            |g, x| {
                let s = g.sin(x)?;
                g.sum(s)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(tape < 1e-6, "{tape}");
    }

    #[test]
    fn doubled_gradient_is_caught() {
        // f = x^2 at x = 1e3: true slope 2000, wrong slope 4000 -> rel err 1.0
        let point = Tensor::new(&[1], vec![1e3]).unwrap();
        let err = compare_with_differences(|p| Ok(p.data()[0].powi(2)), &[4e3], &point, 1e-5).unwrap();
        assert!((err - 1.0).abs() < 1e-4, "{err}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let point = Tensor::new(&[1], vec![1.0]).unwrap();
        let err = compare_with_differences(|_| Ok(f64::NAN), &[0.0], &point, 1e-5);
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }
}
