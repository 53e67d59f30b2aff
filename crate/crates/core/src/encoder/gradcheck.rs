//! Central finite-difference gradient checking.

use rand::Rng as _;

use super::params::Parameters;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub coordinates: usize,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `loss` on `samples`
/// coordinates drawn uniformly over all parameters.
pub fn grad_check<P, F>(
    params: &P,
    analytic: &P,
    loss: F,
    epsilon: f64,
    samples: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    P: Parameters,
    F: Fn(&P) -> Result<f64>,
{
    let base = loss(params)?;
    if !base.is_finite() {
        return Err(Error::Numerical(format!("loss is not finite: {base}")));
    }
    let sizes: Vec<(String, usize)> = params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();
    let total: usize = sizes.iter().map(|(_, s)| s).sum();
    let grads: Vec<Vec<f64>> = analytic
        .tensors()
        .into_iter()
        .map(|(_, t)| t.iter().copied().collect())
        .collect();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    let mut probe = params.clone();
    for _ in 0..samples {
        let mut flat = rng.gen_range(0..total);
        let mut tensor = 0;
        while flat >= sizes[tensor].1 {
            flat -= sizes[tensor].1;
            tensor += 1;
        }
        let original = nth_mut(&mut probe, tensor, flat, None);
        nth_mut(&mut probe, tensor, flat, Some(original + epsilon));
        let plus = loss(&probe)?;
        nth_mut(&mut probe, tensor, flat, Some(original - epsilon));
        let minus = loss(&probe)?;
        nth_mut(&mut probe, tensor, flat, Some(original));
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numerical("perturbed loss is not finite".into()));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = grads[tensor][flat];
        let rel = relative_error(a, numeric);
        report.coordinates += 1;
        report.max_absolute_error = report.max_absolute_error.max((a - numeric).abs());
        if rel > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = rel.max(report.max_relative_error);
            report.worst = Some((sizes[tensor].0.clone(), flat));
        }
    }
    Ok(report)
}

/// Reads element `flat` of tensor `tensor`, optionally overwriting it.
fn nth_mut<P: Parameters>(p: &mut P, tensor: usize, flat: usize, set: Option<f64>) -> f64 {
    let mut tensors = p.tensors_mut();
    let (_, t) = &mut tensors[tensor];
    let x = t.iter_mut().nth(flat).expect("coordinate in range");
    let old = *x;
    if let Some(v) = set {
        *x = v;
    }
    old
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::{array, Array2, ArrayViewD, ArrayViewMutD};

    #[derive(Clone, Debug)]
    struct Linear {
        w: Array2<f64>,
    }

    impl Parameters for Linear {
        fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
            vec![("w".into(), self.w.view().into_dyn())]
        }
        fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
            vec![("w".into(), self.w.view_mut().into_dyn())]
        }
    }

    #[test]
    fn quadratic_loss_is_exact() {
        let x = array![[1.0, -2.0, 0.5], [0.3, 0.0, 1.5]];
        let y = array![[0.2, 1.0], [-1.0, 0.5]];
        let p = Linear {
            w: array![[0.1, 0.2], [-0.3, 0.4], [0.5, -0.6]],
        };
        let loss = |p: &Linear| -> Result<f64> {
            let r = x.dot(&p.w) - &y;
            Ok(0.5 * r.iter().map(|v| v * v).sum::<f64>())
        };
        let grad = Linear {
            w: x.t().dot(&(x.dot(&p.w) - &y)),
        };
        let rep = grad_check(&p, &grad, loss, 1e-5, 50, &mut seeded(0, "g")).unwrap();
        assert!(rep.max_relative_error <= 1e-9, "{rep:?}");
    }

    #[test]
    fn non_finite_loss_errors() {
        let p = Linear { w: array![[1.0]] };
        let r = grad_check(&p, &p, |_| Ok(f64::NAN), 1e-5, 3, &mut seeded(0, "g"));
        assert!(matches!(r, Err(Error::Numerical(_))));
    }
}
