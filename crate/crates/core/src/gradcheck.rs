//! Central finite-difference gradient checking for double-precision
//! parameters.

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};
use crate::tensor_util;

/// Floor on the relative-error denominator so entries whose gradients are
/// both ~0 are compared absolutely.
const DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter name, flat index)` of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Backprop gradients of `loss` for each parameter, flattened. Parameters
/// the loss does not depend on get all-zero gradients.
pub fn analytic_gradients<F>(params: &[(String, Var)], loss: F) -> Result<Vec<(String, Vec<f64>)>>
where
    F: Fn() -> Result<Tensor>,
{
    let l = loss()?;
    let grads = l.backward()?;
    params
        .iter()
        .map(|(name, var)| {
            let g = match grads.get(var.as_tensor()) {
                Some(g) => tensor_util::to_f64_vec(g)?,
                None => vec![0.0; var.elem_count()],
            };
            Ok((name.clone(), g))
        })
        .collect()
}

/// Perturbs every entry of every parameter by `±eps` and compares the
/// central difference of `loss` with its backprop gradient.
pub fn check_gradients<F>(params: &[(String, Var)], loss: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!("eps must be in (0, 1e-2], got {eps}")));
    }
    if let Some((name, _)) = params.iter().find(|(_, v)| v.dtype() != DType::F64) {
        return Err(Error::invalid(format!(
            "gradient check needs double precision; {name} is not f64"
        )));
    }

    let analytic = analytic_gradients(params, &loss)?;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        entries_checked: 0,
    };

    for ((name, var), (_, grad)) in params.iter().zip(&analytic) {
        let shape = var.shape().clone();
        let original = tensor_util::to_f64_vec(var.as_tensor())?;
        let mut probe = original.clone();
        let eval_at = |probe: &[f64]| -> Result<f64> {
            var.set(&Tensor::from_slice(probe, shape.clone(), var.device())?)?;
            tensor_util::scalar_f64(&loss()?)
        };
        let mut outcome = Ok(());
        for i in 0..original.len() {
            probe[i] = original[i] + eps;
            let plus = eval_at(&probe);
            probe[i] = original[i] - eps;
            let minus = eval_at(&probe);
            probe[i] = original[i];
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    outcome = Err(e);
                    break;
                }
            };
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad[i];
            if !a.is_finite() || !numeric.is_finite() {
                outcome = Err(Error::NonFinite(format!("gradient of {name}[{i}]")));
                break;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            report.entries_checked += 1;
            if report.worst.is_none() || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
        // Restore the untouched parameter even when a probe failed.
        var.set(&Tensor::from_slice(&original, shape.clone(), var.device())?)?;
        outcome?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn quadratic_loss_is_exact() {
        let v = Var::new(&[1.5f64, -2.0, 0.25], &Device::Cpu).unwrap();
        let params = vec![("v".to_string(), v.clone())];
        let report = check_gradients(&params, || Ok(v.as_tensor().sqr()?.sum_all()?), 1e-4).unwrap();
        assert_eq!(report.entries_checked, 3);
        assert!(report.max_relative_error < 1e-9);
        // parameter restored
        assert_eq!(v.to_vec1::<f64>().unwrap(), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn detects_wrong_gradient() {
        // detach() hides the dependence from backprop while finite
        // differences still see it.
        let v = Var::new(&[1.0f64, 2.0], &Device::Cpu).unwrap();
        let params = vec![("v".to_string(), v.clone())];
        let report = check_gradients(
            &params,
            || {
                let t = v.as_tensor();
                Ok((t.sqr()?.sum_all()? + t.detach().sqr()?.sum_all()?)?)
            },
            1e-4,
        )
        .unwrap();
        assert!(report.max_relative_error > 0.4);
        assert!(report.worst.is_some());
    }

    #[test]
    fn non_finite_reported_with_index() {
        let v = Var::new(&[0.0f64, 1.0], &Device::Cpu).unwrap();
        let params = vec![("v".to_string(), v.clone())];
        let err = check_gradients(&params, || Ok(v.as_tensor().sqrt()?.sum_all()?), 1e-4).unwrap_err();
        assert!(err.to_string().contains("v[0]"), "{err}");
    }

    #[test]
    fn rejects_bad_eps() {
        let v = Var::new(&[1.0f64], &Device::Cpu).unwrap();
        let params = vec![("v".to_string(), v.clone())];
        assert!(check_gradients(&params, || Ok(v.as_tensor().sum_all()?), 0.0).is_err());
        assert!(check_gradients(&params, || Ok(v.as_tensor().sum_all()?), 0.1).is_err());
    }
}
