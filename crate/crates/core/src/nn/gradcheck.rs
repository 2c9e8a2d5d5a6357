use thiserror::Error;

use super::{flatten, param_shapes, Params};

pub const DEFAULT_H: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradCheckError {
    #[error("non-finite {what} for {param}[{index}]")]
    NonFinite {
        what: &'static str,
        param: String,
        index: usize,
    },
    #[error("analytic gradient has {got} values, parameters have {expected}")]
    Layout { got: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter tensor and element index with the largest error.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn set_param(p: &mut dyn Params, tensor: usize, index: usize, value: f64) {
    let mut i = 0;
    p.visit_mut(&mut |_, d| {
        if i == tensor {
            d[index] = value;
        }
        i += 1;
    });
}

/// Compares `analytic` (a gradient with the parameters' layout) against
/// central differences of `loss` over every parameter of `params`.
/// Parameters are restored exactly afterwards.
pub fn grad_check<P: Params>(
    params: &mut P,
    analytic: &dyn Params,
    h: f64,
    mut loss: impl FnMut(&P) -> f64,
) -> Result<GradCheckReport, GradCheckError> {
    let grads = flatten(analytic);
    let values = flatten(params);
    if grads.len() != values.len() {
        return Err(GradCheckError::Layout {
            got: grads.len(),
            expected: values.len(),
        });
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut offset = 0;
    for (t, (name, shape)) in param_shapes(params).into_iter().enumerate() {
        let n: usize = shape.iter().product();
        for i in 0..n {
            let orig = values[offset + i];
            set_param(params, t, i, orig + h);
            let plus = loss(params);
            set_param(params, t, i, orig - h);
            let minus = loss(params);
            set_param(params, t, i, orig);
            let numeric = (plus - minus) / (2.0 * h);
            let a = grads[offset + i];
            if !numeric.is_finite() {
                return Err(GradCheckError::NonFinite {
                    what: "loss",
                    param: name,
                    index: i,
                });
            }
            if !a.is_finite() {
                return Err(GradCheckError::NonFinite {
                    what: "gradient",
                    param: name,
                    index: i,
                });
            }
            let err = relative_error(a, numeric);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
            report.checked += 1;
        }
        offset += n;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{bce_loss, sigmoid, sigmoid_backward, Linear};
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_loss(l: &Linear, x: &Array2<f64>, r: f64) -> (f64, Linear) {
        let p = sigmoid(&l.forward(x).unwrap());
        let (loss, dp) = bce_loss(p[[0, 0]], r);
        let dz = sigmoid_backward(&p, &array![[dp]]);
        let mut g = l.zeros_like();
        l.backward_params(x, &dz, &mut g);
        (loss, g)
    }

    #[test]
    fn linear_sigmoid_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut l = Linear::new(3, 1, &mut rng);
        let x = array![[0.5, -1.0, 2.0]];
        let (_, g) = tiny_loss(&l, &x, 1.0);
        let rep = grad_check(&mut l, &g, DEFAULT_H, |l| tiny_loss(l, &x, 1.0).0).unwrap();
        assert!(rep.max_rel_error <= 1e-6, "{rep:?}");
        assert_eq!(rep.checked, 4);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut l = Linear::new(3, 1, &mut rng);
        let x = array![[0.5, -1.0, 2.0]];
        let (_, mut g) = tiny_loss(&l, &x, 0.0);
        g.w[[0, 1]] *= -1.0;
        let rep = grad_check(&mut l, &g, DEFAULT_H, |l| tiny_loss(l, &x, 0.0).0).unwrap();
        assert!(rep.max_rel_error > 1e-2);
        assert_eq!(rep.worst, Some(("w".to_string(), 1)));
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut l = Linear::zeros(1, 1);
        let g = l.zeros_like();
        let err = grad_check(&mut l, &g, DEFAULT_H, |_| f64::NAN).unwrap_err();
        assert!(matches!(
            err,
            GradCheckError::NonFinite { what: "loss", .. }
        ));
    }
}
