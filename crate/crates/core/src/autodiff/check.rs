//! Central finite-difference gradient checking in `f64`.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Largest relative error between the reverse-mode gradient of the scalar
/// function `f` at `x` and its central-difference estimate with step `step`.
pub fn gradient_check<Fun>(f: Fun, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    Fun: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    gradient_check_all(|g, xs| f(g, xs[0]), std::slice::from_ref(x), step)
}

/// Like [`gradient_check`] but differentiates with respect to several
/// inputs at once; the result is the maximum over all of them.
pub fn gradient_check_all<Fun>(f: Fun, xs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    Fun: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let g = Graph::new();
    let vars = xs
        .iter()
        .map(|x| g.leaf(x.clone()))
        .collect::<Result<Vec<_>>>()?;
    f(&g, &vars)?.backward()?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(xs)
        .map(|(v, x)| v.grad().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars = inputs
            .iter()
            .map(|x| g.constant(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        let y = f(&g, &vars)?;
        Ok(y.item())
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = xs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..xs[t].numel() {
            let orig = xs[t].data()[i];
            probe[t].data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe[t].data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_sum_checks_tightly() {
        let x = Tensor::from_f64(&[5], &[0.1, -0.2, 0.05, 0.3, -0.4]).unwrap();
        let err = gradient_check(|_, v| v.exp()?.sum_all(), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_sum_is_exact_up_to_rounding() {
        let x = Tensor::from_f64(&[4], &[1.0, 2.0, -3.0, 0.5]).unwrap();
        let err = gradient_check(|_, v| v.sum_all(), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }
}
