//! Central finite-difference oracle for gradient tests.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Default step for central differences at 64-bit.
pub const FD_STEP: f64 = 1e-5;

/// `(f(x+h) - f(x-h)) / 2h` for every coordinate of `x`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + h;
            let plus = f(&work);
            work[i] = x[i] - h;
            let minus = f(&work);
            work[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps vanishing gradients from turning
/// floating-point cancellation noise into large ratios.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Result of comparing tape gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradCheck {
    pub fn max_relative_error(&self, floor: f64) -> f64 {
        self.analytic
            .iter()
            .flatten()
            .zip(self.numeric.iter().flatten())
            .map(|(a, n)| relative_error(*a, *n, floor))
            .fold(0.0, f64::max)
    }
}

/// Builds `f` on a fresh tape with every input as a leaf, back-propagates, and repeats `f`
/// on perturbed copies for the numeric side. `f` must return a scalar.
pub fn check_gradients(
    inputs: &[Tensor],
    h: f64,
    f: impl Fn(&Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| match grads.get(v) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; v.value().numel()],
        })
        .collect();

    let eval = |which: usize, data: &[f64]| -> f64 {
        let tape = Tape::no_grad();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == which {
                    tape.constant(Tensor::from_parts(t.shape().to_vec(), data.to_vec()))
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        f(&tape, &vars).expect("forward succeeded once").value().item()
    };
    let numeric = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| central_difference(|x| eval(i, x), t.data(), h))
        .collect();
    Ok(GradCheck { analytic, numeric })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_cubic() {
        let g = central_difference(|x| x[0].powi(3) + 2.0 * x[1], &[2.0, 5.0], 1e-5);
        assert!((g[0] - 12.0).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-8), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-8) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-12, 0.0, 1e-8) - 1e-4).abs() < 1e-15);
    }
}
