use crate::error::{AutodiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error with a `1e-8` floor on the denominator.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the reverse-mode gradient of a scalar function against central
/// differences, component by component, and returns the largest relative
/// error.
///
/// `f` receives a fresh tape and the input recorded as a differentiable
/// leaf, and must return a `[1, 1]` output.
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |x: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), false);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let input = tape.param(point.clone());
    let out = f(&mut tape, input)?;
    if tape.value(out).shape() != [1, 1] {
        return Err(AutodiffError::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.rows(), point.cols()));

    let mut worst = 0.0_f64;
    let mut probe = point.clone();
    for k in 0..point.len() {
        let x0 = point.data()[k];
        probe.data_mut()[k] = x0 + epsilon;
        let up = eval(&probe)?;
        probe.data_mut()[k] = x0 - epsilon;
        let down = eval(&probe)?;
        probe.data_mut()[k] = x0;
        let numeric = (up - down) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic.data()[k], numeric));
    }
    Ok(worst)
}
