use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central
/// differences. Returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
///
/// Results near non-differentiable points (a relu kink, a max tie) are not
/// meaningful.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|vars| f(vars[0]), std::slice::from_ref(x), step)
}

/// [`grad_check`] over several inputs at once; the worst coordinate wins.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    if step <= 0.0 {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let y = f(&vars)?;
        tape.backward(y)?;
        vars.iter().map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape()))).collect()
    };
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        f(&vars)?.item()
    };
    let mut worst: f64 = 0.0;
    let mut probe = xs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..xs[which].len() {
            let orig = xs[which].data()[i];
            probe[which].data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe[which].data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
