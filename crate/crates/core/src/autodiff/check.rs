//! Central finite-difference checks of reverse-mode gradients.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pins a closure to the higher-ranked multi-input signature.
fn many<F>(f: F) -> F
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

fn eval_scalar<F>(f: &F, xs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let y = f(&vars)?;
    let v = y.value();
    if v.numel() != 1 {
        return Err(Error::invalid(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    let out = v.item();
    if !out.is_finite() {
        return Err(Error::NonFinite(format!("function value {out}")));
    }
    Ok(out)
}

/// Central-difference gradient of `f` with respect to input `which`.
pub fn numeric_gradient_many<F>(f: &F, xs: &[Tensor], which: usize, step: f64) -> Result<Tensor>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let mut probe = xs.to_vec();
    let mut grad = Tensor::zeros(xs[which].shape());
    for i in 0..xs[which].numel() {
        let orig = xs[which].data()[i];
        probe[which].data_mut()[i] = orig + step;
        let plus = eval_scalar(f, &probe)?;
        probe[which].data_mut()[i] = orig - step;
        let minus = eval_scalar(f, &probe)?;
        probe[which].data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Central-difference gradient of a single-input scalar function.
pub fn numeric_gradient<F>(f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let wrapped = many(|v| f(v[0]));
    numeric_gradient_many(&wrapped, std::slice::from_ref(x), 0, step)
}

/// Largest `|analytic - numeric| / max(1, |numeric|)` over all coordinates of
/// all inputs.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
    let y = f(&vars)?;
    if !y.value().is_finite() {
        return Err(Error::NonFinite(format!("function value {:?}", y.value())));
    }
    let y = if y.shape().is_empty() { y } else { y.reshape(&[])? };
    let grads = tape.backward(y)?;

    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let numeric = numeric_gradient_many(&f, xs, k, step)?;
        let zeros;
        let analytic = match grads.get(*var) {
            Some(g) => g,
            None => {
                zeros = Tensor::zeros(xs[k].shape());
                &zeros
            }
        };
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            worst = worst.max((a - n).abs() / n.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// [`grad_check_many`] for a single input.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(many(|v| f(v[0])), std::slice::from_ref(x), step)
}
