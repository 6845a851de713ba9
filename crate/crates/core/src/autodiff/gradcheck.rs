use super::scalar::Scalar;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function:
/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if !(h > T::zero()) {
        return Err(Error::invalid("finite difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    let two_h = h + h;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / two_h);
    }
    Tensor::new(x.shape(), grad)
}

/// Norm-wise relative error `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`; zero when both vanish.
pub fn relative_error<A: Scalar, B: Scalar>(a: &Tensor<A>, b: &Tensor<B>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error shape mismatch");
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.f64(), y.f64());
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    let scale = na.max(nb).sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

/// A scalar function of several tensors, buildable on a tape of either
/// precision so one definition serves the analytic and the reference pass.
pub trait TapeFn {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var>;
}

fn eval_f64<F: TapeFn>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = f.build(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Analytic (precision `T`) and reference (f64) gradients of every input.
/// Central differences at `h` and `2h` are Richardson-combined, which makes
/// the reference fourth-order accurate so `h` can stay large enough to keep
/// rounding noise small. Inputs are first rounded to `T` so both passes see
/// the same point.
pub fn gradient_pairs<T: Scalar, F: TapeFn>(
    f: &F,
    inputs: &[Tensor<f64>],
    h: f64,
) -> Result<Vec<(Tensor<T>, Tensor<f64>)>> {
    let rounded: Vec<Tensor<T>> = inputs.iter().map(|x| x.cast()).collect();
    let point: Vec<Tensor<f64>> = rounded.iter().map(|x| x.cast()).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = rounded.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f.build(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut pairs = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(rounded[i].shape()));
        let central = |step: f64| {
            let mut probe = point.clone();
            finite_diff_grad(
                |x| {
                    probe[i] = x.clone();
                    eval_f64(f, &probe)
                },
                &point[i],
                step,
            )
        };
        let (d1, d2) = (central(h)?, central(2.0 * h)?);
        let numeric = Tensor::new(
            d1.shape(),
            d1.data().iter().zip(d2.data()).map(|(a, b)| (4.0 * a - b) / 3.0).collect(),
        )?;
        pairs.push((analytic, numeric));
    }
    Ok(pairs)
}

/// Worst relative error, over all inputs, between the tape gradient computed
/// in precision `T` and finite differences of the same function in f64.
pub fn gradient_error<T: Scalar, F: TapeFn>(f: &F, inputs: &[Tensor<f64>], h: f64) -> Result<f64> {
    Ok(gradient_pairs::<T, F>(f, inputs, h)?
        .iter()
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max))
}
