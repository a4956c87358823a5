use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central-difference gradient `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` of a
/// scalar function, one coordinate at a time.
///
/// Used as an independent oracle for the analytic gradients.
pub fn finite_difference_gradient<S, F>(mut f: F, x: &Tensor<S>, step: S) -> Result<Tensor<S>>
where
    S: Scalar,
    F: FnMut(&Tensor<S>) -> Result<S>,
{
    if !(step > S::zero()) {
        return Err(Error::invalid("finite_difference_gradient", "step must be positive"));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (step + step));
    }
    Tensor::new(x.shape().to_vec(), out)
}
