//! Numerical gradient verification against central differences.

use crate::error::AutodiffError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compare the reverse-mode gradient of a scalar function with central
/// differences and return the max relative error, with the denominator
/// max(|analytic|, |numeric|, 1e-8).
///
/// `build` receives a fresh tape plus the input registered as a trainable
/// leaf, and must return a scalar output var.
pub fn grad_check(
    build: impl Fn(&mut Tape, Var) -> Var,
    x: &Tensor,
    eps: f64,
) -> Result<f64, AutodiffError> {
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(AutodiffError::InvalidArgument(format!(
            "eps {eps} outside [1e-5, 1e-2]"
        )));
    }

    let eval = |t: &Tensor| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let v = tape.leaf(t.clone());
        let out = tape.build_scalar(&build, v)?;
        let y = tape.value(out);
        if y.numel() != 1 {
            return Err(AutodiffError::InvalidArgument(format!(
                "function output has shape {:?}, expected scalar",
                y.shape()
            )));
        }
        Ok(y.item())
    };

    // Analytic gradient at x.
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = tape.build_scalar(&build, leaf)?;
    let y0 = tape.value(out).item();
    if !y0.is_finite() {
        return Err(AutodiffError::NonFinite("grad_check function evaluation".into()));
    }
    tape.backward(out);
    let analytic = tape
        .grad(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(AutodiffError::NonFinite(format!(
                "central difference at coordinate {i}"
            )));
        }
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((a - numeric).abs() / denom);
    }
    Ok(max_rel)
}

impl Tape {
    fn build_scalar(
        &mut self,
        build: &impl Fn(&mut Tape, Var) -> Var,
        v: Var,
    ) -> Result<Var, AutodiffError> {
        let out = build(self, v);
        if !self.value(out).is_finite() {
            return Err(AutodiffError::NonFinite("grad_check function evaluation".into()));
        }
        Ok(out)
    }
}
