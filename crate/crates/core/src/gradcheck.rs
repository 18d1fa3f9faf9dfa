//! Finite-difference validation of recorded gradients.

use crate::scalar::Scalar;
use crate::tape::{Tape, TapeError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub pass: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error("function produced a non-finite value at perturbed entry {index}")]
    NonFinite { index: usize },
    #[error("no gradient recorded for the input")]
    NoGradient,
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Relative error with a unit floor, so near-zero gradients are compared
/// absolutely instead of blowing up the ratio.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Compares two gradient tensors entry-wise.
pub fn compare_gradients<S: Scalar>(
    recorded: &Tensor<S>,
    numeric: &Tensor<S>,
    tolerance: f64,
) -> GradCheckReport {
    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for (i, (&r, &n)) in recorded.values().iter().zip(numeric.values()).enumerate() {
        let e = relative_error(r.to_f64_lossy(), n.to_f64_lossy());
        if e > max_rel_err {
            max_rel_err = e;
            worst_index = i;
        }
    }
    GradCheckReport { max_rel_err, worst_index, pass: max_rel_err < tolerance }
}

/// Central-difference gradient of a scalar-valued function of one tensor.
pub fn central_difference<S, F>(
    f: &F,
    point: &Tensor<S>,
    step: f64,
) -> Result<Tensor<S>, GradCheckError>
where
    S: Scalar,
    F: Fn(&Tensor<S>) -> Result<S, TapeError>,
{
    let h = S::from_f64_lossy(step);
    let two_h = h + h;
    let mut grad = Tensor::zeros(point.rows(), point.cols());
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.values_mut()[i] += h;
        let mut minus = point.clone();
        minus.values_mut()[i] -= h;
        let fp = f(&plus)?;
        let fm = f(&minus)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(GradCheckError::NonFinite { index: i });
        }
        grad.values_mut()[i] = (fp - fm) / two_h;
    }
    Ok(grad)
}

/// Checks the recorded gradient of `build` (a tape program from one input
/// leaf to a scalar loss) against central differences at `point`.
pub fn grad_check<S, F>(
    build: F,
    point: &Tensor<S>,
    config: GradCheckConfig,
) -> Result<GradCheckReport, GradCheckError>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, crate::tape::NodeId) -> Result<crate::tape::NodeId, TapeError>,
{
    let mut tape = Tape::new();
    let x = tape.insert(point.clone().with_grad());
    let loss = build(&mut tape, x)?;
    let grads = tape.backward(loss)?;
    let recorded = grads.get(x).ok_or(GradCheckError::NoGradient)?.clone();

    let eval = |p: &Tensor<S>| -> Result<S, TapeError> {
        let mut t = Tape::new();
        let xid = t.insert(p.clone());
        let l = build(&mut t, xid)?;
        Ok(t.item(l))
    };
    let numeric = central_difference(&eval, point, config.step)?;
    Ok(compare_gradients(&recorded, &numeric, config.tolerance))
}
