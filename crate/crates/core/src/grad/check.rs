//! Central finite-difference gradient checker.

use super::tape::{Tape, Var};
use super::tensor::{GradError, Tensor};

/// Outcome of a finite-difference check over one parameter vector.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Max over coordinates of `|analytic − central| / max(1, |analytic|)`.
    pub max_rel_err: f64,
    /// Coordinate achieving the max.
    pub worst_coord: usize,
    /// Coordinates where the probed function returned NaN.
    pub nan_coords: Vec<usize>,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.nan_coords.is_empty() && self.max_rel_err < tol
    }
}

/// Check the analytic gradient of `f` (a scalar-valued function of one
/// parameter vector, built on the provided tape) against central finite
/// differences at step `eps`.
///
/// `f` must be pure: two calls with the same parameters must produce the
/// same scalar.
pub fn finite_difference_check<F>(params: &Tensor, eps: f64, f: F) -> Result<FdReport, GradError>
where
    F: Fn(&Tape, &Var) -> Var,
{
    assert!(eps > 0.0, "finite_difference_check: eps must be positive");

    let tape = Tape::new();
    let leaf = tape.leaf(params.clone());
    let loss = f(&tape, &leaf);
    if loss.numel() != 1 {
        return Err(GradError::NotScalar { op: "finite_difference_check".into(), shape: loss.shape_vec() });
    }
    let grads = tape.backward(&loss)?;
    let analytic = grads.wrt_or_zeros(&leaf);

    let eval = |p: &Tensor| -> f64 {
        let t = Tape::new();
        let v = t.leaf(p.clone());
        f(&t, &v).item()
    };

    let mut max_rel_err: f64 = 0.0;
    let mut worst_coord = 0;
    let mut nan_coords = Vec::new();
    let mut probe = params.clone();
    for i in 0..params.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe);
        probe.data_mut()[i] = orig;

        if !plus.is_finite() || !minus.is_finite() {
            nan_coords.push(i);
            continue;
        }
        let central = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - central).abs() / a.abs().max(1.0);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_coord = i;
        }
    }
    Ok(FdReport { max_rel_err, worst_coord, nan_coords })
}
