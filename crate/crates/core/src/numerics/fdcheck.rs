//! Central-difference gradient oracle.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// `max_i |analytic_i - fd_i| / (|fd_i| + 1e-12)`.
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the analytic gradient `f` reports at `point` with central
/// differences of its value at `point ± step·e_i`.
pub fn finite_difference_check<F>(mut f: F, point: &[f64], step: f64) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (v0, analytic) = f(point);
    if !v0.is_finite() {
        return Err(Error::domain("function is non-finite at the base point"));
    }
    if analytic.len() != point.len() {
        return Err(Error::usage(format!(
            "gradient has {} entries for a {}-dimensional point",
            analytic.len(),
            point.len()
        )));
    }
    let mut probe = point.to_vec();
    let mut numeric = Vec::with_capacity(point.len());
    let mut worst = (0.0f64, 0usize);
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let up = f(&probe).0;
        probe[i] = point[i] - step;
        let down = f(&probe).0;
        probe[i] = point[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::domain(format!(
                "function is non-finite when probing coordinate {i}"
            )));
        }
        let fd = (up - down) / (2.0 * step);
        let rel = (analytic[i] - fd).abs() / (fd.abs() + 1e-12);
        if i == 0 || rel > worst.0 || rel.is_nan() {
            worst = (rel, i);
        }
        numeric.push(fd);
    }
    Ok(FdReport {
        max_rel_error: worst.0,
        worst_coordinate: worst.1,
        analytic,
        numeric,
    })
}
