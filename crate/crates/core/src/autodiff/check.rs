use alloc::vec::Vec;

use super::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max_i |analytic_i - numeric_i| / max(|numeric_i|, 1e-8)`.
    pub max_rel_error: f64,
    /// Coordinate attaining the maximum.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Checks every coordinate of `point`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, step, &coords)
}

/// Checks only the listed coordinates; the report vectors follow `coords`.
pub fn grad_check_coords<F>(f: F, point: &Tensor, step: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if let Some(i) = point.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "grad_check point", index: i });
    }
    let full = {
        let tape = Tape::new();
        let x = tape.var(point.clone());
        let y = f(&tape, x)?;
        if !y.item().is_finite() {
            return Err(Error::NonFinite { context: "grad_check value", index: 0 });
        }
        tape.backward(y)?.wrt(x)
    };
    let eval = |data: Tensor, index: usize| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.constant(data);
        let y = f(&tape, x)?;
        let v = y.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { context: "grad_check perturbed value", index })
        }
    };
    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    let (mut worst, mut worst_index) = (0.0f64, coords.first().copied().unwrap_or(0));
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let fd = (eval(plus, i)? - eval(minus, i)?) / (2.0 * step);
        let err = (full[i] - fd).abs() / fd.abs().max(1e-8);
        if err > worst || !err.is_finite() {
            worst = err;
            worst_index = i;
        }
        analytic.push(full[i]);
        numeric.push(fd);
    }
    Ok(GradCheckReport { max_rel_error: worst, worst_index, analytic, numeric })
}
