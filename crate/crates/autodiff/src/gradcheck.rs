//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{AutodiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step used for every central difference.
pub const FD_STEP: f64 = 1e-5;

/// Relative errors are measured against `max(|analytic|, |numeric|, REL_FLOOR)`
/// so that entries with vanishing gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

/// At most this fraction of the checked entries may be skipped as
/// non-differentiable within the step before a check fails.
pub const MAX_SKIPPED_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Entries where neither the `FD_STEP` nor the `FD_STEP / 10` central
    /// difference matches and the two disagree with each other: a kink lies
    /// within the step, so there is no derivative to compare against.
    pub skipped: usize,
    pub max_rel_err: f64,
    /// `(input index, flat entry)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks every entry of every input.
pub fn finite_difference_check<F>(f: F, inputs: &[Tensor], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let entries: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    finite_difference_check_entries(f, inputs, &entries, tol)
}

/// Checks only the listed `(input, flat entry)` pairs.
pub fn finite_difference_check_entries<F>(
    f: F,
    inputs: &[Tensor],
    entries: &[(usize, usize)],
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.value(out).item();
    if !base.is_finite() {
        return Err(AutodiffError::NonFinite {
            location: "function value at the unperturbed inputs".into(),
        });
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(*v, &tape)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.param(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel_err = 0.0_f64;
    let mut worst = None;
    let mut skipped = 0;
    let central = |work: &mut Vec<Tensor>, i: usize, j: usize, h: f64| -> Result<f64> {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let plus = eval(work)?;
        work[i].data_mut()[j] = orig - h;
        let minus = eval(work)?;
        work[i].data_mut()[j] = orig;
        Ok((plus - minus) / (2.0 * h))
    };
    for &(i, j) in entries {
        let numeric = central(&mut work, i, j, FD_STEP)?;
        let a = analytic[i].data()[j];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(AutodiffError::NonFinite {
                location: format!("input {i}, entry {j}"),
            });
        }
        let mut err = relative_error(a, numeric);
        if err > tol {
            // a kink between FD_STEP/10 and FD_STEP spoils only the coarse step
            let fine = central(&mut work, i, j, FD_STEP / 10.0)?;
            let fine_err = relative_error(a, fine);
            if fine_err > tol && relative_error(fine, numeric) > tol {
                skipped += 1;
                continue;
            }
            err = err.min(fine_err);
        }
        if err > max_rel_err || worst.is_none() {
            max_rel_err = max_rel_err.max(err);
            worst = Some((i, j));
        }
    }
    let checked = entries.len();
    Ok(GradCheckReport {
        checked,
        skipped,
        max_rel_err,
        worst,
        tol,
        passed: max_rel_err <= tol && skipped as f64 <= MAX_SKIPPED_FRACTION * checked as f64,
    })
}
