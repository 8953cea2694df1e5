//! Finite-difference validation of analytic gradients.
//!
//! The function under test builds a fresh tape from a flat f64 parameter
//! vector and returns the scalar loss plus the leaf vars the vector was
//! loaded into (in order); analytic gradients are read from those leaves
//! and compared entry-by-entry against central differences.

use super::{Tape, Var};

#[derive(Debug)]
pub enum CheckError {
    /// Two evaluations at the same point disagreed; the function is not a
    /// pure function of its inputs (e.g. an unseeded RNG leaked in).
    NonDeterministic { first: f64, second: f64 },
}

impl std::fmt::Display for CheckError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CheckError::NonDeterministic { first, second } => write!(
                f,
                "loss function is not deterministic: {first} vs {second} at the same point"
            ),
        }
    }
}

impl std::error::Error for CheckError {}

/// Result of one gradient check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub max_rel_err: f64,
    /// Flat index (into the checked parameter vector) of the worst entry.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub num_checked: usize,
}

/// Check every parameter index. See [`finite_diff_check_at`].
pub fn finite_diff_check<Build>(
    params: &[f64],
    step: f64,
    f: Build,
) -> Result<CheckReport, CheckError>
where
    Build: FnMut(&[f64]) -> (Tape<f64>, Var, Vec<Var>),
{
    let all: Vec<usize> = (0..params.len()).collect();
    finite_diff_check_at(params, step, &all, f)
}

/// Compare analytic gradients against central differences at the listed
/// flat indices.
///
/// `f` maps a flat f64 parameter vector to (tape, loss var, leaf vars); the
/// concatenated leaf values must equal the flat vector. The relative error
/// per entry is |a - n| / max(|a|, |n|, 1e-4); the denominator floor sits
/// two orders of magnitude above central-difference rounding noise
/// (≈ eps·|loss|/step ≈ 1e-10 for f64 at step 1e-5) so that near-zero
/// gradients where both sides agree to ~1e-10 absolute do not register as
/// spurious relative errors, while any absolute disagreement above 1e-8
/// still shows up at the 1e-4 reporting threshold. `step` is the half-width
/// of the central difference; 1e-5 suits f64 losses of moderate curvature.
pub fn finite_diff_check_at<Build>(
    params: &[f64],
    step: f64,
    indices: &[usize],
    mut f: Build,
) -> Result<CheckReport, CheckError>
where
    Build: FnMut(&[f64]) -> (Tape<f64>, Var, Vec<Var>),
{
    let eval = |f: &mut Build, p: &[f64]| -> f64 {
        let (tape, loss, _) = f(p);
        tape.value(loss)[0]
    };

    // Determinism probe: the same point must give bit-equal losses.
    let l1 = eval(&mut f, params);
    let l2 = eval(&mut f, params);
    if l1.to_bits() != l2.to_bits() {
        return Err(CheckError::NonDeterministic {
            first: l1,
            second: l2,
        });
    }

    // Analytic gradient at the base point, flattened in leaf order.
    let (mut tape, loss, leaves) = f(params);
    tape.backward(loss);
    let mut analytic = Vec::with_capacity(params.len());
    for &leaf in &leaves {
        match tape.grad(leaf) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat(0.0).take(tape.value(leaf).len())),
        }
    }
    assert_eq!(
        analytic.len(),
        params.len(),
        "gradient leaves cover {} values but the flat vector has {}",
        analytic.len(),
        params.len()
    );

    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        num_checked: indices.len(),
    };
    let mut shifted = params.to_vec();
    for &i in indices {
        let orig = shifted[i];
        shifted[i] = orig + step;
        let up = eval(&mut f, &shifted);
        shifted[i] = orig - step;
        let down = eval(&mut f, &shifted);
        shifted[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}
