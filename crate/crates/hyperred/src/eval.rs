//! Accuracy evaluation of reduced solves against full-order references.
//!
//! Every load step yields three relative errors:
//!
//! * **state** — reconstructed displacement `V x̂_r` against the reference
//!   displacement;
//! * **force** — the surrogate's internal force at the *projected reference*
//!   state against the projected reference force (model quality at the true
//!   state, independent of the continuation);
//! * **output** — a selected scalar observable, here a single displacement
//!   component, reconstructed through the basis.
//!
//! Diverged steps keep their table row (flagged, with NaN errors), and steps
//! that served as construction samples for the piecewise-linear surrogate
//! can be flagged as excluded so reproduction-by-construction does not
//! flatter its statistics. Summaries are five-number (quartile) summaries
//! over the remaining steps.

use nalgebra::DVector;

use crate::dataset::SnapshotSet;
use crate::error::{Error, Result};
use crate::hypersolver::{SolveTrace, SurrogateModel};
use crate::reduction::PodBasis;
use crate::refmodel::RegimeLabel;

/// |pred - reference| / |reference|, with the conventions 0/0 = 0 and
/// (nonzero)/0 = ∞.
pub fn relative_error(pred: f64, reference: f64) -> f64 {
    let diff = (pred - reference).abs();
    if diff == 0.0 {
        return 0.0;
    }
    if reference == 0.0 {
        return f64::INFINITY;
    }
    diff / reference.abs()
}

/// ‖pred - reference‖ / ‖reference‖ with the same zero conventions.
pub fn relative_vector_error(pred: &DVector<f64>, reference: &DVector<f64>) -> f64 {
    let diff = (pred - reference).norm();
    if diff == 0.0 {
        return 0.0;
    }
    let den = reference.norm();
    if den == 0.0 {
        return f64::INFINITY;
    }
    diff / den
}

/// Row of the reduced basis mapping a reduced state straight to one full
/// degree of freedom: `x[dof] = row · x_r`.
pub fn output_row(basis: &PodBasis, dof: usize) -> Result<DVector<f64>> {
    if dof >= basis.n() {
        return Err(Error::input(format!(
            "output degree of freedom {dof} out of range for {} dofs",
            basis.n()
        )));
    }
    Ok(basis.v.row(dof).transpose())
}

/// Linear-interpolation quantile (the common "type 7" rule): with `n`
/// sorted values, `q` maps to position `(n-1)q` and fractional positions
/// interpolate between neighbors.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty slice");
    assert!((0.0..=1.0).contains(&q), "quantile level out of range");
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        return sorted[lo];
    }
    let w = h - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

/// Minimum, quartiles, and maximum of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Five-number summary over the *finite* entries; `None` when nothing
/// survives the filter.
pub fn five_number(values: &[f64]) -> Option<FiveNumber> {
    let mut finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return None;
    }
    finite.sort_by(|a, b| a.partial_cmp(b).expect("finite values compare"));
    Some(FiveNumber {
        min: finite[0],
        q1: quantile(&finite, 0.25),
        median: quantile(&finite, 0.5),
        q3: quantile(&finite, 0.75),
        max: finite[finite.len() - 1],
    })
}

/// Per-step relative errors of one surrogate on one load case.
#[derive(Debug, Clone)]
pub struct StepError {
    pub case: String,
    pub regime: RegimeLabel,
    pub step: usize,
    /// Scalar load magnitude for plots (single input) — the norm otherwise.
    pub load: f64,
    pub state: f64,
    pub force: f64,
    pub output: f64,
    pub diverged: bool,
    /// Construction sample of the surrogate under test; skipped in summaries.
    pub excluded: bool,
}

/// Five-number summaries of one (case, surrogate) pair, with divergence and
/// exclusion counts.
#[derive(Debug, Clone)]
pub struct CaseSummary {
    pub case: String,
    pub regime: RegimeLabel,
    pub steps: usize,
    pub diverged: usize,
    pub excluded: usize,
    pub state: Option<FiveNumber>,
    pub force: Option<FiveNumber>,
    pub output: Option<FiveNumber>,
}

/// Compares a continuation trace with its full-order reference, step by
/// step. `excluded_steps` lists step indices whose linearization data the
/// surrogate was built from; `output_dof` selects the observable.
pub fn evaluate_case(
    reference: &SnapshotSet,
    basis: &PodBasis,
    surrogate: &SurrogateModel,
    trace: &SolveTrace,
    excluded_steps: &[usize],
    output_dof: usize,
) -> Result<Vec<StepError>> {
    if reference.states.len() != trace.steps.len() {
        return Err(Error::input(format!(
            "case {}: reference has {} steps, trace has {}",
            reference.name,
            reference.states.len(),
            trace.steps.len()
        )));
    }
    if basis.n() != reference.states[0].x.len() {
        return Err(Error::input(format!(
            "basis acts on {} dofs, reference states have {}",
            basis.n(),
            reference.states[0].x.len()
        )));
    }
    let c_row = output_row(basis, output_dof)?;
    let mut rows = Vec::with_capacity(trace.steps.len());
    for (i, (snap, step)) in reference.states.iter().zip(&trace.steps).enumerate() {
        let excluded = excluded_steps.contains(&i);
        if !step.converged {
            rows.push(StepError {
                case: reference.name.clone(),
                regime: reference.label,
                step: i,
                load: reference.scalar_load(i),
                state: f64::NAN,
                force: f64::NAN,
                output: f64::NAN,
                diverged: true,
                excluded,
            });
            continue;
        }
        // State: reconstruct and compare in the full space.
        let x_rec = &basis.v * &step.x_r;
        let state = relative_vector_error(&x_rec, &snap.x);
        // Force: surrogate vs reference, both at the projected true state.
        let x_r_ref = basis.v.transpose() * &snap.x;
        let f_r_ref = basis.v.transpose() * &snap.f;
        let (f_hat, _) = surrogate.force_and_tangent(&x_r_ref)?;
        let force = relative_vector_error(&f_hat, &f_r_ref);
        // Output: one displacement component through the basis.
        let output = relative_error(c_row.dot(&step.x_r), snap.x[output_dof]);
        rows.push(StepError {
            case: reference.name.clone(),
            regime: reference.label,
            step: i,
            load: reference.scalar_load(i),
            state,
            force,
            output,
            diverged: false,
            excluded,
        });
    }
    Ok(rows)
}

/// Collapses per-step rows (one case) into quartile summaries, skipping
/// excluded steps; diverged steps are counted and their NaN errors drop out
/// of the finite filter.
pub fn summarize_case(rows: &[StepError]) -> Result<CaseSummary> {
    let first = rows
        .first()
        .ok_or_else(|| Error::input("cannot summarize an empty case"))?;
    let kept: Vec<&StepError> = rows.iter().filter(|r| !r.excluded).collect();
    let collect = |f: fn(&StepError) -> f64| -> Vec<f64> { kept.iter().map(|r| f(r)).collect() };
    Ok(CaseSummary {
        case: first.case.clone(),
        regime: first.regime,
        steps: rows.len(),
        diverged: rows.iter().filter(|r| r.diverged).count(),
        excluded: rows.iter().filter(|r| r.excluded).count(),
        state: five_number(&collect(|r| r.state)),
        force: five_number(&collect(|r| r.force)),
        output: five_number(&collect(|r| r.output)),
    })
}
