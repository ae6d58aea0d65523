//! Newton continuation on the reduced surrogates.
//!
//! Both surrogate families expose internal force and tangent at a reduced
//! state, so one solver walks a load schedule for either of them: warm
//! starts between steps, a relative residual tolerance, and a small
//! Levenberg shift as a fallback when the tangent is rank deficient.
//!
//! Unlike the full-order reference solve, a diverged reduced step is *data*,
//! not an error — the evaluation stage reports where each surrogate stops
//! tracking the reference. Steps after the divergence point are recorded as
//! NaN sentinel rows so downstream tables keep a row per load step.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::pann::PannModel;
use crate::refmodel::NewtonSettings;
use crate::tpwl::TpwlModel;

/// Either reduced surrogate, behind one force/tangent interface.
#[derive(Debug, Clone)]
pub enum SurrogateModel {
    Tpwl(TpwlModel),
    Pann(PannModel),
}

impl SurrogateModel {
    /// Internal force and tangent at a reduced state.
    pub fn force_and_tangent(&self, x_r: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        match self {
            SurrogateModel::Tpwl(m) => {
                if x_r.len() != m.r() {
                    return Err(Error::input(format!(
                        "state has {} entries, surrogate dimension is {}",
                        x_r.len(),
                        m.r()
                    )));
                }
                Ok(m.force_and_tangent(x_r))
            }
            SurrogateModel::Pann(m) => {
                let (_, f, k) = m.evaluate(x_r, true)?;
                Ok((f, k.expect("tangent requested")))
            }
        }
    }

    pub fn r(&self) -> usize {
        match self {
            SurrogateModel::Tpwl(m) => m.r(),
            SurrogateModel::Pann(m) => m.arch.input_dim,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SurrogateModel::Tpwl(_) => "tpwl",
            SurrogateModel::Pann(_) => "pann",
        }
    }
}

/// A surrogate together with the reduced input map `B_r = VᵀB`.
pub struct ReducedSystem {
    pub surrogate: SurrogateModel,
    pub b_r: DMatrix<f64>,
}

/// Outcome of one load step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub load: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    /// Reduced solution; all-NaN once the continuation has diverged.
    pub x_r: DVector<f64>,
}

/// Full continuation trace over a load schedule.
#[derive(Debug, Clone)]
pub struct SolveTrace {
    pub steps: Vec<StepRecord>,
    /// First step index that failed to converge, if any.
    pub diverged_at: Option<usize>,
}

/// Walks the load schedule with Newton iterations, starting each step from
/// the previous solution. Step 0 is always the rest state at zero load.
pub fn solve_reduced(
    system: &ReducedSystem,
    magnitudes: &[DVector<f64>],
    settings: &NewtonSettings,
) -> Result<SolveTrace> {
    let r = system.surrogate.r();
    if system.b_r.nrows() != r {
        return Err(Error::input(format!(
            "input map has {} rows, surrogate dimension is {r}",
            system.b_r.nrows()
        )));
    }
    let p = system.b_r.ncols();
    for (i, u) in magnitudes.iter().enumerate() {
        if u.len() != p {
            return Err(Error::input(format!(
                "load {i} has {} entries, input map has {p} columns",
                u.len()
            )));
        }
    }

    let mut steps = Vec::with_capacity(magnitudes.len() + 1);
    let mut diverged_at = None;
    let mut x = DVector::zeros(r);

    // Rest state: by definition the zero-load solution, recorded untouched.
    let rest_residual = match system.surrogate.force_and_tangent(&x) {
        Ok((f, _)) => f.norm(),
        Err(Error::NonFinite(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    steps.push(StepRecord {
        step: 0,
        load: DVector::zeros(p),
        converged: true,
        iterations: 0,
        residual: rest_residual,
        x_r: x.clone(),
    });

    for (i, u) in magnitudes.iter().enumerate() {
        let step = i + 1;
        if diverged_at.is_some() {
            steps.push(sentinel(step, u, r));
            continue;
        }
        let rhs = &system.b_r * u;
        let tol = settings.tolerance * (1.0 + rhs.norm());
        let mut iterations = 0usize;
        let (converged, residual) = loop {
            let (f, k) = match system.surrogate.force_and_tangent(&x) {
                Ok(pair) => pair,
                // Overflow inside the surrogate means the iterate left the
                // representable range: a divergence, not a caller error.
                Err(Error::NonFinite(_)) => break (false, f64::NAN),
                Err(e) => return Err(e),
            };
            let res = &f - &rhs;
            let rn = res.norm();
            if !rn.is_finite() {
                break (false, rn);
            }
            if rn <= tol {
                break (true, rn);
            }
            if iterations == settings.max_iterations {
                break (false, rn);
            }
            let dx = match k.clone().lu().solve(&res) {
                Some(dx) => dx,
                None => {
                    // Rank-deficient tangent: retry once with a small shift
                    // proportional to the mean diagonal.
                    let mu = 1e-8 * k.trace() / r as f64;
                    let damped = &k + DMatrix::identity(r, r) * mu;
                    match damped.lu().solve(&res) {
                        Some(dx) => dx,
                        None => break (false, rn),
                    }
                }
            };
            x -= dx;
            iterations += 1;
        };
        if converged {
            steps.push(StepRecord {
                step,
                load: u.clone(),
                converged: true,
                iterations,
                residual,
                x_r: x.clone(),
            });
        } else {
            diverged_at = Some(step);
            let mut rec = sentinel(step, u, r);
            rec.iterations = iterations;
            rec.residual = residual;
            steps.push(rec);
            // Subsequent steps have no meaningful warm start; they are
            // emitted as sentinels by the branch above.
        }
    }

    Ok(SolveTrace { steps, diverged_at })
}

fn sentinel(step: usize, load: &DVector<f64>, r: usize) -> StepRecord {
    StepRecord {
        step,
        load: load.clone(),
        converged: false,
        iterations: 0,
        residual: f64::NAN,
        x_r: DVector::from_element(r, f64::NAN),
    }
}
