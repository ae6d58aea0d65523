//! Non-intrusive hyperreduction toolkit.
//!
//! The pipeline runs end to end on a built-in geometrically nonlinear truss:
//! snapshot generation with a full-order Newton solver ([`refmodel`]),
//! POD reduction ([`reduction`]), two hyperreduced surrogates — trajectory
//! piecewise-linear models ([`tpwl`]) and convex-network energy surrogates
//! ([`pann`]) trained with Sobolev losses ([`training`]) — a reduced Newton
//! continuation solver ([`hypersolver`]), and error reporting that separates
//! interpolation from extrapolation ([`eval`]). The [`cli`] module wires the
//! stages into an idempotent, seed-deterministic command-line workflow.

pub mod archive;
pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod hypersolver;
pub mod pann;
pub mod reduction;
pub mod refmodel;
pub mod tpwl;
pub mod training;

pub use error::{Error, Result};
