//! Convergence studies: rerun a verifier across levels of one resolution
//! parameter (time step, cloud size, or world count) and fit the log-log
//! slope of the aggregate residual. The identities themselves are exact, so
//! the fitted order quantifies discretization and sampling error only.

use crate::error::{EngineError, Result};

use super::report::ConvergenceResult;

/// Run `eval` at each level and fit the log-log slope of its aggregate.
///
/// `levels` are the raw parameter values (e.g. Δt, N, or M); `eval` returns
/// the aggregate |residual| measure for one level (typically an RMS over
/// paths or the standard error over worlds). The same root seed should be
/// used inside `eval` at every level so that levels share random numbers
/// where the parameter permits.
pub fn convergence_study<F>(
    parameter: impl Into<String>,
    levels: &[f64],
    mut eval: F,
) -> Result<ConvergenceResult>
where
    F: FnMut(f64) -> Result<f64>,
{
    if levels.len() < 3 {
        return Err(EngineError::InvalidArgument(
            "a convergence study needs at least 3 levels".into(),
        ));
    }
    if levels.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(EngineError::InvalidArgument(
            "sweep levels must be positive and finite".into(),
        ));
    }
    let mut aggregate = Vec::with_capacity(levels.len());
    for &l in levels {
        aggregate.push(eval(l)?);
    }
    Ok(ConvergenceResult::fit(parameter, levels.to_vec(), aggregate))
}
