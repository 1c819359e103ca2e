//! Result types: per-formula term breakdowns, per-term time series, Monte
//! Carlo verification reports, and convergence-study summaries.

use serde::Serialize;

use crate::linalg::Flat;

/// Every named term of one formula instance, plus the left-hand side.
#[derive(Debug, Clone, Serialize)]
pub struct TermBreakdown {
    pub formula: String,
    pub lhs: f64,
    /// Label -> value, in formula order.
    pub terms: Vec<(String, f64)>,
}

impl TermBreakdown {
    pub fn new(formula: impl Into<String>, lhs: f64) -> Self {
        TermBreakdown {
            formula: formula.into(),
            lhs,
            terms: Vec::new(),
        }
    }

    pub fn push(&mut self, label: impl Into<String>, value: f64) {
        self.terms.push((label.into(), value));
    }

    pub fn rhs(&self) -> f64 {
        self.terms.iter().map(|(_, v)| v).sum()
    }

    /// lhs - sum of term values (exact arithmetic identity).
    pub fn residual(&self) -> f64 {
        self.lhs - self.rhs()
    }

    pub fn term(&self, label: &str) -> Option<f64> {
        self.terms
            .iter()
            .find(|(l, _)| l == label)
            .map(|&(_, v)| v)
    }
}

/// Cumulative per-term time series (plot-ready; one row per grid point).
#[derive(Debug, Clone)]
pub struct TermCurves {
    pub labels: Vec<String>,
    pub times: Vec<f64>,
    /// Row k holds the cumulative value of each term at times[k].
    pub values: Flat,
}

impl TermCurves {
    pub fn new(labels: Vec<String>, times: Vec<f64>) -> Self {
        let n = times.len();
        let w = labels.len();
        TermCurves {
            labels,
            times,
            values: Flat::zeros(n, w),
        }
    }

    /// Write as CSV: time column plus one column per term.
    pub fn write_csv(&self, w: &mut impl std::io::Write) -> crate::error::Result<()> {
        write!(w, "time")?;
        for l in &self.labels {
            // Labels may contain commas (bracket notation); quote per RFC 4180.
            if l.contains(',') || l.contains('"') {
                write!(w, ",\"{}\"", l.replace('"', "\"\""))?;
            } else {
                write!(w, ",{l}")?;
            }
        }
        writeln!(w)?;
        for k in 0..self.times.len() {
            write!(w, "{}", self.times[k])?;
            for v in self.values.row(k) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Aggregate over independent Monte Carlo samples of one verification.
#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub formula: String,
    pub mode: String,
    pub seed: u64,
    pub n_samples: usize,
    pub mean_residual: f64,
    /// Standard error of the mean residual over independent samples.
    pub se: f64,
    pub max_abs_residual: f64,
    /// RMS of residuals over samples.
    pub rms_residual: f64,
    /// Mean value of each term across samples (labels from the first sample).
    pub mean_terms: Vec<(String, f64)>,
    pub breakdowns: Vec<TermBreakdown>,
    /// Filled by the runner from the scenario's threshold policy.
    pub threshold: Option<f64>,
    pub pass: Option<bool>,
}

impl VerificationReport {
    pub fn from_breakdowns(
        formula: impl Into<String>,
        mode: impl Into<String>,
        seed: u64,
        breakdowns: Vec<TermBreakdown>,
    ) -> Self {
        assert!(!breakdowns.is_empty());
        let residuals: Vec<f64> = breakdowns.iter().map(|b| b.residual()).collect();
        let (mean, se) = crate::stats::mean_se(&residuals);
        let mut mean_terms: Vec<(String, f64)> = breakdowns[0]
            .terms
            .iter()
            .map(|(l, _)| (l.clone(), 0.0))
            .collect();
        for b in &breakdowns {
            for (slot, (_, v)) in mean_terms.iter_mut().zip(&b.terms) {
                slot.1 += v / breakdowns.len() as f64;
            }
        }
        VerificationReport {
            formula: formula.into(),
            mode: mode.into(),
            seed,
            n_samples: breakdowns.len(),
            mean_residual: mean,
            se,
            max_abs_residual: crate::stats::max_abs(&residuals),
            rms_residual: crate::stats::rms(&residuals),
            mean_terms,
            breakdowns,
            threshold: None,
            pass: None,
        }
    }

    pub fn apply_threshold(&mut self, threshold: f64) {
        self.threshold = Some(threshold);
        self.pass = Some(self.mean_residual.abs() <= threshold);
    }
}

/// Result of sweeping one size parameter and fitting a log-log slope.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceResult {
    pub parameter: String,
    pub levels: Vec<f64>,
    /// Aggregate |residual| (RMS over samples) per level.
    pub aggregate: Vec<f64>,
    pub slope: f64,
    /// Half-width of the 95% confidence interval of the slope.
    pub slope_ci: f64,
}

impl ConvergenceResult {
    pub fn fit(parameter: impl Into<String>, levels: Vec<f64>, aggregate: Vec<f64>) -> Self {
        let (slope, slope_ci) = crate::stats::loglog_slope(&levels, &aggregate);
        ConvergenceResult {
            parameter: parameter.into(),
            levels,
            aggregate,
            slope,
            slope_ci,
        }
    }
}
