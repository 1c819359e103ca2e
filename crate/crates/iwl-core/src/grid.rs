//! Time grids: a uniform base partition merged with exact jump-event times.

use crate::error::{EngineError, Result};

/// Strictly increasing time points from `t_start` to `t_end`, containing all
/// injected event times exactly (events are never snapped to the base grid).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    /// Uniform base grid of `n_steps` intervals merged with `extra_times`,
    /// sorted and deduplicated.
    pub fn build(t_start: f64, t_end: f64, n_steps: usize, extra_times: &[f64]) -> Result<Self> {
        if !(t_start < t_end) {
            return Err(EngineError::Grid(format!(
                "t_start ({t_start}) must be strictly less than t_end ({t_end})"
            )));
        }
        if n_steps < 1 {
            return Err(EngineError::Grid("n_steps must be >= 1".into()));
        }
        for &t in extra_times {
            if !(t > t_start && t <= t_end) || !t.is_finite() {
                return Err(EngineError::Grid(format!(
                    "extra time {t} outside ({t_start}, {t_end}]"
                )));
            }
        }
        let mut points = Vec::with_capacity(n_steps + 1 + extra_times.len());
        let dt = (t_end - t_start) / n_steps as f64;
        for k in 0..=n_steps {
            points.push(if k == n_steps {
                t_end
            } else {
                t_start + k as f64 * dt
            });
        }
        points.extend_from_slice(extra_times);
        points.sort_by(|a, b| a.partial_cmp(b).unwrap());
        points.dedup();
        Ok(TimeGrid { points })
    }

    /// Grid with the given points merged with additional times in range.
    pub fn merged_with(&self, extra_times: &[f64]) -> Result<Self> {
        let (s, e) = (self.t_start(), self.t_end());
        for &t in extra_times {
            if !(t > s && t <= e) || !t.is_finite() {
                return Err(EngineError::Grid(format!("extra time {t} outside ({s}, {e}]")));
            }
        }
        let mut points = self.points.clone();
        points.extend_from_slice(extra_times);
        points.sort_by(|a, b| a.partial_cmp(b).unwrap());
        points.dedup();
        Ok(TimeGrid { points })
    }

    #[inline]
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of intervals.
    #[inline]
    pub fn n_intervals(&self) -> usize {
        self.points.len() - 1
    }

    #[inline]
    pub fn t(&self, i: usize) -> f64 {
        self.points[i]
    }

    #[inline]
    pub fn dt(&self, i: usize) -> f64 {
        self.points[i + 1] - self.points[i]
    }

    #[inline]
    pub fn t_start(&self) -> f64 {
        self.points[0]
    }

    #[inline]
    pub fn t_end(&self) -> f64 {
        *self.points.last().unwrap()
    }

    /// Exact index of a grid time, if present.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        self.points
            .binary_search_by(|p| p.partial_cmp(&t).unwrap())
            .ok()
    }

    /// Index of a grid time, with a descriptive error otherwise.
    pub fn require_index(&self, t: f64) -> Result<usize> {
        self.index_of(t)
            .ok_or_else(|| EngineError::Grid(format!("time {t} is not a grid point")))
    }
}
