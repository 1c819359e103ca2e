//! Driving noise: Brownian increments on a grid and marked Poisson events.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{EngineError, Result};
use crate::grid::TimeGrid;
use crate::linalg::Flat;
use crate::rng::{derive, tag};

/// Distribution of marks on the (scalar) mark space E. Finite supports allow
/// exact quadrature against the intensity measure; samplers do not.
#[derive(Clone)]
pub enum MarkDist {
    /// Weighted finite support; probabilities must sum to 1.
    Finite(Vec<(f64, f64)>),
    /// User-supplied normalized sampler.
    Sampler(Arc<dyn Fn(&mut ChaCha8Rng) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for MarkDist {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MarkDist::Finite(w) => write!(f, "Finite({w:?})"),
            MarkDist::Sampler(_) => write!(f, "Sampler(..)"),
        }
    }
}

impl MarkDist {
    pub fn unit() -> Self {
        MarkDist::Finite(vec![(1.0, 1.0)])
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            MarkDist::Finite(w) => {
                let u: f64 = rng.gen::<f64>();
                let mut acc = 0.0;
                for &(mark, p) in w {
                    acc += p;
                    if u < acc {
                        return mark;
                    }
                }
                w.last().map(|&(m, _)| m).unwrap_or(0.0)
            }
            MarkDist::Sampler(f) => f(rng),
        }
    }

    fn validate(&self) -> Result<()> {
        if let MarkDist::Finite(w) = self {
            if w.is_empty() {
                return Err(EngineError::Driver("finite mark set is empty".into()));
            }
            let total: f64 = w.iter().map(|&(_, p)| p).sum();
            if w.iter().any(|&(_, p)| p < 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(EngineError::Driver(format!(
                    "mark probabilities must be nonnegative and sum to 1 (got {total})"
                )));
            }
        }
        Ok(())
    }
}

/// Finite-intensity Poisson jump specification: total mass `rate` = nu(E) and
/// a normalized mark distribution.
#[derive(Clone, Debug)]
pub struct JumpSpec {
    pub rate: f64,
    pub marks: MarkDist,
}

impl JumpSpec {
    pub fn new(rate: f64, marks: MarkDist) -> Result<Self> {
        if !rate.is_finite() || rate < 0.0 {
            return Err(EngineError::Driver(format!(
                "intensity mass must be finite and nonnegative (got {rate})"
            )));
        }
        marks.validate()?;
        Ok(JumpSpec { rate, marks })
    }

    pub fn unit_jumps(rate: f64) -> Result<Self> {
        Self::new(rate, MarkDist::unit())
    }
}

/// Marked events of one Poisson stream, sorted by time.
pub type EventList = Vec<(f64, f64)>;

/// Sample event times and marks on (t_start, t_end). The right endpoint is
/// excluded so a path never jumps exactly at the terminal time (boundary
/// events are rejected by policy, matching the no-jump-at-T assumption).
pub fn sample_events(spec: &JumpSpec, t_start: f64, t_end: f64, seed: u64, tags: &[u64]) -> EventList {
    let mut rng = derive(seed, &[tags, &[tag::EVENTS]].concat());
    let horizon = t_end - t_start;
    let mean = spec.rate * horizon;
    if mean == 0.0 {
        return Vec::new();
    }
    let count = rand_distr::Poisson::new(mean).expect("positive mean").sample(&mut rng) as usize;
    let mut events: EventList = (0..count)
        .map(|_| {
            let u: f64 = rng.gen::<f64>(); // in [0, 1)
            let t = t_start + u * horizon;
            (t, 0.0)
        })
        .collect();
    events.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // Marks drawn after sorting so the (time, mark) pairing is exchangeable.
    for e in events.iter_mut() {
        e.1 = spec.marks.sample(&mut rng);
    }
    events.retain(|&(t, _)| t > t_start && t < t_end);
    events
}

/// Sample d_W-dimensional Brownian increments per grid interval.
pub fn sample_brownian(grid: &TimeGrid, d_w: usize, seed: u64, tags: &[u64]) -> Flat {
    let mut rng = derive(seed, &[tags, &[tag::BROWNIAN]].concat());
    let n = grid.n_intervals();
    let mut inc = Flat::zeros(n, d_w);
    for k in 0..n {
        let sd = grid.dt(k).sqrt();
        let row = inc.row_mut(k);
        for v in row.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = sd * z;
        }
    }
    inc
}

/// Realized drivers for one path: Brownian increments on the (augmented) grid
/// and one event list per jump stream.
#[derive(Debug, Clone)]
pub struct DriverSet {
    pub seed: u64,
    pub d_w: usize,
    /// Brownian increments, one row per grid interval.
    pub brownian: Flat,
    /// One sorted event list per declared jump stream.
    pub event_streams: Vec<EventList>,
}

/// Sample drivers for a single path: Poisson events first (injected into the
/// grid), then Brownian increments on the augmented grid. Deterministic in
/// (seed, tags).
pub fn sample_drivers(
    grid: &TimeGrid,
    d_w: usize,
    jumps: &[JumpSpec],
    seed: u64,
    tags: &[u64],
) -> Result<(DriverSet, TimeGrid)> {
    let mut event_streams = Vec::with_capacity(jumps.len());
    let mut all_times = Vec::new();
    for (j, spec) in jumps.iter().enumerate() {
        JumpSpec::new(spec.rate, spec.marks.clone())?; // re-validate
        let ev = sample_events(spec, grid.t_start(), grid.t_end(), seed, &[tags, &[j as u64]].concat());
        all_times.extend(ev.iter().map(|&(t, _)| t));
        event_streams.push(ev);
    }
    let grid = grid.merged_with(&all_times)?;
    let brownian = sample_brownian(&grid, d_w, seed, tags);
    Ok((
        DriverSet {
            seed,
            d_w,
            brownian,
            event_streams,
        },
        grid,
    ))
}
