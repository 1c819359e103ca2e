//! Particle representations of measure flows: full-law clouds of i.i.d.
//! particles and conditional-law clouds at frozen common noise.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;

use crate::coeffs::Coeffs;
use crate::drivers::{sample_brownian, sample_events, DriverSet, EventList};
use crate::error::{EngineError, Result};
use crate::grid::TimeGrid;
use crate::linalg::Flat;
use crate::measure::EmpiricalMeasure;
use crate::path::{simulate_semimartingale, SemimartingalePath, SimOptions};
use crate::rng::tag;

/// N particle trajectories sharing one (event-augmented) grid.
#[derive(Debug, Clone)]
pub struct EmpiricalFlow {
    pub grid: Arc<TimeGrid>,
    pub particles: Vec<SemimartingalePath>,
}

impl EmpiricalFlow {
    pub fn n(&self) -> usize {
        self.particles.len()
    }

    pub fn d(&self) -> usize {
        self.particles[0].d()
    }

    /// Empirical measure at grid index k.
    pub fn measure_at(&self, k: usize) -> EmpiricalMeasure {
        let d = self.d();
        let mut atoms = Flat::with_capacity(self.n(), d);
        for p in &self.particles {
            atoms.push_row(p.obs.value(k));
        }
        EmpiricalMeasure {
            atoms,
            weights: vec![1.0 / self.n() as f64; self.n()],
        }
    }

    /// Empirical measure built from particle left limits at grid index k.
    pub fn measure_at_left(&self, k: usize) -> EmpiricalMeasure {
        let d = self.d();
        let mut atoms = Flat::with_capacity(self.n(), d);
        let mut buf = vec![0.0; d];
        for p in &self.particles {
            p.obs.left_limit_into(k, &mut buf);
            atoms.push_row(&buf);
        }
        EmpiricalMeasure {
            atoms,
            weights: vec![1.0 / self.n() as f64; self.n()],
        }
    }

    /// Sorted distinct grid indices at which some particle jumps.
    pub fn jump_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self
            .particles
            .iter()
            .flat_map(|p| p.obs.jumps.idx.iter().map(|&k| k as usize))
            .collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    }

    /// Mean state across particles at every grid point (d-wide rows).
    pub fn mean_path(&self) -> Flat {
        let (n, d) = (self.n(), self.d());
        let mut out = Flat::zeros(self.grid.len(), d);
        for p in &self.particles {
            for k in 0..self.grid.len() {
                let row = out.row_mut(k);
                let v = p.obs.value(k);
                for i in 0..d {
                    row[i] += v[i] / n as f64;
                }
            }
        }
        out
    }

    /// Plot-ready export: one row per (time, particle) with state coordinates.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let d = self.d();
        write!(w, "time,particle")?;
        for i in 0..d {
            write!(w, ",x{i}")?;
        }
        writeln!(w)?;
        for k in 0..self.grid.len() {
            for (i, p) in self.particles.iter().enumerate() {
                write!(w, "{},{}", self.grid.t(k), i)?;
                for v in p.obs.value(k) {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Pre-sampled jump events for every particle of a flow (sampled before the
/// union grid is built, so several flows can share one grid).
#[derive(Debug, Clone)]
pub struct FlowEvents {
    /// per_particle[i][stream] = sorted event list.
    pub per_particle: Vec<Vec<EventList>>,
    pub all_times: Vec<f64>,
}

impl FlowEvents {
    pub fn empty(n: usize, streams: usize) -> Self {
        FlowEvents {
            per_particle: vec![vec![Vec::new(); streams]; n],
            all_times: Vec::new(),
        }
    }
}

/// Sample the Poisson events of all N particles of a flow.
pub fn sample_flow_events(
    coeffs: &Coeffs,
    n: usize,
    t_start: f64,
    t_end: f64,
    seed: u64,
    tags: &[u64],
) -> FlowEvents {
    let mut per_particle = Vec::with_capacity(n);
    let mut all_times = Vec::new();
    for i in 0..n {
        let mut streams = Vec::with_capacity(coeffs.jumps.len());
        for (j, part) in coeffs.jumps.iter().enumerate() {
            let ev = sample_events(
                &part.spec,
                t_start,
                t_end,
                seed,
                &[tags, &[tag::PARTICLE, i as u64, j as u64]].concat(),
            );
            all_times.extend(ev.iter().map(|&(t, _)| t));
            streams.push(ev);
        }
        per_particle.push(streams);
    }
    FlowEvents {
        per_particle,
        all_times,
    }
}

/// Simulate all particles on an already-built union grid.
pub fn simulate_flow_on_grid(
    coeffs: &Coeffs,
    x0: &[f64],
    grid: &Arc<TimeGrid>,
    events: &FlowEvents,
    seed: u64,
    tags: &[u64],
    opts: SimOptions,
) -> Result<EmpiricalFlow> {
    let particles: Vec<SemimartingalePath> = events
        .per_particle
        .par_iter()
        .enumerate()
        .map(|(i, streams)| {
            let brownian = sample_brownian(
                grid,
                coeffs.d_w,
                seed,
                &[tags, &[tag::PARTICLE, i as u64]].concat(),
            );
            let drivers = DriverSet {
                seed,
                d_w: coeffs.d_w,
                brownian,
                event_streams: streams.clone(),
            };
            simulate_semimartingale(coeffs, x0, &drivers, grid, opts).map_err(|e| {
                EngineError::Simulation {
                    time: grid.t_start(),
                    reason: format!("particle {i}: {e}"),
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EmpiricalFlow {
        grid: Arc::clone(grid),
        particles,
    })
}

/// N i.i.d. particles approximating the full law flow; the grid is the base
/// grid augmented with every particle's event times.
pub fn simulate_full_flow(
    coeffs: &Coeffs,
    x0: &[f64],
    n: usize,
    base_grid: &TimeGrid,
    seed: u64,
    tags: &[u64],
    opts: SimOptions,
) -> Result<EmpiricalFlow> {
    if n < 1 {
        return Err(EngineError::InvalidArgument("flow needs N >= 1".into()));
    }
    let events = sample_flow_events(coeffs, n, base_grid.t_start(), base_grid.t_end(), seed, tags);
    let grid = Arc::new(base_grid.merged_with(&events.all_times)?);
    simulate_flow_on_grid(coeffs, x0, &grid, &events, seed, tags, opts)
}

/// Conditional-law cloud: N particles sharing one frozen common noise
/// realization; the empirical measure across particles approximates the
/// conditional law given the common noise.
#[derive(Debug, Clone)]
pub struct ConditionalParticleSystem {
    pub flow: EmpiricalFlow,
    /// Common Brownian increments (width = coeffs.d_w_common).
    pub common_brownian: Flat,
    /// Common event streams (the first `common_jump_streams` of the coeffs).
    pub common_events: Vec<EventList>,
    /// Designated conditionally independent copies (X', X'').
    pub copies: (usize, usize),
    pub coeffs: Coeffs,
}

impl ConditionalParticleSystem {
    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.flow.grid
    }

    /// Driver set carrying only the common noise (for simulating
    /// common-measurable companion paths such as a field driver Y).
    pub fn common_driver_set(&self) -> DriverSet {
        DriverSet {
            seed: 0,
            d_w: self.coeffs.d_w_common,
            brownian: self.common_brownian.clone(),
            event_streams: self.common_events.clone(),
        }
    }
}

/// Simulate a conditional particle system. The first `d_w_common` Brownian
/// coordinates and the first `common_jump_streams` jump streams of `coeffs`
/// are shared by all particles; the rest are idiosyncratic per particle.
pub fn simulate_conditional_flow(
    coeffs: &Coeffs,
    x0: &[f64],
    n: usize,
    base_grid: &TimeGrid,
    seed: u64,
    tags: &[u64],
    opts: SimOptions,
) -> Result<ConditionalParticleSystem> {
    if n < 3 {
        return Err(EngineError::InvalidArgument(
            "conditional flow needs N >= 3 (X, X', X'' distinct)".into(),
        ));
    }
    let (t0, t1) = (base_grid.t_start(), base_grid.t_end());
    let n_common = coeffs.common_jump_streams;
    let n_idio_streams = coeffs.jumps.len() - n_common;

    // Common events, sampled once.
    let mut common_events: Vec<EventList> = Vec::with_capacity(n_common);
    let mut all_times = Vec::new();
    for j in 0..n_common {
        let ev = sample_events(
            &coeffs.jumps[j].spec,
            t0,
            t1,
            seed,
            &[tags, &[tag::COMMON, j as u64]].concat(),
        );
        all_times.extend(ev.iter().map(|&(t, _)| t));
        common_events.push(ev);
    }
    // Idiosyncratic events per particle.
    let mut idio_events: Vec<Vec<EventList>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut streams = Vec::with_capacity(n_idio_streams);
        for j in 0..n_idio_streams {
            let ev = sample_events(
                &coeffs.jumps[n_common + j].spec,
                t0,
                t1,
                seed,
                &[tags, &[tag::PARTICLE, i as u64, j as u64]].concat(),
            );
            all_times.extend(ev.iter().map(|&(t, _)| t));
            streams.push(ev);
        }
        idio_events.push(streams);
    }

    let grid = Arc::new(base_grid.merged_with(&all_times)?);
    let d_wc = coeffs.d_w_common;
    let d_wi = coeffs.d_w - d_wc;
    let common_brownian = sample_brownian(&grid, d_wc, seed, &[tags, &[tag::COMMON]].concat());

    let particles: Vec<SemimartingalePath> = (0..n)
        .into_par_iter()
        .map(|i| {
            let idio = sample_brownian(
                &grid,
                d_wi,
                seed,
                &[tags, &[tag::PARTICLE, i as u64]].concat(),
            );
            // Concatenate [common | idio] per interval.
            let mut brownian = Flat::zeros(grid.n_intervals(), coeffs.d_w);
            for k in 0..grid.n_intervals() {
                let row = brownian.row_mut(k);
                row[..d_wc].copy_from_slice(common_brownian.row(k));
                row[d_wc..].copy_from_slice(idio.row(k));
            }
            let mut event_streams = common_events.clone();
            event_streams.extend(idio_events[i].clone());
            let drivers = DriverSet {
                seed,
                d_w: coeffs.d_w,
                brownian,
                event_streams,
            };
            simulate_semimartingale(coeffs, x0, &drivers, &grid, opts).map_err(|e| {
                EngineError::Simulation {
                    time: t0,
                    reason: format!("particle {i}: {e}"),
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ConditionalParticleSystem {
        flow: EmpiricalFlow {
            grid,
            particles,
        },
        common_brownian,
        common_events,
        copies: (1, 2),
        coeffs: coeffs.clone(),
    })
}

/// The designated conditionally independent copies (X', X'').
pub fn conditional_copies(
    sys: &ConditionalParticleSystem,
) -> Result<(&SemimartingalePath, &SemimartingalePath)> {
    let (a, b) = sys.copies;
    if a == b || a >= sys.flow.n() || b >= sys.flow.n() {
        return Err(EngineError::InvalidArgument(
            "conditional copies must be distinct particle indices".into(),
        ));
    }
    Ok((&sys.flow.particles[a], &sys.flow.particles[b]))
}
