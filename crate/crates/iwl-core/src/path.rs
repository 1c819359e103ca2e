//! Realized semimartingale trajectories with explicit decomposition
//! X = X0 + M + V, and continuous quadratic covariation curves.

use std::sync::Arc;

use crate::coeffs::Coeffs;
use crate::drivers::DriverSet;
use crate::error::{EngineError, Result};
use crate::grid::TimeGrid;
use crate::linalg::Flat;

/// Jump record: grid indices (sorted) and the jump increments Delta X.
#[derive(Debug, Clone, PartialEq)]
pub struct Jumps {
    pub idx: Vec<u32>,
    pub delta: Flat,
}

impl Jumps {
    pub fn none(d: usize) -> Self {
        Jumps {
            idx: Vec::new(),
            delta: Flat::zeros(0, d),
        }
    }

    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    /// Jump increment at grid index k, if any.
    pub fn at(&self, k: usize) -> Option<&[f64]> {
        self.idx
            .binary_search(&(k as u32))
            .ok()
            .map(|r| self.delta.row(r))
    }

    pub fn cursor(&self) -> JumpCursor<'_> {
        JumpCursor { jumps: self, pos: 0 }
    }
}

/// Monotone cursor over jumps, for grid sweeps without per-step binary search.
pub struct JumpCursor<'a> {
    jumps: &'a Jumps,
    pos: usize,
}

impl<'a> JumpCursor<'a> {
    /// Jump increment at grid index k; indices must be queried non-decreasingly.
    #[inline]
    pub fn at(&mut self, k: usize) -> Option<&'a [f64]> {
        while self.pos < self.jumps.idx.len() && (self.jumps.idx[self.pos] as usize) < k {
            self.pos += 1;
        }
        if self.pos < self.jumps.idx.len() && self.jumps.idx[self.pos] as usize == k {
            Some(self.jumps.delta.row(self.pos))
        } else {
            None
        }
    }
}

/// Cadlag path observed on a grid: values plus recorded discontinuities.
/// This is the interface the formula verifiers need; it is implemented both
/// by simulated semimartingales and by derived observables (e.g. the
/// projected coordinates Z^j of a particle cloud).
#[derive(Debug, Clone)]
pub struct ObservedPath {
    pub grid: Arc<TimeGrid>,
    pub values: Flat,
    pub jumps: Jumps,
}

impl ObservedPath {
    pub fn d(&self) -> usize {
        self.values.width()
    }

    #[inline]
    pub fn value(&self, k: usize) -> &[f64] {
        self.values.row(k)
    }

    /// Pre-jump value X_{t_k-} written into `out`.
    pub fn left_limit_into(&self, k: usize, out: &mut [f64]) {
        out.copy_from_slice(self.values.row(k));
        if let Some(dx) = self.jumps.at(k) {
            for (o, d) in out.iter_mut().zip(dx) {
                *o -= d;
            }
        }
    }

    pub fn left_limit(&self, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.d()];
        self.left_limit_into(k, &mut out);
        out
    }

    /// Continuous part of the increment over (t_k, t_{k+1}]: the full
    /// increment minus any jump at the right endpoint.
    pub fn cont_increment_into(&self, k: usize, jump_at_next: Option<&[f64]>, out: &mut [f64]) {
        let a = self.values.row(k);
        let b = self.values.row(k + 1);
        for i in 0..out.len() {
            out[i] = b[i] - a[i];
        }
        if let Some(dx) = jump_at_next {
            for (o, d) in out.iter_mut().zip(dx) {
                *o -= d;
            }
        }
    }
}

/// One realized trajectory with its decomposition and (optionally) the
/// generator it was simulated from.
#[derive(Debug, Clone)]
pub struct SemimartingalePath {
    pub obs: ObservedPath,
    pub x0: Vec<f64>,
    /// Continuous martingale component M at each grid point (if stored).
    pub mart_cont: Option<Flat>,
    /// Finite-variation component V at each grid point (if stored).
    pub fin_var: Option<Flat>,
    pub coeffs: Option<Coeffs>,
}

impl SemimartingalePath {
    pub fn d(&self) -> usize {
        self.obs.d()
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.obs.grid
    }

    /// Pre-jump value X_{t-} at a grid time t > t_start.
    pub fn left_limit(&self, t: f64) -> Result<Vec<f64>> {
        let k = self.obs.grid.require_index(t)?;
        if k == 0 {
            return Err(EngineError::InvalidArgument(
                "left limit requested at t_start".into(),
            ));
        }
        Ok(self.obs.left_limit(k))
    }

    /// A path that is constant at x0 (no noise), useful as a trivial driver.
    pub fn constant(grid: Arc<TimeGrid>, x0: Vec<f64>) -> Self {
        let n = grid.len();
        let d = x0.len();
        let mut values = Flat::zeros(n, d);
        for k in 0..n {
            values.row_mut(k).copy_from_slice(&x0);
        }
        SemimartingalePath {
            obs: ObservedPath {
                grid,
                values,
                jumps: Jumps::none(d),
            },
            x0,
            mart_cont: None,
            fin_var: None,
            coeffs: None,
        }
    }
}

/// Options for the Euler scheme.
#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    /// Store the M/V decomposition series (needed for realized covariation
    /// and decomposition invariants; large flows may skip it to save memory).
    pub store_decomposition: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            store_decomposition: true,
        }
    }
}

/// Left-point Euler scheme on the (already event-augmented) grid. Jump
/// increments are applied exactly at their event times, which are grid points;
/// the jump map is evaluated at the pre-jump state.
pub fn simulate_semimartingale(
    coeffs: &Coeffs,
    x0: &[f64],
    drivers: &DriverSet,
    grid: &Arc<TimeGrid>,
    opts: SimOptions,
) -> Result<SemimartingalePath> {
    let d = coeffs.d;
    if x0.len() != d {
        return Err(EngineError::Dimension(format!(
            "x0 has dimension {}, coefficients declare {}",
            x0.len(),
            d
        )));
    }
    if drivers.d_w != coeffs.d_w {
        return Err(EngineError::Dimension(format!(
            "drivers have d_W={}, coefficients declare {}",
            drivers.d_w, coeffs.d_w
        )));
    }
    if drivers.event_streams.len() != coeffs.jumps.len() {
        return Err(EngineError::Dimension(format!(
            "{} event streams for {} declared jump parts",
            drivers.event_streams.len(),
            coeffs.jumps.len()
        )));
    }
    if drivers.brownian.rows() != grid.n_intervals() {
        return Err(EngineError::Dimension(
            "Brownian increments do not match the grid".into(),
        ));
    }

    let n = grid.len();
    // Events resolved to grid indices, merged over streams, ordered by index.
    let mut events: Vec<(usize, usize, f64)> = Vec::new(); // (grid idx, stream, mark)
    for (s, ev) in drivers.event_streams.iter().enumerate() {
        for &(t, mark) in ev {
            let k = grid.require_index(t)?;
            events.push((k, s, mark));
        }
    }
    events.sort_by_key(|&(k, s, _)| (k, s));

    let mut values = Flat::zeros(n, d);
    values.row_mut(0).copy_from_slice(x0);
    let (mut mart, mut fv) = if opts.store_decomposition {
        (Some(Flat::zeros(n, d)), Some(Flat::zeros(n, d)))
    } else {
        (None, None)
    };

    let mut jump_idx: Vec<u32> = Vec::new();
    let mut jump_delta = Flat::zeros(0, d);

    let mut bbuf = vec![0.0; d];
    let mut sbuf = vec![0.0; d * coeffs.d_w];
    let mut diff_inc = vec![0.0; d];
    let mut jbuf = vec![0.0; d];
    let mut x = x0.to_vec();
    let mut ev_ptr = 0usize;

    for k in 0..n - 1 {
        let t = grid.t(k);
        let dt = grid.dt(k);
        (coeffs.drift)(t, &x, &mut bbuf);
        (coeffs.diffusion)(t, &x, &mut sbuf);
        let dw = drivers.brownian.row(k);
        crate::linalg::matvec(&sbuf, d, coeffs.d_w, dw, &mut diff_inc);

        for i in 0..d {
            x[i] += bbuf[i] * dt + diff_inc[i];
        }
        if let Some(m) = mart.as_mut() {
            let prev: Vec<f64> = m.row(k).to_vec();
            let row = m.row_mut(k + 1);
            for i in 0..d {
                row[i] = prev[i] + diff_inc[i];
            }
        }
        let mut fv_jump = vec![0.0; d];

        // Jumps scheduled exactly at t_{k+1}, applied to the pre-jump state.
        let t_next = grid.t(k + 1);
        let mut total_jump = vec![0.0; d];
        let mut jumped = false;
        while ev_ptr < events.len() && events[ev_ptr].0 == k + 1 {
            let (_, stream, mark) = events[ev_ptr];
            (coeffs.jumps[stream].map)(t_next, mark, &x, &mut jbuf);
            for i in 0..d {
                x[i] += jbuf[i];
                total_jump[i] += jbuf[i];
                fv_jump[i] += jbuf[i];
            }
            jumped = true;
            ev_ptr += 1;
        }
        if jumped {
            jump_idx.push((k + 1) as u32);
            jump_delta.push_row(&total_jump);
        }
        if let Some(v) = fv.as_mut() {
            let prev: Vec<f64> = v.row(k).to_vec();
            let row = v.row_mut(k + 1);
            for i in 0..d {
                row[i] = prev[i] + bbuf[i] * dt + fv_jump[i];
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(EngineError::Simulation {
                time: t_next,
                reason: "state became non-finite".into(),
            });
        }
        values.row_mut(k + 1).copy_from_slice(&x);
    }

    Ok(SemimartingalePath {
        obs: ObservedPath {
            grid: Arc::clone(grid),
            values,
            jumps: Jumps {
                idx: jump_idx,
                delta: jump_delta,
            },
        },
        x0: x0.to_vec(),
        mart_cont: mart,
        fin_var: fv,
        coeffs: Some(coeffs.clone()),
    })
}

/// Covariation evaluation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovMode {
    /// Cumulative integral of sigma_x P sigma_y^T dt over shared coordinates.
    GeneratorExact,
    /// Cumulative sum of products of continuous-martingale increments.
    Realized,
}

/// Declaration of which Brownian coordinates of x and y coincide.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Overlap {
    /// Same driver: coordinate i of x's Brownian equals coordinate i of y's.
    Full,
    /// Drivers independent: continuous covariation vanishes.
    Independent,
    /// Explicit list of shared coordinate pairs (i in x's driver, j in y's).
    Pairs(Vec<(usize, usize)>),
}

impl Overlap {
    fn pairs(&self, d_wx: usize, d_wy: usize) -> Vec<(usize, usize)> {
        match self {
            Overlap::Full => (0..d_wx.min(d_wy)).map(|i| (i, i)).collect(),
            Overlap::Independent => Vec::new(),
            Overlap::Pairs(p) => p.clone(),
        }
    }
}

/// Cumulative continuous covariation [X,Y]^c_t, matrix-valued per grid point.
#[derive(Debug, Clone)]
pub struct CovariationCurve {
    pub grid: Arc<TimeGrid>,
    pub dx: usize,
    pub dy: usize,
    /// Row k is the dx x dy matrix [X,Y]^c_{t_k}, row-major.
    pub values: Flat,
    pub mode: CovMode,
}

impl CovariationCurve {
    #[inline]
    pub fn at(&self, k: usize) -> &[f64] {
        self.values.row(k)
    }

    /// Increment over (t_k, t_{k+1}] written into `out`.
    #[inline]
    pub fn inc_into(&self, k: usize, out: &mut [f64]) {
        let a = self.values.row(k);
        let b = self.values.row(k + 1);
        for i in 0..out.len() {
            out[i] = b[i] - a[i];
        }
    }
}

/// Continuous quadratic covariation of two paths on a common grid.
pub fn covariation_continuous(
    x: &SemimartingalePath,
    y: &SemimartingalePath,
    mode: CovMode,
    overlap: &Overlap,
) -> Result<CovariationCurve> {
    let grid = &x.obs.grid;
    if grid.points() != y.obs.grid.points() {
        return Err(EngineError::Grid("covariation requires a common grid".into()));
    }
    let (dx, dy) = (x.d(), y.d());
    let n = grid.len();
    let mut values = Flat::zeros(n, dx * dy);

    match mode {
        CovMode::GeneratorExact => {
            let cx = x.coeffs.as_ref().ok_or_else(|| {
                EngineError::InvalidArgument("generator-exact covariation requires coeffs on x".into())
            })?;
            let cy = y.coeffs.as_ref().ok_or_else(|| {
                EngineError::InvalidArgument("generator-exact covariation requires coeffs on y".into())
            })?;
            let pairs = overlap.pairs(cx.d_w, cy.d_w);
            let mut sx = vec![0.0; dx * cx.d_w];
            let mut sy = vec![0.0; dy * cy.d_w];
            for k in 0..n - 1 {
                let t = grid.t(k);
                let dt = grid.dt(k);
                (cx.diffusion)(t, x.obs.value(k), &mut sx);
                (cy.diffusion)(t, y.obs.value(k), &mut sy);
                let prev: Vec<f64> = values.row(k).to_vec();
                let row = values.row_mut(k + 1);
                row.copy_from_slice(&prev);
                for &(a, b) in &pairs {
                    for i in 0..dx {
                        for j in 0..dy {
                            row[i * dy + j] += sx[i * cx.d_w + a] * sy[j * cy.d_w + b] * dt;
                        }
                    }
                }
            }
        }
        CovMode::Realized => {
            let mx = x.mart_cont.as_ref().ok_or_else(|| {
                EngineError::InvalidArgument("realized covariation requires stored M on x".into())
            })?;
            let my = y.mart_cont.as_ref().ok_or_else(|| {
                EngineError::InvalidArgument("realized covariation requires stored M on y".into())
            })?;
            for k in 0..n - 1 {
                let prev: Vec<f64> = values.row(k).to_vec();
                let row = values.row_mut(k + 1);
                row.copy_from_slice(&prev);
                let (ax, bx) = (mx.row(k), mx.row(k + 1));
                let (ay, by) = (my.row(k), my.row(k + 1));
                for i in 0..dx {
                    let di = bx[i] - ax[i];
                    for j in 0..dy {
                        row[i * dy + j] += di * (by[j] - ay[j]);
                    }
                }
            }
        }
    }

    Ok(CovariationCurve {
        grid: Arc::clone(grid),
        dx,
        dy,
        values,
        mode,
    })
}

/// Decomposition defect max_k |values[k] - (x0 + M[k] + V[k])| (diagnostic).
pub fn decomposition_defect(p: &SemimartingalePath) -> Option<f64> {
    let (m, v) = (p.mart_cont.as_ref()?, p.fin_var.as_ref()?);
    let d = p.d();
    let mut worst: f64 = 0.0;
    for k in 0..p.obs.grid.len() {
        let x = p.obs.value(k);
        for i in 0..d {
            worst = worst.max((x[i] - (p.x0[i] + m.row(k)[i] + v.row(k)[i])).abs());
        }
    }
    Some(worst)
}
