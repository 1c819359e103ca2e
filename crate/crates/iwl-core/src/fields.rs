//! Random fields driven by a realized semimartingale path Y:
//!   F(t, .) = F0(.) + int_0^t G_s(.) ds + int_0^t H_s(.) dY_s,
//! in three flavors — measure-argument F(t,mu), space-argument F(t,x), and
//! product space-measure F(t,x,mu) — plus the Poisson-driven variant with a
//! mark-dependent jump layer, and the derivative/stochastic-integral
//! interchange check realized on the discrete lift.
//!
//! Every layer is "shape x adapted scalar": a fixed cylindrical (or space)
//! function times a deterministic time modulation, integrated against dt or
//! dY. Once bound to a Y-path, the field at a grid time is a finite weighted
//! sum of its layer shapes, so all derivatives are closed-form and the
//! time-additivity of the integrals is exact (telescoping).

use std::sync::Arc;

use crate::calculus::{CylindricalFn, OuterFn, OuterTerm, TestFunction};
use crate::drivers::EventList;
use crate::error::{EngineError, Result};
use crate::grid::TimeGrid;
use crate::linalg::Flat;
use crate::measure::EmpiricalMeasure;
use crate::path::{Jumps, ObservedPath};

/// Deterministic scalar time modulation of a layer.
#[derive(Clone)]
pub enum Modulation {
    Const(f64),
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl Modulation {
    #[inline]
    pub fn at(&self, t: f64) -> f64 {
        match self {
            Modulation::Const(c) => *c,
            Modulation::Custom(f) => f(t),
        }
    }
}

impl std::fmt::Debug for Modulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modulation::Const(c) => write!(f, "Const({c})"),
            Modulation::Custom(_) => write!(f, "Custom"),
        }
    }
}

/// Cumulative integration weights of the dt- and dY-layers of a field along a
/// realized driver path. For grid index i:
///   wg[l][i] = sum_{k<i} m_l(t_k) dt_k          (left-point Riemann)
///   wh[l][i] = sum_{k<i} m_l(t_k) (Y_{k+1} - Y_k)  (left-point Ito, full Y)
///   wh_left[l][i] = wh[l][i] minus the contribution of Y's jump at t_i,
/// so wh_left realizes the integral up to t_i- (left limit in time).
#[derive(Debug, Clone)]
pub struct DriverWeights {
    pub grid: Arc<TimeGrid>,
    pub wg: Vec<Vec<f64>>,
    pub wh: Vec<Vec<f64>>,
    pub wh_left: Vec<Vec<f64>>,
}

impl DriverWeights {
    pub fn compute(
        g_mods: &[&Modulation],
        h_specs: &[(usize, &Modulation)],
        y: &ObservedPath,
    ) -> Result<Self> {
        let grid = Arc::clone(&y.grid);
        let n = grid.len();
        for &(coord, _) in h_specs {
            if coord >= y.d() {
                return Err(EngineError::Dimension(format!(
                    "dY-layer references driver coordinate {coord}, driver has d={}",
                    y.d()
                )));
            }
        }
        let mut wg = vec![vec![0.0; n]; g_mods.len()];
        let mut wh = vec![vec![0.0; n]; h_specs.len()];
        let mut wh_left = vec![vec![0.0; n]; h_specs.len()];
        let mut cursor = y.jumps.cursor();
        for i in 1..n {
            let tk = grid.t(i - 1);
            let dt = grid.dt(i - 1);
            for (l, m) in g_mods.iter().enumerate() {
                wg[l][i] = wg[l][i - 1] + m.at(tk) * dt;
            }
            let (ya, yb) = (y.value(i - 1), y.value(i));
            let jump = cursor.at(i);
            for (l, &(coord, m)) in h_specs.iter().enumerate() {
                let mk = m.at(tk);
                wh[l][i] = wh[l][i - 1] + mk * (yb[coord] - ya[coord]);
                let dy_jump = jump.map_or(0.0, |j| j[coord]);
                wh_left[l][i] = wh[l][i] - mk * dy_jump;
            }
        }
        Ok(DriverWeights {
            grid,
            wg,
            wh,
            wh_left,
        })
    }
}

/// Combine weighted cylindrical layers into one cylindrical function on the
/// concatenated inner list (outer terms reindexed and scaled).
pub fn combine_layers(layers: &[(f64, &CylindricalFn)]) -> Result<CylindricalFn> {
    let mut inner: Vec<TestFunction> = Vec::new();
    let mut terms: Vec<OuterTerm> = Vec::new();
    for &(w, f) in layers {
        let off = inner.len();
        inner.extend(f.inner.iter().cloned());
        for t in &f.outer.terms {
            terms.push(match *t {
                OuterTerm::Const(c) => OuterTerm::Const(w * c),
                OuterTerm::Lin(i, c) => OuterTerm::Lin(i + off, w * c),
                OuterTerm::Quad(i, j, c) => OuterTerm::Quad(i + off, j + off, w * c),
                OuterTerm::Cubic(i, j, k, c) => OuterTerm::Cubic(i + off, j + off, k + off, w * c),
                OuterTerm::Sin(i, a, amp) => OuterTerm::Sin(i + off, a, w * amp),
            });
        }
    }
    CylindricalFn::new(OuterFn::new(inner.len(), terms), inner)
}

/// Measure-argument random field F(t, mu).
#[derive(Debug, Clone)]
pub struct MeasureField {
    /// Constant layers (the t=0 value).
    pub f0: Vec<(f64, CylindricalFn)>,
    /// dt-integrated layers.
    pub g: Vec<(Modulation, CylindricalFn)>,
    /// dY-integrated layers: (driver coordinate, modulation, shape).
    pub h: Vec<(usize, Modulation, CylindricalFn)>,
}

impl MeasureField {
    pub fn n_layers(&self) -> usize {
        self.f0.len() + self.g.len() + self.h.len()
    }

    /// Static field: F(t, mu) = F0(mu).
    pub fn static_field(f0: CylindricalFn) -> Self {
        MeasureField {
            f0: vec![(1.0, f0)],
            g: Vec::new(),
            h: Vec::new(),
        }
    }

    /// All layer shapes in canonical order [f0..., g..., h...].
    pub fn shapes(&self) -> Vec<&CylindricalFn> {
        self.f0
            .iter()
            .map(|(_, f)| f)
            .chain(self.g.iter().map(|(_, f)| f))
            .chain(self.h.iter().map(|(_, _, f)| f))
            .collect()
    }

    /// Number of driver coordinates this field integrates against.
    pub fn required_driver_dim(&self) -> usize {
        self.h.iter().map(|&(c, _, _)| c + 1).max().unwrap_or(0)
    }

    pub fn bind(self: &Arc<Self>, y: &ObservedPath) -> Result<BoundMeasureField> {
        let g_mods: Vec<&Modulation> = self.g.iter().map(|(m, _)| m).collect();
        let h_specs: Vec<(usize, &Modulation)> =
            self.h.iter().map(|(c, m, _)| (*c, m)).collect();
        let weights = DriverWeights::compute(&g_mods, &h_specs, y)?;
        Ok(BoundMeasureField {
            field: Arc::clone(self),
            weights,
        })
    }
}

/// A MeasureField realized along a driver path: pure, immutable evaluation.
#[derive(Debug, Clone)]
pub struct BoundMeasureField {
    pub field: Arc<MeasureField>,
    pub weights: DriverWeights,
}

impl BoundMeasureField {
    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.weights.grid
    }

    /// Layer weights at grid index i, canonical order; `left` selects the
    /// time-left-limit (excluding the driver's jump at t_i, if any).
    pub fn weights_into(&self, i: usize, left: bool, out: &mut [f64]) {
        let f = &self.field;
        let mut p = 0;
        for (c, _) in &f.f0 {
            out[p] = *c;
            p += 1;
        }
        for l in 0..f.g.len() {
            out[p] = self.weights.wg[l][i];
            p += 1;
        }
        let wh = if left {
            &self.weights.wh_left
        } else {
            &self.weights.wh
        };
        for l in 0..f.h.len() {
            out[p] = wh[l][i];
            p += 1;
        }
    }

    pub fn layer_weights(&self, i: usize, left: bool) -> Vec<f64> {
        let mut out = vec![0.0; self.field.n_layers()];
        self.weights_into(i, left, &mut out);
        out
    }

    /// F(t_i, mu) (or F(t_i-, mu) with `left`).
    pub fn eval(&self, i: usize, left: bool, mu: &EmpiricalMeasure) -> f64 {
        let w = self.layer_weights(i, left);
        self.field
            .shapes()
            .iter()
            .zip(&w)
            .map(|(f, wl)| wl * f.eval(mu))
            .sum()
    }

    pub fn eval_at_time(&self, t: f64, mu: &EmpiricalMeasure) -> Result<f64> {
        Ok(self.eval(self.weights.grid.require_index(t)?, false, mu))
    }

    /// The field at (t_i, .) as a single cylindrical function.
    pub fn combined(&self, i: usize, left: bool) -> Result<CylindricalFn> {
        let w = self.layer_weights(i, left);
        let shapes = self.field.shapes();
        let layers: Vec<(f64, &CylindricalFn)> =
            w.into_iter().zip(shapes.into_iter()).collect();
        combine_layers(&layers)
    }

    /// Integrand value G_{t_k}(mu) at the left grid point.
    pub fn g_value(&self, k: usize, mu: &EmpiricalMeasure) -> f64 {
        let t = self.weights.grid.t(k);
        self.field
            .g
            .iter()
            .map(|(m, f)| m.at(t) * f.eval(mu))
            .sum()
    }

    /// Integrand values H_{t_k}(mu) per driver coordinate, left grid point.
    pub fn h_values_into(&self, k: usize, mu: &EmpiricalMeasure, out: &mut [f64]) {
        let t = self.weights.grid.t(k);
        out.fill(0.0);
        for (c, m, f) in &self.field.h {
            out[*c] += m.at(t) * f.eval(mu);
        }
    }

    /// First- and second-order measure derivatives of the field at (t_i, mu)
    /// and companion points y (and y2 for the second order).
    #[allow(clippy::type_complexity)]
    pub fn mu_derivatives(
        &self,
        i: usize,
        left: bool,
        mu: &EmpiricalMeasure,
        y: &[f64],
        y2: Option<&[f64]>,
    ) -> Result<(f64, Vec<f64>, Vec<f64>, Option<(f64, Vec<f64>)>)> {
        let f = self.combined(i, left)?;
        let z = f.zs(mu);
        let flat = f.linear_derivative_at(&z, y);
        let mut lions = vec![0.0; y.len()];
        f.lions_derivative_at(&z, y, &mut lions);
        let mut lions_space = vec![0.0; y.len() * y.len()];
        f.lions_space_derivative_at(&z, y, &mut lions_space);
        let second = y2.map(|y2| f.second_derivatives_at(&z, y, y2));
        Ok((flat, lions, lions_space, second))
    }
}

/// Space-argument random field F(t, x) (the x-form of the expansion).
#[derive(Debug, Clone)]
pub struct SpaceField {
    pub f0: Vec<(f64, TestFunction)>,
    pub g: Vec<(Modulation, TestFunction)>,
    pub h: Vec<(usize, Modulation, TestFunction)>,
}

impl SpaceField {
    pub fn n_layers(&self) -> usize {
        self.f0.len() + self.g.len() + self.h.len()
    }

    pub fn static_field(f0: TestFunction) -> Self {
        SpaceField {
            f0: vec![(1.0, f0)],
            g: Vec::new(),
            h: Vec::new(),
        }
    }

    pub fn shapes(&self) -> Vec<&TestFunction> {
        self.f0
            .iter()
            .map(|(_, f)| f)
            .chain(self.g.iter().map(|(_, f)| f))
            .chain(self.h.iter().map(|(_, _, f)| f))
            .collect()
    }

    pub fn bind(self: &Arc<Self>, y: &ObservedPath) -> Result<BoundSpaceField> {
        let g_mods: Vec<&Modulation> = self.g.iter().map(|(m, _)| m).collect();
        let h_specs: Vec<(usize, &Modulation)> =
            self.h.iter().map(|(c, m, _)| (*c, m)).collect();
        let weights = DriverWeights::compute(&g_mods, &h_specs, y)?;
        Ok(BoundSpaceField {
            field: Arc::clone(self),
            weights,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BoundSpaceField {
    pub field: Arc<SpaceField>,
    pub weights: DriverWeights,
}

impl BoundSpaceField {
    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.weights.grid
    }

    pub fn weights_into(&self, i: usize, left: bool, out: &mut [f64]) {
        let f = &self.field;
        let mut p = 0;
        for (c, _) in &f.f0 {
            out[p] = *c;
            p += 1;
        }
        for l in 0..f.g.len() {
            out[p] = self.weights.wg[l][i];
            p += 1;
        }
        let wh = if left {
            &self.weights.wh_left
        } else {
            &self.weights.wh
        };
        for l in 0..f.h.len() {
            out[p] = wh[l][i];
            p += 1;
        }
    }

    pub fn layer_weights(&self, i: usize, left: bool) -> Vec<f64> {
        let mut out = vec![0.0; self.field.n_layers()];
        self.weights_into(i, left, &mut out);
        out
    }

    pub fn eval(&self, i: usize, left: bool, x: &[f64]) -> f64 {
        let w = self.layer_weights(i, left);
        self.field
            .shapes()
            .iter()
            .zip(&w)
            .map(|(f, wl)| wl * f.value(x))
            .sum()
    }

    pub fn grad_into(&self, i: usize, left: bool, x: &[f64], out: &mut [f64]) {
        let w = self.layer_weights(i, left);
        out.fill(0.0);
        let mut buf = vec![0.0; x.len()];
        for (f, wl) in self.field.shapes().iter().zip(&w) {
            f.grad_into(x, &mut buf);
            crate::linalg::axpy(*wl, &buf, out);
        }
    }

    pub fn hess_into(&self, i: usize, left: bool, x: &[f64], out: &mut [f64]) {
        let w = self.layer_weights(i, left);
        out.fill(0.0);
        let mut buf = vec![0.0; x.len() * x.len()];
        for (f, wl) in self.field.shapes().iter().zip(&w) {
            f.hess_into(x, &mut buf);
            crate::linalg::axpy(*wl, &buf, out);
        }
    }

    pub fn g_value(&self, k: usize, x: &[f64]) -> f64 {
        let t = self.weights.grid.t(k);
        self.field.g.iter().map(|(m, f)| m.at(t) * f.value(x)).sum()
    }

    pub fn h_values_into(&self, k: usize, x: &[f64], out: &mut [f64]) {
        let t = self.weights.grid.t(k);
        out.fill(0.0);
        for (c, m, f) in &self.field.h {
            out[*c] += m.at(t) * f.value(x);
        }
    }

    /// Space gradients of the H integrands at the left grid point: row l of
    /// `out` (d-wide) is grad_x of the l-th h-layer times its modulation.
    pub fn h_grads_into(&self, k: usize, x: &[f64], out: &mut Flat) {
        let t = self.weights.grid.t(k);
        let mut buf = vec![0.0; x.len()];
        for (l, (_, m, f)) in self.field.h.iter().enumerate() {
            f.grad_into(x, &mut buf);
            let row = out.row_mut(l);
            for (o, b) in row.iter_mut().zip(&buf) {
                *o = m.at(t) * b;
            }
        }
    }
}

/// Product layer phi(x) * Phi(mu) for the time-space-measure form.
#[derive(Debug, Clone)]
pub struct ProductLayer {
    pub phi: TestFunction,
    pub psi: CylindricalFn,
}

/// Space-measure random field F(t, x, mu): finite sums of product layers in
/// each of the three slots, so every mixed derivative factors.
#[derive(Debug, Clone)]
pub struct SpaceMeasureField {
    pub f0: Vec<(f64, ProductLayer)>,
    pub g: Vec<(Modulation, ProductLayer)>,
    pub h: Vec<(usize, Modulation, ProductLayer)>,
}

impl SpaceMeasureField {
    pub fn n_layers(&self) -> usize {
        self.f0.len() + self.g.len() + self.h.len()
    }

    pub fn layers(&self) -> Vec<&ProductLayer> {
        self.f0
            .iter()
            .map(|(_, l)| l)
            .chain(self.g.iter().map(|(_, l)| l))
            .chain(self.h.iter().map(|(_, _, l)| l))
            .collect()
    }

    /// Number of driver coordinates this field integrates against.
    pub fn required_driver_dim(&self) -> usize {
        self.h.iter().map(|(c, _, _)| *c + 1).max().unwrap_or(0)
    }

    pub fn bind(self: &Arc<Self>, y: &ObservedPath) -> Result<BoundSpaceMeasureField> {
        let g_mods: Vec<&Modulation> = self.g.iter().map(|(m, _)| m).collect();
        let h_specs: Vec<(usize, &Modulation)> =
            self.h.iter().map(|(c, m, _)| (*c, m)).collect();
        let weights = DriverWeights::compute(&g_mods, &h_specs, y)?;
        Ok(BoundSpaceMeasureField {
            field: Arc::clone(self),
            weights,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BoundSpaceMeasureField {
    pub field: Arc<SpaceMeasureField>,
    pub weights: DriverWeights,
}

impl BoundSpaceMeasureField {
    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.weights.grid
    }

    pub fn layer_weights(&self, i: usize, left: bool) -> Vec<f64> {
        let f = &self.field;
        let mut out = Vec::with_capacity(f.n_layers());
        for (c, _) in &f.f0 {
            out.push(*c);
        }
        for l in 0..f.g.len() {
            out.push(self.weights.wg[l][i]);
        }
        let wh = if left {
            &self.weights.wh_left
        } else {
            &self.weights.wh
        };
        for l in 0..f.h.len() {
            out.push(wh[l][i]);
        }
        out
    }

    pub fn eval(&self, i: usize, left: bool, x: &[f64], mu: &EmpiricalMeasure) -> f64 {
        self.layer_weights(i, left)
            .iter()
            .zip(self.field.layers())
            .map(|(w, l)| w * l.phi.value(x) * l.psi.eval(mu))
            .sum()
    }

    /// The x-section F(t_i, ., mu) as a SpaceField evaluation is not needed;
    /// the mu-section F(t_i, x, .) as a single cylindrical function:
    pub fn mu_section(&self, i: usize, left: bool, x: &[f64]) -> Result<CylindricalFn> {
        let w = self.layer_weights(i, left);
        let layers = self.field.layers();
        let combined: Vec<(f64, &CylindricalFn)> = w
            .iter()
            .zip(&layers)
            .map(|(wl, l)| (wl * l.phi.value(x), &l.psi))
            .collect();
        combine_layers(&combined)
    }

    pub fn g_value(&self, k: usize, x: &[f64], mu: &EmpiricalMeasure) -> f64 {
        let t = self.weights.grid.t(k);
        self.field
            .g
            .iter()
            .map(|(m, l)| m.at(t) * l.phi.value(x) * l.psi.eval(mu))
            .sum()
    }

    pub fn h_values_into(&self, k: usize, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let t = self.weights.grid.t(k);
        out.fill(0.0);
        for (c, m, l) in &self.field.h {
            out[*c] += m.at(t) * l.phi.value(x) * l.psi.eval(mu);
        }
    }
}

/// Time-and-mark weight of a Poisson jump layer.
pub type MarkWeight = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Measure field driven by a Brownian W plus a Poisson random measure: the
/// jump layers integrate J(t, e, mu) = w(t, e) * Phi(mu) against N(de, dt).
#[derive(Clone)]
pub struct PoissonField {
    /// Brownian-driven part (h-layers reference coordinates of W).
    pub base: MeasureField,
    pub j: Vec<(MarkWeight, CylindricalFn)>,
}

impl std::fmt::Debug for PoissonField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PoissonField({} base layers, {} jump layers)", self.base.n_layers(), self.j.len())
    }
}

impl PoissonField {
    /// Realize the jump integrals on a concrete event stream (times must be
    /// grid points of `w`): returns the augmented driver path [W | Q_1..Q_m],
    /// where Q_l jumps by w_l(t, e) at each event, and an equivalent plain
    /// MeasureField whose extra dY-layers integrate against the Q components.
    pub fn bind_with_events(
        &self,
        w: &ObservedPath,
        events: &EventList,
    ) -> Result<(ObservedPath, MeasureField)> {
        let grid = Arc::clone(&w.grid);
        let n = grid.len();
        let dw = w.d();
        let m = self.j.len();
        let d = dw + m;

        // Per-layer cumulative jump processes.
        let mut q = Flat::zeros(n, m);
        let mut q_jumps: Vec<(usize, Vec<f64>)> = Vec::new(); // (grid idx, per-layer jump)
        for &(t, mark) in events {
            let k = grid.require_index(t)?;
            let mut dq = vec![0.0; m];
            for (l, (wfn, _)) in self.j.iter().enumerate() {
                dq[l] = wfn(t, mark);
            }
            match q_jumps.binary_search_by(|probe| probe.0.cmp(&k)) {
                Ok(pos) => {
                    for l in 0..m {
                        q_jumps[pos].1[l] += dq[l];
                    }
                }
                Err(pos) => q_jumps.insert(pos, (k, dq)),
            }
        }
        let mut acc = vec![0.0; m];
        let mut jp = 0usize;
        for k in 0..n {
            if jp < q_jumps.len() && q_jumps[jp].0 == k {
                for l in 0..m {
                    acc[l] += q_jumps[jp].1[l];
                }
                jp += 1;
            }
            q.row_mut(k).copy_from_slice(&acc);
        }

        // Merge W's recorded jumps with the Q jumps into one jump table.
        let mut jump_idx: Vec<usize> = w.jumps.idx.iter().map(|&k| k as usize).collect();
        jump_idx.extend(q_jumps.iter().map(|&(k, _)| k));
        jump_idx.sort_unstable();
        jump_idx.dedup();
        let mut delta = Flat::zeros(0, d);
        for &k in &jump_idx {
            let mut row = vec![0.0; d];
            if let Some(dw_jump) = w.jumps.at(k) {
                row[..dw].copy_from_slice(dw_jump);
            }
            if let Ok(pos) = q_jumps.binary_search_by(|probe| probe.0.cmp(&k)) {
                row[dw..].copy_from_slice(&q_jumps[pos].1);
            }
            delta.push_row(&row);
        }

        let mut values = Flat::zeros(n, d);
        for k in 0..n {
            values.row_mut(k)[..dw].copy_from_slice(w.value(k));
            values.row_mut(k)[dw..].copy_from_slice(q.row(k));
        }

        let augmented = ObservedPath {
            grid,
            values,
            jumps: Jumps {
                idx: jump_idx.iter().map(|&k| k as u32).collect(),
                delta,
            },
        };
        let mut field = self.base.clone();
        for (l, (_, shape)) in self.j.iter().enumerate() {
            field
                .h
                .push((dw + l, Modulation::Const(1.0), shape.clone()));
        }
        Ok((augmented, field))
    }
}

/// Check that differentiating a stochastic integral of lifted functionals
/// commutes with integration, realized on the N-atom lift: for
/// I(x) = int_0^T f(t, x) dW_t with f(t, x) = sum_l m_l(t) Phi_l(mu_x),
/// compare the central difference [I(x+eps*h) - I(x-eps*h)] / (2 eps) against
/// int_0^T Df(t, x)(h) dW_t on the same W-path. Returns |discrepancy|.
pub fn leibniz_check(
    layers: &[(Modulation, CylindricalFn)],
    w: &ObservedPath,
    base: &EmpiricalMeasure,
    h: &Flat,
    eps: f64,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(EngineError::InvalidArgument(
            "perturbation step must be positive".into(),
        ));
    }
    if h.rows() != base.n_atoms() || h.width() != base.d() {
        return Err(EngineError::Dimension(
            "direction must be N x d like the lift point".into(),
        ));
    }
    let grid = &w.grid;
    // Terminal Ito weights per layer: int_0^T m_l dW (scalar driver coord 0).
    let mut wt = vec![0.0; layers.len()];
    for k in 0..grid.n_intervals() {
        let dyk = w.value(k + 1)[0] - w.value(k)[0];
        for (l, (m, _)) in layers.iter().enumerate() {
            wt[l] += m.at(grid.t(k)) * dyk;
        }
    }

    let shifted = |sign: f64| -> Result<EmpiricalMeasure> {
        let n = base.n_atoms();
        let d = base.d();
        let mut pts = Vec::with_capacity(n);
        for i in 0..n {
            let a = base.atom(i);
            let hi = h.row(i);
            pts.push((0..d).map(|c| a[c] + sign * eps * hi[c]).collect());
        }
        EmpiricalMeasure::uniform(pts)
    };
    let (mu_p, mu_m) = (shifted(1.0)?, shifted(-1.0)?);

    let mut i_plus = 0.0;
    let mut i_minus = 0.0;
    let mut interchange = 0.0;
    let inv_n = 1.0 / base.n_atoms() as f64;
    let mut grad = vec![0.0; base.d()];
    for (l, (_, shape)) in layers.iter().enumerate() {
        i_plus += wt[l] * shape.eval(&mu_p);
        i_minus += wt[l] * shape.eval(&mu_m);
        // Frechet derivative of the lift in direction h:
        // DPhi(x)(h) = (1/N) sum_i d_mu Phi(mu_x, x_i) . h_i
        let z = shape.zs(base);
        let mut dphi = 0.0;
        for i in 0..base.n_atoms() {
            shape.lions_derivative_at(&z, base.atom(i), &mut grad);
            dphi += inv_n * crate::linalg::dot(&grad, h.row(i));
        }
        interchange += wt[l] * dphi;
    }
    Ok(((i_plus - i_minus) / (2.0 * eps) - interchange).abs())
}
