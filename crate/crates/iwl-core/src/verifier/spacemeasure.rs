//! Verification of the joint time-space-measure expansion: a random field
//! F(t, x, mu) with product-structured layers phi(x) * Psi(mu), evaluated
//! along a distinguished state path X and a measure flow mu.
//!
//! Two chain-rule forms share one assembly and differ only in how the jump
//! brackets freeze the other argument:
//!
//! * form "coro1": the x-jump bracket freezes time and measure at the right
//!   endpoint, the measure/time bracket freezes x at its left limit;
//! * form "coro1-alt": the measure/time bracket freezes x at the right
//!   endpoint, the x-jump bracket freezes the measure at its left limit.
//!
//! Both decompositions telescope exactly across jumps, so on scenarios with
//! continuous paths the two forms run through identical code paths and agree
//! term by term to the float. A conditional variant ("coro2") reuses the
//! conditional-cloud machinery with x frozen at the distinguished copy; its
//! dX-integrand samples the measure at the forward point of each step, which
//! carries the covariation between X and the common-noise-driven flow.

use std::sync::Arc;

use crate::coeffs::Coeffs;
use crate::drivers::{sample_brownian, sample_events, DriverSet, EventList};
use crate::error::{EngineError, Result};
use crate::fields::{BoundSpaceMeasureField, ProductLayer, SpaceMeasureField};
use crate::flow::{
    sample_flow_events, simulate_conditional_flow, simulate_flow_on_grid,
    ConditionalParticleSystem, EmpiricalFlow,
};
use crate::grid::TimeGrid;
use crate::linalg::{axpy, dot};
use crate::path::{simulate_semimartingale, CovMode, SemimartingalePath, SimOptions};
use crate::rng::tag;

use super::conditional::ConditionalSizes;
use super::full::{FullMode, FullSizes};
use super::ito::quad_form;
use super::pathfield::EtaSet;
use super::pathfield::project_flow;
use super::report::{TermBreakdown, TermCurves, VerificationReport};

/// Term labels of the full-law time-space-measure assembly, in formula order.
pub const CORO1_LABELS: [&str; 11] = [
    "int G dr",
    "int H dY",
    "E~[int d_muF dX~]",
    "1/2 E~[d_xd_muF:d[X~,X~]^c]",
    "jump sum: F (mu)",
    "jump sum: dF/dmu 1{mu=mu-}",
    "-E~[Sum d_muF DX~]",
    "int d_xF dX",
    "1/2 int d_xxF:d[X,X]^c",
    "int d_xH:d[X,Y]^c",
    "jump sum: F (x)",
];

/// Finite-N correction labels (pathwise-empirical mode, corrections ON).
pub const SM_CORRECTION_LABELS: [&str; 2] = ["I2: 1/2 d_zzf:d[Z,Z]^c", "I3: d_zh:d[Z,Y]^c"];

/// Term labels of the conditional time-space-measure assembly.
pub const CORO2_LABELS: [&str; 15] = [
    "int G dr",
    "int H dY",
    "jump sum: F (mu)",
    "int d_xF dX",
    "1/2 int d_xxF:d[X,X]^c",
    "int d_xH:d[X,Y]^c",
    "jump sum: F (x)",
    "E-[int d_muF dX']",
    "1/2 E-[d_xd_muF:d[X',X']^c]",
    "1/2 d_mumuF:d[X',X'']^c",
    "d_muH:d[X',Y]^c",
    "d2F/dmu2 double jump",
    "dH/dmu DY",
    "jump sum: dF/dmu 1{mu=mu-}",
    "-E-[Sum d_muF DX']",
];

/// Which chain-rule form of the full-law expansion to assemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainForm {
    Coro1,
    Coro1Alt,
}

impl ChainForm {
    pub fn formula(&self) -> &'static str {
        match self {
            ChainForm::Coro1 => "coro1",
            ChainForm::Coro1Alt => "coro1-alt",
        }
    }
}

/// Full-law scenario for the time-space-measure form: the distinguished state
/// path X and the measure-flow cloud share the same dynamics.
#[derive(Clone)]
pub struct SpaceMeasureScenario {
    pub name: String,
    pub coeffs: Coeffs,
    pub x0: Vec<f64>,
    pub field: Arc<SpaceMeasureField>,
    /// Dynamics of the field driver Y; None means Y is constant (zero).
    pub y_coeffs: Option<Coeffs>,
    pub y0: Vec<f64>,
    pub law_continuous: bool,
    pub t_start: f64,
    pub t_end: f64,
}

/// One simulated world: distinguished path, law cloud, optional independent
/// tilde cloud, and the field driver, all on one event-augmented grid.
pub struct SpaceMeasureWorld {
    pub grid: Arc<TimeGrid>,
    pub x: SemimartingalePath,
    pub flow: EmpiricalFlow,
    pub tilde: Option<EmpiricalFlow>,
    pub y: SemimartingalePath,
}

/// Simulate one world; every jump time of X, the clouds and Y is an exact
/// grid point for every process.
pub fn build_space_measure_world(
    sc: &SpaceMeasureScenario,
    mode: FullMode,
    n_steps: usize,
    n_particles: usize,
    seed: u64,
    world: usize,
) -> Result<SpaceMeasureWorld> {
    if n_particles < 1 {
        return Err(EngineError::InvalidArgument("N must be >= 1".into()));
    }
    let base = TimeGrid::build(sc.t_start, sc.t_end, n_steps, &[])?;
    let w = world as u64;
    let opts = SimOptions::default();

    let flow_events = sample_flow_events(
        &sc.coeffs,
        n_particles,
        sc.t_start,
        sc.t_end,
        seed,
        &[tag::WORLD, w],
    );
    let tilde_events = match mode {
        FullMode::McLaw { n_tilde } => Some(sample_flow_events(
            &sc.coeffs,
            n_tilde,
            sc.t_start,
            sc.t_end,
            seed,
            &[tag::WORLD, w, tag::TILDE],
        )),
        FullMode::EmpiricalProjection { .. } => None,
    };
    let mut x_events: Vec<EventList> = Vec::new();
    for (j, part) in sc.coeffs.jumps.iter().enumerate() {
        x_events.push(sample_events(
            &part.spec,
            sc.t_start,
            sc.t_end,
            seed,
            &[tag::WORLD, w, tag::STATE, j as u64],
        ));
    }
    let mut y_events: Vec<EventList> = Vec::new();
    if let Some(yc) = &sc.y_coeffs {
        for (j, part) in yc.jumps.iter().enumerate() {
            y_events.push(sample_events(
                &part.spec,
                sc.t_start,
                sc.t_end,
                seed,
                &[tag::WORLD, w, tag::DRIVER_Y, j as u64],
            ));
        }
    }

    let mut all_times = flow_events.all_times.clone();
    if let Some(te) = &tilde_events {
        all_times.extend_from_slice(&te.all_times);
    }
    for ev in &x_events {
        all_times.extend(ev.iter().map(|&(t, _)| t));
    }
    for ev in &y_events {
        all_times.extend(ev.iter().map(|&(t, _)| t));
    }
    let grid = Arc::new(base.merged_with(&all_times)?);

    let flow = simulate_flow_on_grid(
        &sc.coeffs,
        &sc.x0,
        &grid,
        &flow_events,
        seed,
        &[tag::WORLD, w],
        opts,
    )?;
    let tilde = match &tilde_events {
        Some(te) => Some(simulate_flow_on_grid(
            &sc.coeffs,
            &sc.x0,
            &grid,
            te,
            seed,
            &[tag::WORLD, w, tag::TILDE],
            opts,
        )?),
        None => None,
    };
    let x_drivers = DriverSet {
        seed,
        d_w: sc.coeffs.d_w,
        brownian: sample_brownian(&grid, sc.coeffs.d_w, seed, &[tag::WORLD, w, tag::STATE]),
        event_streams: x_events,
    };
    let x = simulate_semimartingale(&sc.coeffs, &sc.x0, &x_drivers, &grid, opts)?;
    let y = match &sc.y_coeffs {
        Some(yc) => {
            let drivers = DriverSet {
                seed,
                d_w: yc.d_w,
                brownian: sample_brownian(&grid, yc.d_w, seed, &[tag::WORLD, w, tag::DRIVER_Y]),
                event_streams: y_events,
            };
            simulate_semimartingale(yc, &sc.y0, &drivers, &grid, opts)?
        }
        None => {
            let dy = sc.field.required_driver_dim().max(1);
            SemimartingalePath::constant(Arc::clone(&grid), vec![0.0; dy])
        }
    };
    Ok(SpaceMeasureWorld {
        grid,
        x,
        flow,
        tilde,
        y,
    })
}

/// The eta coordinates of the measure slots of a product field, in canonical
/// layer order (f0, g, h).
fn eta_set(field: &SpaceMeasureField) -> EtaSet {
    let mut shapes = Vec::new();
    let mut ranges = Vec::new();
    for l in field.layers() {
        let start = shapes.len();
        shapes.extend(l.psi.inner.iter().cloned());
        ranges.push((start, shapes.len()));
    }
    EtaSet { shapes, ranges }
}

/// Evaluation engine for a bound product field on the projected coordinates:
/// F(t_i, x, mu) = sum_l w_l(t_i) phi_l(x) f_l(z[range_l]). Measure-side
/// derivatives take effective weights w_l * phi_l(x); space-side derivatives
/// take effective weights w_l * f_l(z).
struct Smf<'a> {
    bound: &'a BoundSpaceMeasureField,
    etas: &'a EtaSet,
    layers: Vec<&'a ProductLayer>,
}

impl<'a> Smf<'a> {
    fn new(bound: &'a BoundSpaceMeasureField, etas: &'a EtaSet) -> Self {
        let layers = bound.field.layers();
        Smf {
            bound,
            etas,
            layers,
        }
    }

    fn dy(&self) -> usize {
        self.bound.field.required_driver_dim()
    }

    fn w_phi(&self, i: usize, left: bool, x: &[f64]) -> Vec<f64> {
        let lw = self.bound.layer_weights(i, left);
        lw.iter()
            .zip(&self.layers)
            .map(|(w, l)| w * l.phi.value(x))
            .collect()
    }

    fn w_psi(&self, i: usize, left: bool, z: &[f64]) -> Vec<f64> {
        let lw = self.bound.layer_weights(i, left);
        lw.iter()
            .enumerate()
            .map(|(l, w)| {
                let (a, b) = self.etas.ranges[l];
                w * self.layers[l].psi.outer.value(&z[a..b])
            })
            .collect()
    }

    fn eval(&self, i: usize, left: bool, x: &[f64], z: &[f64]) -> f64 {
        let lw = self.bound.layer_weights(i, left);
        let mut s = 0.0;
        for (l, lay) in self.layers.iter().enumerate() {
            let (a, b) = self.etas.ranges[l];
            s += lw[l] * lay.phi.value(x) * lay.psi.outer.value(&z[a..b]);
        }
        s
    }

    /// Measure-side gradient with effective weights `w` (length n_layers).
    fn grad_z_into(&self, w: &[f64], z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let mut buf = vec![0.0; self.etas.n()];
        for (l, lay) in self.layers.iter().enumerate() {
            let (a, b) = self.etas.ranges[l];
            lay.psi.outer.grad_into(&z[a..b], &mut buf[..b - a]);
            for (o, g) in out[a..b].iter_mut().zip(&buf[..b - a]) {
                *o += w[l] * g;
            }
        }
    }

    /// Measure-side Hessian with effective weights `w`; n_eta x n_eta.
    fn hess_z_into(&self, w: &[f64], z: &[f64], out: &mut [f64]) {
        let n = self.etas.n();
        out.fill(0.0);
        let mut buf = vec![0.0; n * n];
        for (l, lay) in self.layers.iter().enumerate() {
            let (a, b) = self.etas.ranges[l];
            let nl = b - a;
            lay.psi.outer.hess_into(&z[a..b], &mut buf[..nl * nl]);
            for r in 0..nl {
                for c in 0..nl {
                    out[(a + r) * n + (a + c)] += w[l] * buf[r * nl + c];
                }
            }
        }
    }

    /// Space-side gradient with effective weights `w` (length n_layers).
    fn grad_x_into(&self, w: &[f64], x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let mut buf = vec![0.0; x.len()];
        for (l, lay) in self.layers.iter().enumerate() {
            lay.phi.grad_into(x, &mut buf);
            axpy(w[l], &buf, out);
        }
    }

    /// Space-side Hessian with effective weights `w`; d x d.
    fn hess_x_into(&self, w: &[f64], x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let mut buf = vec![0.0; x.len() * x.len()];
        for (l, lay) in self.layers.iter().enumerate() {
            lay.phi.hess_into(x, &mut buf);
            axpy(w[l], &buf, out);
        }
    }

    fn g_value(&self, k: usize, x: &[f64], z: &[f64]) -> f64 {
        let t = self.bound.grid().t(k);
        let field = &self.bound.field;
        let mut s = 0.0;
        for (l, (m, lay)) in field.g.iter().enumerate() {
            let (a, b) = self.etas.ranges[field.f0.len() + l];
            s += m.at(t) * lay.phi.value(x) * lay.psi.outer.value(&z[a..b]);
        }
        s
    }

    fn h_values_into(&self, k: usize, x: &[f64], z: &[f64], out: &mut [f64]) {
        let t = self.bound.grid().t(k);
        let field = &self.bound.field;
        out.fill(0.0);
        let base = field.f0.len() + field.g.len();
        for (l, (c, m, lay)) in field.h.iter().enumerate() {
            let (a, b) = self.etas.ranges[base + l];
            out[*c] += m.at(t) * lay.phi.value(x) * lay.psi.outer.value(&z[a..b]);
        }
    }

    /// Space gradients of the H integrands: dy x d row-major.
    fn h_grads_x_into(&self, k: usize, x: &[f64], z: &[f64], out: &mut [f64]) {
        let d = x.len();
        let t = self.bound.grid().t(k);
        let field = &self.bound.field;
        out.fill(0.0);
        let base = field.f0.len() + field.g.len();
        let mut buf = vec![0.0; d];
        for (l, &(c, ref m, ref lay)) in field.h.iter().enumerate() {
            let (a, b) = self.etas.ranges[base + l];
            lay.phi.grad_into(x, &mut buf);
            let pv = lay.psi.outer.value(&z[a..b]);
            let row = &mut out[c * d..(c + 1) * d];
            for (o, g) in row.iter_mut().zip(&buf) {
                *o += m.at(t) * pv * g;
            }
        }
    }

    /// Measure-side gradients of the H integrands: dy x n_eta row-major.
    fn h_grads_z_into(&self, k: usize, x: &[f64], z: &[f64], out: &mut [f64]) {
        let n = self.etas.n();
        let t = self.bound.grid().t(k);
        let field = &self.bound.field;
        out.fill(0.0);
        let base = field.f0.len() + field.g.len();
        let mut buf = vec![0.0; n];
        for (l, &(c, ref m, ref lay)) in field.h.iter().enumerate() {
            let (a, b) = self.etas.ranges[base + l];
            lay.psi.outer.grad_into(&z[a..b], &mut buf[..b - a]);
            let pv = lay.phi.value(x);
            let row = &mut out[c * n..(c + 1) * n];
            for (o, g) in row[a..b].iter_mut().zip(&buf[..b - a]) {
                *o += m.at(t) * pv * g;
            }
        }
    }
}

/// Evaluate every term of the full-law time-space-measure expansion on one
/// world, in the requested chain-rule form.
pub fn rhs_terms_space_measure(
    sc: &SpaceMeasureScenario,
    world: &SpaceMeasureWorld,
    form: ChainForm,
    mode: FullMode,
    cov: CovMode,
    s_idx: usize,
    t_idx: usize,
) -> Result<(TermBreakdown, TermCurves)> {
    let bound = sc.field.bind(&world.y.obs)?;
    let etas = eta_set(&sc.field);
    let z = project_flow(&world.flow, &etas);
    let eng = Smf::new(&bound, &etas);

    let tilde: &EmpiricalFlow = match mode {
        FullMode::McLaw { .. } => world.tilde.as_ref().ok_or_else(|| {
            EngineError::InvalidArgument("mc-law assembly needs a tilde cloud".into())
        })?,
        FullMode::EmpiricalProjection { .. } => &world.flow,
    };
    let law_treated_continuous = match mode {
        FullMode::McLaw { .. } => sc.law_continuous,
        FullMode::EmpiricalProjection { .. } => false,
    };
    let corrections = matches!(mode, FullMode::EmpiricalProjection { corrections: true });

    let d = world.flow.d();
    let n_eta = etas.n();
    let dy = eng.dy();
    let inv_nt = 1.0 / tilde.n() as f64;
    let d_w = sc.coeffs.d_w;

    let mut labels: Vec<String> = CORO1_LABELS.iter().map(|s| s.to_string()).collect();
    if corrections {
        labels.extend(SM_CORRECTION_LABELS.iter().map(|s| s.to_string()));
    }
    let n_terms = labels.len();
    let mut curves = TermCurves::new(labels, world.grid.points().to_vec());

    let mut a = vec![0.0; n_eta];
    let mut a_left = vec![0.0; n_eta];
    let mut hz = vec![0.0; n_eta * n_eta];
    let mut hvals = vec![0.0; dy.max(1)];
    let mut hgx = vec![0.0; dy.max(1) * d];
    let mut hgz = vec![0.0; dy.max(1) * n_eta];
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    let mut gx = vec![0.0; d];
    let mut hx = vec![0.0; d * d];
    let mut dxc = vec![0.0; d];
    let mut x_next = vec![0.0; d];
    let mut p_left = vec![0.0; d];
    let mut xs_left = vec![0.0; d];
    let mut dxx = vec![0.0; d];
    let mut dzc = vec![0.0; n_eta];
    let mut dyc = vec![0.0; dy.max(1)];
    let mut sig = vec![0.0; d * d_w];
    let mut a_mat = vec![0.0; d * d];
    let mut cursors: Vec<_> = tilde
        .particles
        .iter()
        .map(|p| p.obs.jumps.cursor())
        .collect();
    let mut zcur = z.jumps.cursor();
    let mut ycur = world.y.obs.jumps.cursor();
    let mut xcur = world.x.obs.jumps.cursor();
    let mut jumpers: Vec<(usize, Vec<f64>)> = Vec::new();

    for k in s_idx..t_idx {
        let j = k + 1;
        let dt = world.grid.dt(k);
        let t_k = world.grid.t(k);
        let zk = z.value(k);
        let xk = world.x.obs.value(k);
        let wphi = eng.w_phi(k, false, xk);
        eng.grad_z_into(&wphi, zk, &mut a);

        let mut t1c = 0.0;
        let mut t2 = 0.0;
        jumpers.clear();
        for (i, p) in tilde.particles.iter().enumerate() {
            let jx = cursors[i].at(j);
            p.obs.cont_increment_into(k, jx, &mut dxc);
            let pk = p.obs.value(k);
            if matches!(cov, CovMode::GeneratorExact) {
                (sc.coeffs.diffusion)(t_k, pk, &mut sig);
                for r in 0..d {
                    for c in 0..d {
                        let mut s = 0.0;
                        for l in 0..d_w {
                            s += sig[r * d_w + l] * sig[c * d_w + l];
                        }
                        a_mat[r * d + c] = s;
                    }
                }
            }
            for (m, eta) in etas.shapes.iter().enumerate() {
                eta.grad_into(pk, &mut grad);
                let gdx = dot(&grad, &dxc);
                t1c += a[m] * gdx * inv_nt;
                match cov {
                    CovMode::Realized => {
                        for r in 0..d {
                            x_next[r] = pk[r] + dxc[r];
                        }
                        t2 += a[m] * (eta.value(&x_next) - eta.value(pk) - gdx) * inv_nt;
                    }
                    CovMode::GeneratorExact => {
                        eta.hess_into(pk, &mut hess);
                        let mut tr = 0.0;
                        for r in 0..d {
                            for c in 0..d {
                                tr += hess[r * d + c] * a_mat[r * d + c];
                            }
                        }
                        t2 += a[m] * 0.5 * tr * dt * inv_nt;
                    }
                }
            }
            if let Some(dxj) = jx {
                jumpers.push((i, dxj.to_vec()));
            }
        }

        let zjump = zcur.at(j);
        let yjump = ycur.at(j);
        let xjump = xcur.at(j);
        z.cont_increment_into(k, zjump, &mut dzc);
        world.x.obs.cont_increment_into(k, xjump, &mut dxx);
        let ya = world.y.obs.value(k);
        let yb = world.y.obs.value(j);
        for c in 0..dy {
            dyc[c] = yb[c] - ya[c] - yjump.map_or(0.0, |dj| dj[c]);
        }

        let row = curves.values.row_mut(j);
        row[0] += eng.g_value(k, xk, zk) * dt;
        if dy > 0 {
            eng.h_values_into(k, xk, zk, &mut hvals);
            for c in 0..dy {
                row[1] += hvals[c] * (yb[c] - ya[c]);
            }
        }
        row[2] += t1c;
        row[3] += t2;

        // x-block continuous part; both forms sample at the left point.
        let wpsi = eng.w_psi(k, false, zk);
        eng.grad_x_into(&wpsi, xk, &mut gx);
        row[7] += dot(&gx, &dxx);
        eng.hess_x_into(&wpsi, xk, &mut hx);
        row[8] += 0.5 * quad_form(&hx, &dxx, &dxx, d);
        if dy > 0 {
            eng.h_grads_x_into(k, xk, zk, &mut hgx);
            for c in 0..dy {
                row[9] += dot(&hgx[c * d..(c + 1) * d], &dxx) * dyc[c];
            }
        }
        if corrections {
            eng.hess_z_into(&wphi, zk, &mut hz);
            row[11] += 0.5 * quad_form(&hz, &dzc, &dzc, n_eta);
            if dy > 0 {
                eng.h_grads_z_into(k, xk, zk, &mut hgz);
                for c in 0..dy {
                    row[12] += dot(&hgz[c * n_eta..(c + 1) * n_eta], &dzc) * dyc[c];
                }
            }
        }

        // Jump handling at index j.
        let zj = zjump.is_some();
        if zj || yjump.is_some() || xjump.is_some() || !jumpers.is_empty() {
            let z_left = z.left_limit(j);
            world.x.obs.left_limit_into(j, &mut xs_left);
            let x_right = world.x.obs.value(j);
            // x-argument of the measure/time bracket, per chain form.
            let x_mu: &[f64] = match form {
                ChainForm::Coro1 => &xs_left,
                ChainForm::Coro1Alt => x_right,
            };
            let wphi_left = eng.w_phi(j, true, x_mu);
            eng.grad_z_into(&wphi_left, &z_left, &mut a_left);

            let include_f_jump = if law_treated_continuous {
                yjump.is_some()
            } else {
                zj || yjump.is_some()
            };
            if include_f_jump {
                let mut term4 =
                    eng.eval(j, false, x_mu, z.value(j)) - eng.eval(j, true, x_mu, &z_left);
                if dy > 0 {
                    if let Some(dyj) = yjump {
                        eng.h_values_into(j, x_mu, &z_left, &mut hvals);
                        for c in 0..dy {
                            term4 -= hvals[c] * dyj[c];
                        }
                    }
                }
                row[4] += term4;
            }

            if !jumpers.is_empty() {
                let law_jump_here = !law_treated_continuous && zj;
                let mut t1j = 0.0;
                let mut t5 = 0.0;
                for (i, dxj) in &jumpers {
                    let p = &tilde.particles[*i];
                    let p_right = p.obs.value(j);
                    for r in 0..d {
                        p_left[r] = p_right[r] - dxj[r];
                    }
                    for (m, eta) in etas.shapes.iter().enumerate() {
                        eta.grad_into(&p_left, &mut grad);
                        t1j += a_left[m] * dot(&grad, dxj) * inv_nt;
                        if !law_jump_here {
                            t5 += a_left[m] * (eta.value(p_right) - eta.value(&p_left)) * inv_nt;
                        }
                    }
                }
                row[2] += t1j;
                row[5] += t5;
                row[6] -= t1j;
            }

            if let Some(dxj) = xjump {
                match form {
                    ChainForm::Coro1 => {
                        // x bracket at the right-endpoint measure and time.
                        let zr = z.value(j);
                        let wpsi_j = eng.w_psi(j, false, zr);
                        eng.grad_x_into(&wpsi_j, &xs_left, &mut gx);
                        let gl = dot(&gx, dxj);
                        row[7] += gl;
                        row[10] += eng.eval(j, false, x_right, zr)
                            - eng.eval(j, false, &xs_left, zr)
                            - gl;
                    }
                    ChainForm::Coro1Alt => {
                        // x bracket at the left-limit measure.
                        let wpsi_l = eng.w_psi(j, true, &z_left);
                        eng.grad_x_into(&wpsi_l, &xs_left, &mut gx);
                        let gl = dot(&gx, dxj);
                        row[7] += gl;
                        row[10] += eng.eval(j, false, x_right, &z_left)
                            - eng.eval(j, false, &xs_left, &z_left)
                            - gl;
                    }
                }
            }
        }
    }

    for k in s_idx + 1..curves.times.len() {
        for t in 0..n_terms {
            let prev = curves.values.row(k - 1)[t];
            curves.values.row_mut(k)[t] += prev;
        }
    }

    let lhs = eng.eval(t_idx, false, world.x.obs.value(t_idx), z.value(t_idx))
        - eng.eval(s_idx, false, world.x.obs.value(s_idx), z.value(s_idx));
    let mut breakdown = TermBreakdown::new(form.formula(), lhs);
    for (t, l) in curves.labels.iter().enumerate() {
        breakdown.push(l.clone(), curves.values.row(t_idx)[t]);
    }
    Ok((breakdown, curves))
}

/// Run the full-law time-space-measure verification over independent worlds.
pub fn verify_time_space_measure(
    sc: &SpaceMeasureScenario,
    form: ChainForm,
    mode: FullMode,
    sizes: FullSizes,
    cov: CovMode,
    seed: u64,
) -> Result<(VerificationReport, TermCurves)> {
    if sizes.n_particles < 1 {
        return Err(EngineError::InvalidArgument("N must be >= 1".into()));
    }
    if matches!(mode, FullMode::McLaw { .. }) && sizes.n_worlds < 2 {
        return Err(EngineError::InvalidArgument(
            "mc-law mode needs M >= 2 worlds for a standard error".into(),
        ));
    }
    let mut breakdowns = Vec::with_capacity(sizes.n_worlds);
    let mut first_curves = None;
    for m in 0..sizes.n_worlds.max(1) {
        let world = build_space_measure_world(sc, mode, sizes.n_steps, sizes.n_particles, seed, m)?;
        let t_idx = world.grid.len() - 1;
        let (bd, cv) = rhs_terms_space_measure(sc, &world, form, mode, cov, 0, t_idx)?;
        if first_curves.is_none() {
            first_curves = Some(cv);
        }
        breakdowns.push(bd);
    }
    let report = VerificationReport::from_breakdowns(form.formula(), mode.label(), seed, breakdowns);
    Ok((report, first_curves.expect("at least one world")))
}

/// Conditional time-space-measure scenario: the distinguished path is one
/// more conditional copy sharing the common noise of the cloud.
#[derive(Clone)]
pub struct ConditionalSpaceMeasureScenario {
    pub name: String,
    /// Must declare `d_w_common` / `common_jump_streams`.
    pub coeffs: Coeffs,
    pub x0: Vec<f64>,
    pub field: Arc<SpaceMeasureField>,
    /// Y dynamics driven by the common noise only; None means constant zero.
    pub y_coeffs: Option<Coeffs>,
    pub y0: Vec<f64>,
    pub t_start: f64,
    pub t_end: f64,
}

/// One outer world of the conditional form: the cloud (first n_inner
/// particles), the distinguished copy, and the common-measurable driver.
pub struct ConditionalSpaceMeasureWorld {
    pub sys: ConditionalParticleSystem,
    pub cloud: EmpiricalFlow,
    pub x: SemimartingalePath,
    pub y: SemimartingalePath,
    pub law_jump_indices: Vec<usize>,
}

pub fn build_conditional_space_measure_world(
    sc: &ConditionalSpaceMeasureScenario,
    n_steps: usize,
    n_inner: usize,
    seed: u64,
    world: usize,
) -> Result<ConditionalSpaceMeasureWorld> {
    let base = TimeGrid::build(sc.t_start, sc.t_end, n_steps, &[])?;
    let w = world as u64;
    let opts = SimOptions::default();
    // Simulate one extra conditional copy; the first n_inner particles form
    // the cloud and are identical to a cloud simulated without the extra copy.
    let sys = simulate_conditional_flow(
        &sc.coeffs,
        &sc.x0,
        n_inner + 1,
        &base,
        seed,
        &[tag::WORLD, w],
        opts,
    )?;
    let grid = Arc::clone(sys.grid());
    let cloud = EmpiricalFlow {
        grid: Arc::clone(&grid),
        particles: sys.flow.particles[..n_inner].to_vec(),
    };
    let x = sys.flow.particles[n_inner].clone();

    let mut law_jump_indices: Vec<usize> = Vec::new();
    for ev in &sys.common_events {
        for &(t, _) in ev {
            law_jump_indices.push(grid.require_index(t)?);
        }
    }
    law_jump_indices.sort_unstable();
    law_jump_indices.dedup();

    let y = match &sc.y_coeffs {
        Some(yc) => {
            if yc.d_w != sc.coeffs.d_w_common || yc.jumps.len() > sys.common_events.len() {
                return Err(EngineError::Dimension(
                    "driver Y must consume the common noise only".into(),
                ));
            }
            let drivers = DriverSet {
                seed,
                d_w: yc.d_w,
                brownian: sys.common_brownian.clone(),
                event_streams: sys.common_events[..yc.jumps.len()].to_vec(),
            };
            simulate_semimartingale(yc, &sc.y0, &drivers, &grid, opts)?
        }
        None => {
            let dy = sc.field.required_driver_dim().max(1);
            SemimartingalePath::constant(Arc::clone(&grid), vec![0.0; dy])
        }
    };
    Ok(ConditionalSpaceMeasureWorld {
        sys,
        cloud,
        x,
        y,
        law_jump_indices,
    })
}

/// Evaluate every term of the conditional time-space-measure expansion on one
/// world. The dX-integrand samples the measure at the forward point of each
/// step, which carries the [X, mu]-covariation induced by the common noise.
pub fn rhs_terms_conditional_space_measure(
    sc: &ConditionalSpaceMeasureScenario,
    world: &ConditionalSpaceMeasureWorld,
    cov: CovMode,
    s_idx: usize,
    t_idx: usize,
) -> Result<(TermBreakdown, TermCurves)> {
    let bound = sc.field.bind(&world.y.obs)?;
    let etas = eta_set(&sc.field);
    let flow = &world.cloud;
    let z = project_flow(flow, &etas);
    let eng = Smf::new(&bound, &etas);
    let grid = world.sys.grid();
    let n = flow.n();
    let d = flow.d();
    let n_eta = etas.n();
    let dy = eng.dy();
    let d_w = sc.coeffs.d_w;
    let d_wc = sc.coeffs.d_w_common;
    let inv_n = 1.0 / n as f64;
    let pair = |i: usize| (i + n / 2) % n;

    let labels: Vec<String> = CORO2_LABELS.iter().map(|s| s.to_string()).collect();
    let mut curves = TermCurves::new(labels, grid.points().to_vec());

    let mut a = vec![0.0; n_eta];
    let mut a_left = vec![0.0; n_eta];
    let mut b = vec![0.0; n_eta * n_eta];
    let mut hvals = vec![0.0; dy.max(1)];
    let mut hg = vec![0.0; dy.max(1) * n_eta];
    let mut hgx = vec![0.0; dy.max(1) * d];
    let mut grad = vec![0.0; d];
    let mut sig = vec![0.0; d * d_w];
    let mut x_next = vec![0.0; d];
    let mut p_left = vec![0.0; d];
    let mut xs_left = vec![0.0; d];
    let mut gx = vec![0.0; d];
    let mut hx = vec![0.0; d * d];
    let mut dxx = vec![0.0; d];
    let mut dxc = vec![vec![0.0; d]; n];
    let mut u = vec![vec![0.0; n_eta]; n];
    let mut rem = vec![vec![0.0; n_eta]; n];
    let mut s_common = vec![vec![0.0; n_eta * d_wc.max(1)]; n];
    let mut gen_tr = vec![vec![0.0; n_eta]; n];
    let mut cursors: Vec<_> = flow
        .particles
        .iter()
        .map(|p| p.obs.jumps.cursor())
        .collect();
    let mut ycur = world.y.obs.jumps.cursor();
    let mut xcur = world.x.obs.jumps.cursor();
    let mut jumpers: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut hess = vec![0.0; d * d];

    for k in s_idx..t_idx {
        let j = k + 1;
        let dt = grid.dt(k);
        let t_k = grid.t(k);
        let zk = z.value(k);
        let xk = world.x.obs.value(k);
        let wphi = eng.w_phi(k, false, xk);
        eng.grad_z_into(&wphi, zk, &mut a);
        eng.hess_z_into(&wphi, zk, &mut b);
        if dy > 0 {
            eng.h_grads_z_into(k, xk, zk, &mut hg);
        }

        jumpers.clear();
        for (i, p) in flow.particles.iter().enumerate() {
            let jx = cursors[i].at(j);
            p.obs.cont_increment_into(k, jx, &mut dxc[i]);
            let pk = p.obs.value(k);
            if matches!(cov, CovMode::GeneratorExact) {
                (sc.coeffs.diffusion)(t_k, pk, &mut sig);
            }
            for (m, eta) in etas.shapes.iter().enumerate() {
                eta.grad_into(pk, &mut grad);
                u[i][m] = dot(&grad, &dxc[i]);
                match cov {
                    CovMode::Realized => {
                        for r in 0..d {
                            x_next[r] = pk[r] + dxc[i][r];
                        }
                        rem[i][m] = eta.value(&x_next) - eta.value(pk) - u[i][m];
                    }
                    CovMode::GeneratorExact => {
                        eta.hess_into(pk, &mut hess);
                        let mut tr = 0.0;
                        for r in 0..d {
                            for c in 0..d {
                                let mut s = 0.0;
                                for l in 0..d_w {
                                    s += sig[r * d_w + l] * sig[c * d_w + l];
                                }
                                tr += hess[r * d + c] * s;
                            }
                        }
                        gen_tr[i][m] = 0.5 * tr * dt;
                        for l in 0..d_wc {
                            let mut s = 0.0;
                            for r in 0..d {
                                s += grad[r] * sig[r * d_w + l];
                            }
                            s_common[i][m * d_wc + l] = s;
                        }
                    }
                }
            }
            if let Some(dxj) = jx {
                jumpers.push((i, dxj.to_vec()));
            }
        }

        let mut t4 = 0.0;
        let mut t5 = 0.0;
        let mut t6 = 0.0;
        let mut t7 = 0.0;
        let ya = world.y.obs.value(k);
        let yb = world.y.obs.value(j);
        let yjump = ycur.at(j);
        let xjump = xcur.at(j);
        world.x.obs.cont_increment_into(k, xjump, &mut dxx);
        for i in 0..n {
            let ip = pair(i);
            for m in 0..n_eta {
                t4 += a[m] * u[i][m] * inv_n;
                match cov {
                    CovMode::Realized => {
                        t5 += a[m] * rem[i][m] * inv_n;
                        for q in 0..n_eta {
                            t6 += 0.5 * b[m * n_eta + q] * u[i][m] * u[ip][q] * inv_n;
                        }
                    }
                    CovMode::GeneratorExact => {
                        t5 += a[m] * gen_tr[i][m] * inv_n;
                        for q in 0..n_eta {
                            let mut s = 0.0;
                            for l in 0..d_wc {
                                s += s_common[i][m * d_wc + l] * s_common[ip][q * d_wc + l];
                            }
                            t6 += 0.5 * b[m * n_eta + q] * s * dt * inv_n;
                        }
                    }
                }
                for c in 0..dy {
                    let dyci = yb[c] - ya[c] - yjump.map_or(0.0, |dj| dj[c]);
                    t7 += hg[c * n_eta + m] * u[i][m] * dyci * inv_n;
                }
            }
        }
        let row = curves.values.row_mut(j);
        row[0] += eng.g_value(k, xk, zk) * dt;
        if dy > 0 {
            eng.h_values_into(k, xk, zk, &mut hvals);
            for c in 0..dy {
                row[1] += hvals[c] * (yb[c] - ya[c]);
            }
        }
        row[7] += t4;
        row[8] += t5;
        row[9] += t6;
        row[10] += t7;

        // x-block continuous part; the measure argument is the forward
        // (pre-jump) point of the step, carrying the [X, mu]-covariation.
        let z_fwd = z.left_limit(j);
        let wpsi = eng.w_psi(k, false, &z_fwd);
        eng.grad_x_into(&wpsi, xk, &mut gx);
        row[3] += dot(&gx, &dxx);
        eng.hess_x_into(&wpsi, xk, &mut hx);
        row[4] += 0.5 * quad_form(&hx, &dxx, &dxx, d);
        if dy > 0 {
            eng.h_grads_x_into(k, xk, zk, &mut hgx);
            for c in 0..dy {
                let dyci = yb[c] - ya[c] - yjump.map_or(0.0, |dj| dj[c]);
                row[5] += dot(&hgx[c * d..(c + 1) * d], &dxx) * dyci;
            }
        }

        // Jump terms at index j.
        let law_jump_here = world.law_jump_indices.binary_search(&j).is_ok();
        if law_jump_here || yjump.is_some() || xjump.is_some() || !jumpers.is_empty() {
            let z_left = z.left_limit(j);
            world.x.obs.left_limit_into(j, &mut xs_left);
            let x_right = world.x.obs.value(j);
            let wphi_left = eng.w_phi(j, true, &xs_left);
            eng.grad_z_into(&wphi_left, &z_left, &mut a_left);
            if law_jump_here || yjump.is_some() {
                let mut t3 = eng.eval(j, false, &xs_left, z.value(j))
                    - eng.eval(j, true, &xs_left, &z_left);
                if dy > 0 {
                    if let Some(dyj) = yjump {
                        eng.h_values_into(j, &xs_left, &z_left, &mut hvals);
                        for c in 0..dy {
                            t3 -= hvals[c] * dyj[c];
                        }
                    }
                }
                row[2] += t3;
            }
            if !jumpers.is_empty() {
                let indicator = !law_jump_here;
                if indicator && dy > 0 {
                    eng.h_grads_z_into(j, &xs_left, &z_left, &mut hg);
                }
                let mut t11 = 0.0;
                let mut t10 = 0.0;
                let mut t9 = 0.0;
                let mut t8 = 0.0;
                for (i, dxj) in &jumpers {
                    let p = &flow.particles[*i];
                    let p_right = p.obs.value(j);
                    for r in 0..d {
                        p_left[r] = p_right[r] - dxj[r];
                    }
                    for (m, eta) in etas.shapes.iter().enumerate() {
                        eta.grad_into(&p_left, &mut grad);
                        t11 -= a_left[m] * dot(&grad, dxj) * inv_n;
                        if indicator {
                            let de = eta.value(p_right) - eta.value(&p_left);
                            t10 += a_left[m] * de * inv_n;
                            if let Some(dyj) = yjump {
                                for c in 0..dy {
                                    t9 += hg[c * n_eta + m] * de * dyj[c] * inv_n;
                                }
                            }
                        }
                    }
                }
                if indicator {
                    eng.hess_z_into(&wphi_left, &z_left, &mut b);
                    for (i, dxi) in &jumpers {
                        let ip = pair(*i);
                        if let Some((_, dxp)) = jumpers.iter().find(|(q, _)| *q == ip) {
                            let pi = &flow.particles[*i];
                            let pp = &flow.particles[ip];
                            for (m, em) in etas.shapes.iter().enumerate() {
                                let xi = pi.obs.value(j);
                                for r in 0..d {
                                    p_left[r] = xi[r] - dxi[r];
                                }
                                let dem = em.value(xi) - em.value(&p_left);
                                for (q, eq) in etas.shapes.iter().enumerate() {
                                    let xp = pp.obs.value(j);
                                    for r in 0..d {
                                        p_left[r] = xp[r] - dxp[r];
                                    }
                                    let deq = eq.value(xp) - eq.value(&p_left);
                                    t8 += 0.5 * b[m * n_eta + q] * dem * deq * inv_n;
                                }
                            }
                        }
                    }
                }
                row[7] -= t11; // jump part of int d_muF dX' (positive sign)
                row[11] += t8;
                row[12] += t9;
                row[13] += t10;
                row[14] += t11;
            }
            if let Some(dxj) = xjump {
                // x bracket at the right-endpoint measure (forward sampling).
                let zr = z.value(j);
                let wpsi_j = eng.w_psi(j, false, zr);
                eng.grad_x_into(&wpsi_j, &xs_left, &mut gx);
                let gl = dot(&gx, dxj);
                row[3] += gl;
                row[6] +=
                    eng.eval(j, false, x_right, zr) - eng.eval(j, false, &xs_left, zr) - gl;
            }
        }
    }

    for k in s_idx + 1..curves.times.len() {
        for t in 0..curves.labels.len() {
            let prev = curves.values.row(k - 1)[t];
            curves.values.row_mut(k)[t] += prev;
        }
    }

    let lhs = eng.eval(t_idx, false, world.x.obs.value(t_idx), z.value(t_idx))
        - eng.eval(s_idx, false, world.x.obs.value(s_idx), z.value(s_idx));
    let mut breakdown = TermBreakdown::new("coro2", lhs);
    for (t, l) in curves.labels.iter().enumerate() {
        breakdown.push(l.clone(), curves.values.row(t_idx)[t]);
    }
    Ok((breakdown, curves))
}

/// Run the conditional time-space-measure verification over outer worlds.
pub fn verify_conditional_space_measure(
    sc: &ConditionalSpaceMeasureScenario,
    sizes: ConditionalSizes,
    cov: CovMode,
    seed: u64,
) -> Result<(VerificationReport, TermCurves)> {
    if sizes.n_inner < 3 {
        return Err(EngineError::InvalidArgument(
            "conditional verification needs N_inner >= 3".into(),
        ));
    }
    let mut breakdowns = Vec::with_capacity(sizes.n_worlds);
    let mut first_curves = None;
    for m in 0..sizes.n_worlds.max(1) {
        let world = build_conditional_space_measure_world(sc, sizes.n_steps, sizes.n_inner, seed, m)?;
        let t_idx = world.sys.grid().len() - 1;
        let (bd, cv) = rhs_terms_conditional_space_measure(sc, &world, cov, 0, t_idx)?;
        if first_curves.is_none() {
            first_curves = Some(cv);
        }
        breakdowns.push(bd);
    }
    let report = VerificationReport::from_breakdowns("coro2", "conditional", seed, breakdowns);
    Ok((report, first_curves.expect("at least one world")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{CylindricalFn, OuterFn, OuterTerm, TestFunction, Univariate};
    use crate::coeffs::JumpPart;
    use crate::drivers::JumpSpec;
    use crate::fields::{MeasureField, Modulation, SpaceField};
    use crate::verifier::full::{build_full_world, rhs_terms_full, FullLawScenario};
    use crate::verifier::ito::verify_ito_wentzell_pathwise;

    /// phi(x) = 1 with exactly zero derivatives.
    fn phi_one() -> TestFunction {
        TestFunction::uni(
            "1",
            0,
            Univariate::Poly([1.0, 0.0, 0.0, 0.0, 0.0]),
            1e9,
            true,
        )
    }

    /// Psi(mu) = 1 with exactly zero measure derivatives.
    fn psi_one() -> CylindricalFn {
        CylindricalFn::new(
            OuterFn::new(1, vec![OuterTerm::Const(1.0)]),
            vec![TestFunction::coord_1d()],
        )
        .unwrap()
    }

    fn layer(phi: TestFunction, psi: CylindricalFn) -> ProductLayer {
        ProductLayer { phi, psi }
    }

    #[test]
    fn continuous_scenario_forms_coincide_term_by_term() {
        // Without jumps the two chain forms run through identical code paths,
        // so every term agrees to the float and both totals verify.
        let field = Arc::new(SpaceMeasureField {
            f0: vec![(1.0, layer(TestFunction::square_1d(), CylindricalFn::mean_1d()))],
            g: vec![(
                Modulation::Const(0.8),
                layer(TestFunction::coord_1d(), CylindricalFn::second_moment_1d()),
            )],
            h: vec![(
                0,
                Modulation::Const(1.0),
                layer(TestFunction::coord_1d(), CylindricalFn::mean_1d()),
            )],
        });
        let sc = SpaceMeasureScenario {
            name: "continuous-product".into(),
            coeffs: Coeffs::additive_1d(0.2, 0.7),
            x0: vec![0.1],
            field,
            y_coeffs: Some(Coeffs::additive_1d(0.0, 1.0)),
            y0: vec![0.0],
            law_continuous: true,
            t_start: 0.0,
            t_end: 1.0,
        };
        let mode = FullMode::EmpiricalProjection { corrections: true };
        let world = build_space_measure_world(&sc, mode, 200, 30, 17, 0).unwrap();
        let t_idx = world.grid.len() - 1;
        let (b1, _) =
            rhs_terms_space_measure(&sc, &world, ChainForm::Coro1, mode, CovMode::Realized, 0, t_idx)
                .unwrap();
        let (b2, _) = rhs_terms_space_measure(
            &sc,
            &world,
            ChainForm::Coro1Alt,
            mode,
            CovMode::Realized,
            0,
            t_idx,
        )
        .unwrap();
        for l in CORO1_LABELS.iter().chain(SM_CORRECTION_LABELS.iter()) {
            let v1 = b1.term(l).unwrap();
            let v2 = b2.term(l).unwrap();
            assert_eq!(v1, v2, "term {l}: {v1} vs {v2}");
        }
        assert_eq!(b1.lhs, b2.lhs);
        assert!(b1.residual().abs() < 0.2, "residual {}", b1.residual());
    }

    #[test]
    fn measure_independent_field_matches_space_form_residual() {
        // Psi = 1: the field degenerates to a space-argument random field and
        // both chain forms must reproduce the space-form assembly's residual
        // on the same world to reassociation error.
        let spec = JumpSpec::unit_jumps(3.0).unwrap();
        let field = Arc::new(SpaceMeasureField {
            f0: vec![(1.0, layer(TestFunction::square_1d(), psi_one()))],
            g: vec![(
                Modulation::Const(0.6),
                layer(TestFunction::coord_1d(), psi_one()),
            )],
            h: vec![(
                0,
                Modulation::Const(1.0),
                layer(TestFunction::coord_1d(), psi_one()),
            )],
        });
        let sc = SpaceMeasureScenario {
            name: "mu-independent".into(),
            coeffs: Coeffs::additive_1d(0.3, 0.8)
                .with_jumps(vec![JumpPart::scalar_mark(spec, 0.7)]),
            x0: vec![0.1],
            field,
            y_coeffs: Some(Coeffs::additive_1d(0.1, 0.7)),
            y0: vec![0.0],
            law_continuous: false,
            t_start: 0.0,
            t_end: 1.0,
        };
        let mode = FullMode::EmpiricalProjection { corrections: true };
        let world = build_space_measure_world(&sc, mode, 120, 10, 23, 0).unwrap();
        let t_idx = world.grid.len() - 1;
        assert!(!world.x.obs.jumps.is_empty());

        // Oracle: the same field with the measure slot dropped.
        let space = Arc::new(SpaceField {
            f0: vec![(1.0, TestFunction::square_1d())],
            g: vec![(Modulation::Const(0.6), TestFunction::coord_1d())],
            h: vec![(0, Modulation::Const(1.0), TestFunction::coord_1d())],
        });
        let bound = space.bind(&world.y.obs).unwrap();
        let (oracle, _) =
            verify_ito_wentzell_pathwise(&bound, &world.x.obs, &world.y.obs, 0, t_idx).unwrap();

        for form in [ChainForm::Coro1, ChainForm::Coro1Alt] {
            let (bd, _) =
                rhs_terms_space_measure(&sc, &world, form, mode, CovMode::Realized, 0, t_idx)
                    .unwrap();
            let diff = (bd.residual() - oracle.residual()).abs();
            assert!(diff <= 1e-12, "{}: residual defect {diff:.3e}", form.formula());
            // All measure terms vanish identically.
            for l in [2, 3, 4, 5, 6] {
                assert_eq!(bd.term(CORO1_LABELS[l]).unwrap(), 0.0, "term {l}");
            }
        }
    }

    #[test]
    fn space_independent_field_matches_full_law_terms() {
        // phi = 1: the field degenerates to a measure field and the measure
        // block must reproduce the full-law assembly term by term on the same
        // world (X continuous so both builds share one grid).
        let spec = JumpSpec::unit_jumps(1.5).unwrap();
        let coeffs = Coeffs::additive_1d(0.1, 0.6)
            .with_jumps(vec![JumpPart::scalar_mark(spec, 0.5)]);
        let sm_field = Arc::new(SpaceMeasureField {
            f0: vec![(1.0, layer(phi_one(), CylindricalFn::mean_squared_1d()))],
            g: vec![(
                Modulation::Const(0.7),
                layer(phi_one(), CylindricalFn::second_moment_1d()),
            )],
            h: vec![(
                0,
                Modulation::Const(1.0),
                layer(phi_one(), CylindricalFn::mean_1d()),
            )],
        });
        // X must be continuous so the two worlds share a grid: drop the jump
        // part for the distinguished path only by zeroing its coefficient is
        // not possible per-path, so use continuous dynamics for everything in
        // the full-law reference and jumpy cloud dynamics in both? No: both
        // scenarios must share cloud dynamics. Keep the jumps in the cloud;
        // the distinguished path then jumps too and adds grid points, so the
        // reference world must be built on the same scenario type. Instead,
        // verify on continuous dynamics for this exact-match test.
        let _ = coeffs;
        let coeffs = Coeffs::additive_1d(0.1, 0.6);
        let sc = SpaceMeasureScenario {
            name: "x-independent".into(),
            coeffs: coeffs.clone(),
            x0: vec![0.2],
            field: sm_field,
            y_coeffs: Some(Coeffs::additive_1d(0.0, 0.9)),
            y0: vec![0.0],
            law_continuous: true,
            t_start: 0.0,
            t_end: 1.0,
        };
        let mu_field = Arc::new(MeasureField {
            f0: vec![(1.0, CylindricalFn::mean_squared_1d())],
            g: vec![(Modulation::Const(0.7), CylindricalFn::second_moment_1d())],
            h: vec![(0, Modulation::Const(1.0), CylindricalFn::mean_1d())],
        });
        let full_sc = FullLawScenario {
            name: "x-independent-ref".into(),
            coeffs,
            x0: vec![0.2],
            field: mu_field,
            y_coeffs: sc.y_coeffs.clone(),
            y0: vec![0.0],
            law_continuous: true,
            t_start: 0.0,
            t_end: 1.0,
        };
        let mode = FullMode::EmpiricalProjection { corrections: true };
        let world = build_space_measure_world(&sc, mode, 80, 40, 31, 0).unwrap();
        let ref_world = build_full_world(&full_sc, mode, 80, 40, 31, 0).unwrap();
        assert_eq!(world.grid.len(), ref_world.grid.len());
        let t_idx = world.grid.len() - 1;
        let asm = rhs_terms_full(&full_sc, &ref_world, mode, CovMode::Realized, 0, t_idx).unwrap();

        for form in [ChainForm::Coro1, ChainForm::Coro1Alt] {
            let (bd, _) =
                rhs_terms_space_measure(&sc, &world, form, mode, CovMode::Realized, 0, t_idx)
                    .unwrap();
            assert!((bd.lhs - asm.thm3.lhs).abs() <= 1e-12);
            // Shared measure/time terms match the full-law assembly.
            for (mine, theirs) in [
                (CORO1_LABELS[0], "int G dr"),
                (CORO1_LABELS[1], "int H dY"),
                (CORO1_LABELS[2], "E~[int d_muF dX~]"),
                (CORO1_LABELS[3], "1/2 E~[d_xd_muF:d[X~,X~]^c]"),
                (CORO1_LABELS[4], "jump sum: F"),
                (CORO1_LABELS[5], "jump sum: dF/dmu 1{mu=mu-}"),
                (CORO1_LABELS[6], "-E~[Sum d_muF DX~]"),
                (SM_CORRECTION_LABELS[0], "I2: 1/2 d_zzf:d[Z,Z]^c"),
                (SM_CORRECTION_LABELS[1], "I3: d_zh:d[Z,Y]^c"),
            ] {
                let v = bd.term(mine).unwrap();
                let r = asm.thm3.term(theirs).unwrap();
                assert!(
                    (v - r).abs() <= 1e-12,
                    "{}: term '{mine}' {v} vs '{theirs}' {r}",
                    form.formula()
                );
            }
            // Space terms vanish identically for a constant phi.
            for l in [7, 8, 9, 10] {
                assert_eq!(bd.term(CORO1_LABELS[l]).unwrap(), 0.0, "term {l}");
            }
        }
    }

    #[test]
    fn product_of_state_and_mean_mc_law() {
        // F(t, x, mu) = x * <mu, x> with X = W independent of the cloud:
        // E[F(t, X_t, mu_t)] = 0 and both form totals verify within the
        // Monte Carlo band.
        let field = Arc::new(SpaceMeasureField {
            f0: vec![(1.0, layer(TestFunction::coord_1d(), CylindricalFn::mean_1d()))],
            g: vec![],
            h: vec![],
        });
        let sc = SpaceMeasureScenario {
            name: "x-times-mean".into(),
            coeffs: Coeffs::additive_1d(0.0, 1.0),
            x0: vec![0.0],
            field,
            y_coeffs: None,
            y0: vec![],
            law_continuous: true,
            t_start: 0.0,
            t_end: 1.0,
        };
        let sizes = FullSizes {
            n_steps: 60,
            n_particles: 200,
            n_worlds: 20,
        };
        for form in [ChainForm::Coro1, ChainForm::Coro1Alt] {
            let (report, _) = verify_time_space_measure(
                &sc,
                form,
                FullMode::McLaw { n_tilde: 200 },
                sizes,
                CovMode::GeneratorExact,
                13,
            )
            .unwrap();
            assert!(
                report.mean_residual.abs() <= 3.0 * report.se,
                "{}: residual {} se {}",
                form.formula(),
                report.mean_residual,
                report.se
            );
            // Mean of the LHS over worlds is ~ 0 (X independent of the cloud).
            let lhs: Vec<f64> = report.breakdowns.iter().map(|b| b.lhs).collect();
            let (m, se) = crate::stats::mean_se(&lhs);
            assert!(m.abs() <= 3.0 * se.max(1e-3), "lhs mean {m} se {se}");
        }
    }

    #[test]
    fn jumpy_scenario_both_forms_pass() {
        // Jumps in the state path, the cloud and the driver; the empirical
        // identity holds for both chain forms up to discretization and the
        // uncompensated [X, Z] sampling noise (X independent of the cloud).
        let spec = JumpSpec::unit_jumps(2.0).unwrap();
        let yspec = JumpSpec::unit_jumps(3.0).unwrap();
        let field = Arc::new(SpaceMeasureField {
            f0: vec![(1.0, layer(TestFunction::square_1d(), CylindricalFn::mean_squared_1d()))],
            g: vec![(
                Modulation::Const(0.5),
                layer(TestFunction::coord_1d(), CylindricalFn::mean_1d()),
            )],
            h: vec![(
                0,
                Modulation::Const(0.8),
                layer(TestFunction::square_1d(), CylindricalFn::mean_1d()),
            )],
        });
        let sc = SpaceMeasureScenario {
            name: "jumpy-product".into(),
            coeffs: Coeffs::additive_1d(0.2, 0.5)
                .with_jumps(vec![JumpPart::scalar_mark(spec, 0.4)]),
            x0: vec![0.1],
            field,
            y_coeffs: Some(
                Coeffs::additive_1d(0.1, 0.6)
                    .with_jumps(vec![JumpPart::scalar_mark(yspec, 0.5)]),
            ),
            y0: vec![0.0],
            law_continuous: false,
            t_start: 0.0,
            t_end: 1.0,
        };
        let mode = FullMode::EmpiricalProjection { corrections: true };
        let world = build_space_measure_world(&sc, mode, 150, 40, 41, 0).unwrap();
        let t_idx = world.grid.len() - 1;
        assert!(!world.x.obs.jumps.is_empty());
        assert!(!world.y.obs.jumps.is_empty());
        for form in [ChainForm::Coro1, ChainForm::Coro1Alt] {
            let (bd, _) =
                rhs_terms_space_measure(&sc, &world, form, mode, CovMode::Realized, 0, t_idx)
                    .unwrap();
            assert!(
                bd.residual().abs() < 0.25,
                "{}: residual {}",
                form.formula(),
                bd.residual()
            );
        }
    }

    #[test]
    fn coro2_common_brownian_bilinear_is_exact() {
        // Fully common noise: every conditional copy equals the distinguished
        // path B, so F(t, x, mu) = x * <mu, x> gives LHS = B_t^2. Forward
        // measure sampling in the dX-integrand carries the [X, mu] bracket and
        // the realized assembly telescopes exactly for the bilinear field.
        let field = Arc::new(SpaceMeasureField {
            f0: vec![(1.0, layer(TestFunction::coord_1d(), CylindricalFn::mean_1d()))],
            g: vec![],
            h: vec![],
        });
        let sc = ConditionalSpaceMeasureScenario {
            name: "common-bilinear".into(),
            coeffs: Coeffs::additive_1d(0.0, 1.0)
                .with_common_split(1, 0)
                .unwrap(),
            x0: vec![0.0],
            field,
            y_coeffs: None,
            y0: vec![],
            t_start: 0.0,
            t_end: 1.0,
        };
        let world = build_conditional_space_measure_world(&sc, 200, 4, 19, 0).unwrap();
        let t_idx = world.sys.grid().len() - 1;
        let (bd, _) =
            rhs_terms_conditional_space_measure(&sc, &world, CovMode::Realized, 0, t_idx).unwrap();
        assert!(bd.residual().abs() < 1e-12, "residual {}", bd.residual());
        let b_t = world.x.obs.value(t_idx)[0];
        assert!((bd.lhs - b_t * b_t).abs() < 1e-12);
        // Linear measure slot: no second-order measure terms.
        assert_eq!(bd.term(CORO2_LABELS[9]).unwrap(), 0.0);
        assert_eq!(bd.term(CORO2_LABELS[11]).unwrap(), 0.0);
    }

    #[test]
    fn coro2_space_independent_matches_conditional_terms() {
        // phi = 1 with common jumps only: the cloud of the extended system is
        // bit-identical to the reference conditional world, so every measure
        // term must match the conditional assembly and the space terms vanish.
        use crate::verifier::conditional::{
            build_conditional_world, rhs_terms_conditional, ConditionalScenario, THM4_LABELS,
        };
        let spec = JumpSpec::unit_jumps(3.0).unwrap();
        let coeffs = Coeffs::additive_1d(0.1, 0.8)
            .with_jumps(vec![JumpPart::scalar_mark(spec, 0.5)])
            .with_common_split(1, 1)
            .unwrap();
        let sm_field = Arc::new(SpaceMeasureField {
            f0: vec![(1.0, layer(phi_one(), CylindricalFn::mean_squared_1d()))],
            g: vec![(
                Modulation::Const(0.7),
                layer(phi_one(), CylindricalFn::second_moment_1d()),
            )],
            h: vec![(
                0,
                Modulation::Const(1.0),
                layer(phi_one(), CylindricalFn::mean_1d()),
            )],
        });
        let sc = ConditionalSpaceMeasureScenario {
            name: "coro2-x-independent".into(),
            coeffs: coeffs.clone(),
            x0: vec![0.1],
            field: sm_field,
            y_coeffs: None,
            y0: vec![],
            t_start: 0.0,
            t_end: 1.0,
        };
        let ref_sc = ConditionalScenario {
            name: "coro2-x-independent-ref".into(),
            coeffs,
            x0: vec![0.1],
            field: Arc::new(MeasureField {
                f0: vec![(1.0, CylindricalFn::mean_squared_1d())],
                g: vec![(Modulation::Const(0.7), CylindricalFn::second_moment_1d())],
                h: vec![(0, Modulation::Const(1.0), CylindricalFn::mean_1d())],
            }),
            y_coeffs: None,
            y0: vec![],
            t_start: 0.0,
            t_end: 1.0,
        };
        let n_inner = 12;
        let world = build_conditional_space_measure_world(&sc, 60, n_inner, 37, 0).unwrap();
        let ref_world = build_conditional_world(&ref_sc, 60, n_inner, 37, 0).unwrap();
        assert_eq!(world.sys.grid().len(), ref_world.sys.grid().len());
        assert!(!world.law_jump_indices.is_empty());
        let t_idx = world.sys.grid().len() - 1;
        let (bd, _) =
            rhs_terms_conditional_space_measure(&sc, &world, CovMode::Realized, 0, t_idx).unwrap();
        let (rbd, _) =
            rhs_terms_conditional(&ref_sc, &ref_world, CovMode::Realized, 0, t_idx).unwrap();
        assert!((bd.lhs - rbd.lhs).abs() <= 1e-12);
        for (mine, theirs) in [
            (CORO2_LABELS[0], THM4_LABELS[0]),
            (CORO2_LABELS[1], THM4_LABELS[1]),
            (CORO2_LABELS[2], THM4_LABELS[2]),
            (CORO2_LABELS[7], THM4_LABELS[3]),
            (CORO2_LABELS[8], THM4_LABELS[4]),
            (CORO2_LABELS[9], THM4_LABELS[5]),
            (CORO2_LABELS[10], THM4_LABELS[6]),
            (CORO2_LABELS[11], THM4_LABELS[7]),
            (CORO2_LABELS[12], THM4_LABELS[8]),
            (CORO2_LABELS[13], THM4_LABELS[9]),
            (CORO2_LABELS[14], THM4_LABELS[10]),
        ] {
            let v = bd.term(mine).unwrap();
            let r = rbd.term(theirs).unwrap();
            assert!((v - r).abs() <= 1e-12, "term '{mine}' {v} vs '{theirs}' {r}");
        }
        for l in [3, 4, 5, 6] {
            assert_eq!(bd.term(CORO2_LABELS[l]).unwrap(), 0.0, "term {l}");
        }
    }

    #[test]
    fn coro2_needs_three_inner_particles() {
        let sc = ConditionalSpaceMeasureScenario {
            name: "tiny".into(),
            coeffs: Coeffs::additive_1d(0.0, 1.0)
                .with_common_split(0, 0)
                .unwrap(),
            x0: vec![0.0],
            field: Arc::new(SpaceMeasureField {
                f0: vec![(1.0, layer(TestFunction::coord_1d(), CylindricalFn::mean_1d()))],
                g: vec![],
                h: vec![],
            }),
            y_coeffs: None,
            y0: vec![],
            t_start: 0.0,
            t_end: 1.0,
        };
        let sizes = ConditionalSizes {
            n_steps: 10,
            n_inner: 2,
            n_worlds: 1,
        };
        assert!(verify_conditional_space_measure(&sc, sizes, CovMode::Realized, 1).is_err());
    }
}
