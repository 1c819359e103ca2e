//! Verification of the measure-flow expansion for full laws.
//!
//! Two modes share one term assembly:
//!
//! * pathwise-empirical — the formula is applied to the empirical flow of an
//!   N-particle cloud itself (tilde cloud = the cloud). With the finite-N
//!   correction terms I2/I3 switched on, the term set is an exact regrouping
//!   of the space-form assembly applied to the projected coordinate process
//!   Z^m = <mu, eta_m>, so the two residuals agree to reassociation error.
//! * mc-law — the measure flow approximates the true law with a large cloud;
//!   the tilde expectation is realized on an independent cloud, and residuals
//!   are statistical over independent worlds.

use std::sync::Arc;

use crate::coeffs::Coeffs;
use crate::drivers::{sample_brownian, sample_events, DriverSet, EventList};
use crate::error::{EngineError, Result};
use crate::fields::MeasureField;
use crate::flow::{sample_flow_events, simulate_flow_on_grid, EmpiricalFlow};
use crate::grid::TimeGrid;
use crate::linalg::dot;
use crate::path::{simulate_semimartingale, CovMode, SemimartingalePath, SimOptions};
use crate::rng::tag;

use super::ito::verify_ito_wentzell_pathwise;
use super::pathfield::{project_flow, EtaSet, MeasureFieldOnZ, PathField};
use super::report::{TermBreakdown, TermCurves, VerificationReport};

/// Term labels of the full-law assembly, in formula order.
pub const THM3_LABELS: [&str; 7] = [
    "int G dr",
    "int H dY",
    "E~[int d_muF dX~]",
    "1/2 E~[d_xd_muF:d[X~,X~]^c]",
    "jump sum: F",
    "jump sum: dF/dmu 1{mu=mu-}",
    "-E~[Sum d_muF DX~]",
];

/// Finite-N correction labels (pathwise-empirical mode, corrections ON).
pub const CORRECTION_LABELS: [&str; 2] = ["I2: 1/2 d_zzf:d[Z,Z]^c", "I3: d_zh:d[Z,Y]^c"];

/// A full-law verification scenario: state dynamics, measure field, optional
/// driver dynamics for Y, and the declared time-continuity of the law.
#[derive(Clone)]
pub struct FullLawScenario {
    pub name: String,
    pub coeffs: Coeffs,
    pub x0: Vec<f64>,
    pub field: Arc<MeasureField>,
    /// Dynamics of the field driver Y; None means Y is constant (zero).
    pub y_coeffs: Option<Coeffs>,
    pub y0: Vec<f64>,
    /// Declared continuity in time of the true law; controls the indicator
    /// and the jump-index set of the measure jump sum in mc-law mode.
    pub law_continuous: bool,
    pub t_start: f64,
    pub t_end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FullMode {
    /// Exact finite-N identity on the empirical flow; tilde cloud = the cloud.
    EmpiricalProjection { corrections: bool },
    /// Statistical check against the law; independent tilde cloud of this size.
    McLaw { n_tilde: usize },
}

impl FullMode {
    pub fn label(&self) -> &'static str {
        match self {
            FullMode::EmpiricalProjection { .. } => "pathwise-empirical",
            FullMode::McLaw { .. } => "mc-law",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FullSizes {
    pub n_steps: usize,
    pub n_particles: usize,
    pub n_worlds: usize,
}

/// One simulated world: law cloud, optional independent tilde cloud, and the
/// field driver, all on one shared event-augmented grid.
pub struct FullWorld {
    pub grid: Arc<TimeGrid>,
    pub flow: EmpiricalFlow,
    pub tilde: Option<EmpiricalFlow>,
    pub y: SemimartingalePath,
}

/// Simulate one world. All event times (law cloud, tilde cloud, Y) are
/// sampled first and merged into one grid so every jump is an exact grid
/// point for every process.
pub fn build_full_world(
    sc: &FullLawScenario,
    mode: FullMode,
    n_steps: usize,
    n_particles: usize,
    seed: u64,
    world: usize,
) -> Result<FullWorld> {
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
    Ok(FullWorld {
        grid,
        flow,
        tilde,
        y,
    })
}

/// Both assemblies of one world: the measure-form term set (plus optional
/// finite-N corrections) and the space-form oracle on the projected Z-path.
pub struct FullAssembly {
    pub thm3: TermBreakdown,
    pub thm2_oracle: TermBreakdown,
    pub curves: TermCurves,
}

/// Evaluate every term of the full-law expansion on one world.
pub fn rhs_terms_full(
    sc: &FullLawScenario,
    world: &FullWorld,
    mode: FullMode,
    cov: CovMode,
    s_idx: usize,
    t_idx: usize,
) -> Result<FullAssembly> {
    let bound = sc.field.bind(&world.y.obs)?;
    let etas = EtaSet::from_field(&sc.field);
    let z = project_flow(&world.flow, &etas);
    let wrapper = MeasureFieldOnZ {
        bound: &bound,
        etas: &etas,
    };
    let (thm2_oracle, thm2_curves) =
        verify_ito_wentzell_pathwise(&wrapper, &z, &world.y.obs, s_idx, t_idx)?;

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
    let corrections = matches!(
        mode,
        FullMode::EmpiricalProjection { corrections: true }
    );

    let d = world.flow.d();
    let n_eta = etas.n();
    let dy = wrapper.dy();
    let inv_nt = 1.0 / tilde.n() as f64;
    let d_w = sc.coeffs.d_w;

    let mut labels: Vec<String> = THM3_LABELS.iter().map(|s| s.to_string()).collect();
    if corrections {
        labels.extend(CORRECTION_LABELS.iter().map(|s| s.to_string()));
    }
    let n_terms = labels.len();
    let mut curves = TermCurves::new(labels, world.grid.points().to_vec());

    let mut a = vec![0.0; n_eta];
    let mut a_left = vec![0.0; n_eta];
    let mut hvals = vec![0.0; dy.max(1)];
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    let mut dxc = vec![0.0; d];
    let mut x_next = vec![0.0; d];
    let mut x_left = vec![0.0; d];
    let mut sig = vec![0.0; d * d_w];
    let mut a_mat = vec![0.0; d * d];
    let mut cursors: Vec<_> = tilde
        .particles
        .iter()
        .map(|p| p.obs.jumps.cursor())
        .collect();
    let mut zcur = z.jumps.cursor();
    let mut ycur = world.y.obs.jumps.cursor();
    // (particle index, jump increment) of tilde particles jumping at k+1.
    let mut jumpers: Vec<(usize, Vec<f64>)> = Vec::new();

    for k in s_idx..t_idx {
        let j = k + 1;
        let dt = world.grid.dt(k);
        let t_k = world.grid.t(k);
        let zk = z.value(k);
        wrapper.grad_into(k, false, zk, &mut a);

        let mut t1c = 0.0;
        let mut t2 = 0.0;
        jumpers.clear();
        for (i, p) in tilde.particles.iter().enumerate() {
            let jx = cursors[i].at(j);
            p.obs.cont_increment_into(k, jx, &mut dxc);
            let xk = p.obs.value(k);
            if matches!(cov, CovMode::GeneratorExact) {
                (sc.coeffs.diffusion)(t_k, xk, &mut sig);
                // a_mat = sigma sigma^T
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
                eta.grad_into(xk, &mut grad);
                let gdx = dot(&grad, &dxc);
                t1c += a[m] * gdx * inv_nt;
                match cov {
                    CovMode::Realized => {
                        for r in 0..d {
                            x_next[r] = xk[r] + dxc[r];
                        }
                        // Second-order remainder of eta along the continuous
                        // part of the step; sums to 1/2 hess : dXc dXc^T.
                        t2 += a[m] * (eta.value(&x_next) - eta.value(xk) - gdx) * inv_nt;
                    }
                    CovMode::GeneratorExact => {
                        eta.hess_into(xk, &mut hess);
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

        let row = curves.values.row_mut(j);
        row[0] += wrapper.g_value(k, zk) * dt;
        if dy > 0 {
            wrapper.h_values_into(k, zk, &mut hvals);
            let ya = world.y.obs.value(k);
            let yb = world.y.obs.value(j);
            for c in 0..dy {
                row[1] += hvals[c] * (yb[c] - ya[c]);
            }
        }
        row[2] += t1c;
        row[3] += t2;

        // Jump handling at index j.
        let zj = zcur.at(j).is_some();
        let yj = ycur.at(j);
        if zj || yj.is_some() || !jumpers.is_empty() {
            let z_left = z.left_limit(j);
            wrapper.grad_into(j, true, &z_left, &mut a_left);

            let include_f_jump = if law_treated_continuous {
                yj.is_some()
            } else {
                zj || yj.is_some()
            };
            if include_f_jump {
                let mut term4 =
                    wrapper.eval(j, false, z.value(j)) - wrapper.eval(j, true, &z_left);
                if dy > 0 {
                    if let Some(dyj) = yj {
                        wrapper.h_values_into(j, &z_left, &mut hvals);
                        for c in 0..dy {
                            term4 -= hvals[c] * dyj[c];
                        }
                    }
                }
                row[4] += term4;
            }

            if !jumpers.is_empty() {
                // Indicator 1{mu_j = mu_{j-}}: false exactly at law jumps.
                let law_jump_here = !law_treated_continuous && zj;
                let mut t1j = 0.0;
                let mut t5 = 0.0;
                for (i, dxj) in &jumpers {
                    let p = &tilde.particles[*i];
                    let x_right = p.obs.value(j);
                    for r in 0..d {
                        x_left[r] = x_right[r] - dxj[r];
                    }
                    for (m, eta) in etas.shapes.iter().enumerate() {
                        eta.grad_into(&x_left, &mut grad);
                        t1j += a_left[m] * dot(&grad, dxj) * inv_nt;
                        if !law_jump_here {
                            t5 += a_left[m] * (eta.value(x_right) - eta.value(&x_left)) * inv_nt;
                        }
                    }
                }
                row[2] += t1j;
                row[5] += t5;
                row[6] -= t1j;
            }
        }
    }

    // Finite-N corrections are the second-order Z-terms of the space-form
    // assembly, copied float-for-float from the oracle run.
    if corrections {
        for (slot, src) in [(7usize, 3usize), (8, 4)] {
            for k in 0..curves.times.len() {
                let v = thm2_curves.values.row(k)[src];
                let prev = if k > 0 {
                    thm2_curves.values.row(k - 1)[src]
                } else {
                    0.0
                };
                // thm2 curves are already cumulative; store the increment so
                // the shared accumulation below rebuilds the same cumsum.
                curves.values.row_mut(k)[slot] += v - prev;
            }
        }
    }
    for k in s_idx + 1..curves.times.len() {
        for t in 0..n_terms {
            let prev = curves.values.row(k - 1)[t];
            curves.values.row_mut(k)[t] += prev;
        }
    }

    let lhs = wrapper.eval(t_idx, false, z.value(t_idx)) - wrapper.eval(s_idx, false, z.value(s_idx));
    let mut thm3 = TermBreakdown::new("thm3", lhs);
    for (t, l) in curves.labels.iter().enumerate() {
        thm3.push(l.clone(), curves.values.row(t_idx)[t]);
    }
    Ok(FullAssembly {
        thm3,
        thm2_oracle,
        curves,
    })
}

/// Run the full-law verification over independent worlds; returns the report
/// and the per-term curves of the first world.
pub fn verify_full_measure(
    sc: &FullLawScenario,
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
        let world = build_full_world(sc, mode, sizes.n_steps, sizes.n_particles, seed, m)?;
        let t_idx = world.grid.len() - 1;
        let asm = rhs_terms_full(sc, &world, mode, cov, 0, t_idx)?;
        if first_curves.is_none() {
            first_curves = Some(asm.curves);
        }
        breakdowns.push(asm.thm3);
    }
    let report = VerificationReport::from_breakdowns("thm3", mode.label(), seed, breakdowns);
    Ok((report, first_curves.expect("at least one world")))
}
