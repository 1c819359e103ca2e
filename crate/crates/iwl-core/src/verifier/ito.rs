//! Pathwise space-form expansions: the change-of-variable identity for a
//! fixed test function along a jump semimartingale, and its random-field
//! generalization where the field itself is driven by a second semimartingale.
//!
//! Both assemblies are exact pathwise identities up to time discretization:
//! jumps are handled exactly (left limits and jump increments are stored, not
//! inferred), so the residual is pure Riemann/Ito discretization error of the
//! continuous parts.

use std::sync::Arc;

use crate::calculus::TestFunction;
use crate::error::{EngineError, Result};
use crate::linalg::dot;
use crate::path::ObservedPath;

use super::pathfield::PathField;
use super::report::{TermBreakdown, TermCurves};

/// Labels of the plain change-of-variable assembly, in formula order.
pub const ITO_LABELS: [&str; 3] = ["int dg dX", "1/2 int d2g:d[X,X]^c", "jump sum: g"];

/// Labels of the random-field assembly, in formula order.
pub const IW_LABELS: [&str; 6] = [
    "int G dr",
    "int H dY",
    "int d_xF dX",
    "1/2 int d_xxF:d[X,X]^c",
    "int d_xH:d[X,Y]^c",
    "jump sum: F",
];

/// Left-point discretization of g(X_t) - g(X_s) as gradient, continuous
/// second-order, and jump-compensation terms; returns the breakdown together
/// with cumulative per-term curves on [t_s, t_t].
pub fn verify_ito_pathwise(
    g: &TestFunction,
    x: &ObservedPath,
    s_idx: usize,
    t_idx: usize,
) -> Result<(TermBreakdown, TermCurves)> {
    check_window(x.grid.len(), s_idx, t_idx)?;
    let d = x.d();
    let labels: Vec<String> = ITO_LABELS.iter().map(|s| s.to_string()).collect();
    let mut curves = TermCurves::new(labels, x.grid.points().to_vec());

    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    let mut dxc = vec![0.0; d];
    let mut x_left = vec![0.0; d];
    let mut cursor = x.jumps.cursor();
    for k in s_idx..t_idx {
        let xk = x.value(k);
        let jump = cursor.at(k + 1);
        x.cont_increment_into(k, jump, &mut dxc);
        g.grad_into(xk, &mut grad);
        g.hess_into(xk, &mut hess);
        let row = curves.values.row_mut(k + 1);
        row[0] += dot(&grad, &dxc);
        row[1] += 0.5 * quad_form(&hess, &dxc, &dxc, d);
        if let Some(dx) = jump {
            x.left_limit_into(k + 1, &mut x_left);
            g.grad_into(&x_left, &mut grad);
            let gl = dot(&grad, dx);
            row[0] += gl;
            row[2] += g.value(x.value(k + 1)) - g.value(&x_left) - gl;
        }
    }
    accumulate(&mut curves, s_idx);

    let lhs = g.value(x.value(t_idx)) - g.value(x.value(s_idx));
    let mut breakdown = TermBreakdown::new("thm1", lhs);
    for (j, l) in ITO_LABELS.iter().enumerate() {
        breakdown.push(*l, curves.values.row(t_idx)[j]);
    }
    Ok((breakdown, curves))
}

/// Left-point discretization of F(t, X_t) - F(s, X_s) for a random field F
/// driven by Y, along the state path X; six term groups, jumps from the union
/// of X- and Y-jump indices.
pub fn verify_ito_wentzell_pathwise(
    field: &impl PathField,
    x: &ObservedPath,
    y: &ObservedPath,
    s_idx: usize,
    t_idx: usize,
) -> Result<(TermBreakdown, TermCurves)> {
    check_window(x.grid.len(), s_idx, t_idx)?;
    if !Arc::ptr_eq(&x.grid, &y.grid) {
        return Err(EngineError::InvalidArgument(
            "state and driver paths must share one time grid".into(),
        ));
    }
    let d = x.d();
    let dy = field.dy();
    if dy > y.d() {
        return Err(EngineError::Dimension(format!(
            "field integrates against {dy} driver coordinates, path has {}",
            y.d()
        )));
    }
    let labels: Vec<String> = IW_LABELS.iter().map(|s| s.to_string()).collect();
    let mut curves = TermCurves::new(labels, x.grid.points().to_vec());

    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    let mut hvals = vec![0.0; dy];
    let mut hgrads = vec![0.0; dy * d];
    let mut dxc = vec![0.0; d];
    let mut dyc = vec![0.0; dy.max(1)];
    let mut x_left = vec![0.0; d];
    let zero = vec![0.0; d.max(dy)];
    let mut xcur = x.jumps.cursor();
    let mut ycur = y.jumps.cursor();
    for k in s_idx..t_idx {
        let xk = x.value(k);
        let dt = x.grid.dt(k);
        let jx = xcur.at(k + 1);
        let jy = ycur.at(k + 1);
        x.cont_increment_into(k, jx, &mut dxc);
        {
            // Continuous part of the driver increment over this step.
            let a = y.value(k);
            let b = y.value(k + 1);
            for c in 0..dy {
                dyc[c] = b[c] - a[c] - jy.map_or(0.0, |j| j[c]);
            }
        }
        let row = curves.values.row_mut(k + 1);
        row[0] += field.g_value(k, xk) * dt;
        if dy > 0 {
            field.h_values_into(k, xk, &mut hvals);
            let ya = y.value(k);
            let yb = y.value(k + 1);
            for c in 0..dy {
                row[1] += hvals[c] * (yb[c] - ya[c]);
            }
        }
        field.grad_into(k, false, xk, &mut grad);
        row[2] += dot(&grad, &dxc);
        field.hess_into(k, false, xk, &mut hess);
        row[3] += 0.5 * quad_form(&hess, &dxc, &dxc, d);
        if dy > 0 {
            field.h_grads_into(k, xk, &mut hgrads);
            for c in 0..dy {
                row[4] += dot(&hgrads[c * d..(c + 1) * d], &dxc) * dyc[c];
            }
        }
        if jx.is_some() || jy.is_some() {
            let j = k + 1;
            x.left_limit_into(j, &mut x_left);
            let dx = jx.unwrap_or(&zero[..d]);
            field.grad_into(j, true, &x_left, &mut grad);
            let gl = dot(&grad, dx);
            row[2] += gl;
            let mut jump_term =
                field.eval(j, false, x.value(j)) - field.eval(j, true, &x_left) - gl;
            if dy > 0 {
                if let Some(dyj) = jy {
                    field.h_values_into(j, &x_left, &mut hvals);
                    for c in 0..dy {
                        jump_term -= hvals[c] * dyj[c];
                    }
                }
            }
            row[5] += jump_term;
        }
    }
    accumulate(&mut curves, s_idx);

    let lhs = field.eval(t_idx, false, x.value(t_idx)) - field.eval(s_idx, false, x.value(s_idx));
    let mut breakdown = TermBreakdown::new("thm2", lhs);
    for (j, l) in IW_LABELS.iter().enumerate() {
        breakdown.push(*l, curves.values.row(t_idx)[j]);
    }
    Ok((breakdown, curves))
}

fn check_window(n_pts: usize, s_idx: usize, t_idx: usize) -> Result<()> {
    if t_idx >= n_pts || s_idx >= t_idx {
        return Err(EngineError::InvalidArgument(format!(
            "window [{s_idx}, {t_idx}] invalid for a grid of {n_pts} points"
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn quad_form(a: &[f64], u: &[f64], v: &[f64], d: usize) -> f64 {
    let mut s = 0.0;
    for r in 0..d {
        let row = &a[r * d..(r + 1) * d];
        s += u[r] * dot(row, v);
    }
    s
}

/// Turn per-step contributions (stored at row k+1) into cumulative curves.
fn accumulate(curves: &mut TermCurves, s_idx: usize) {
    let w = curves.labels.len();
    for k in s_idx + 1..curves.times.len() {
        for j in 0..w {
            let prev = curves.values.row(k - 1)[j];
            curves.values.row_mut(k)[j] += prev;
        }
    }
}
