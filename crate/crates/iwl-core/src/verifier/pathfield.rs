//! A common field-on-path interface for the space-form expansion engine.
//!
//! The same term assembly verifies two kinds of objects:
//!   * a space-argument random field F(t, x) along a state path X, and
//!   * a measure-argument field viewed through the projected coordinates
//!     Z^m_t = <mu_t, eta_m> of a particle cloud, where it becomes an
//!     outer function of the finite-dimensional cadlag path Z.
//! Sharing one engine (and one set of evaluation code paths) is what makes
//! the regrouping identity between the two assemblies checkable to
//! near-machine precision.

use std::sync::Arc;

use crate::calculus::TestFunction;
use crate::fields::{BoundMeasureField, BoundSpaceField, MeasureField};
use crate::flow::EmpiricalFlow;
use crate::linalg::Flat;
use crate::path::{Jumps, ObservedPath};

/// Field F(t, x) realized along a driver path, with all derivatives needed by
/// the space-form expansion. Index `i` is a grid index; `left` selects the
/// time-left-limit of the field (driver jump at t_i excluded).
pub trait PathField {
    /// State dimension.
    fn d(&self) -> usize;
    /// Driver coordinates the dY-layers integrate against.
    fn dy(&self) -> usize;
    fn eval(&self, i: usize, left: bool, x: &[f64]) -> f64;
    fn grad_into(&self, i: usize, left: bool, x: &[f64], out: &mut [f64]);
    /// Hessian, d x d row-major.
    fn hess_into(&self, i: usize, left: bool, x: &[f64], out: &mut [f64]);
    /// Integrand G_{t_k}(x).
    fn g_value(&self, k: usize, x: &[f64]) -> f64;
    /// Integrand H_{t_k}(x) per driver coordinate (len dy).
    fn h_values_into(&self, k: usize, x: &[f64], out: &mut [f64]);
    /// Space gradients of the H integrands: dy x d row-major, row c holding
    /// grad_x H^{(c)}(t_k, x).
    fn h_grads_into(&self, k: usize, x: &[f64], out: &mut [f64]);
}

impl PathField for BoundSpaceField {
    fn d(&self) -> usize {
        // Space fields in this crate are built from coordinate-wise shapes;
        // the state dimension is dictated by the caller's path. Derivative
        // buffers are sized by the call sites, so report 0 is not an option:
        // use the largest coordinate any shape touches (1 for 1-d scenarios).
        1
    }

    fn dy(&self) -> usize {
        self.field
            .h
            .iter()
            .map(|&(c, _, _)| c + 1)
            .max()
            .unwrap_or(0)
    }

    fn eval(&self, i: usize, left: bool, x: &[f64]) -> f64 {
        BoundSpaceField::eval(self, i, left, x)
    }

    fn grad_into(&self, i: usize, left: bool, x: &[f64], out: &mut [f64]) {
        BoundSpaceField::grad_into(self, i, left, x, out)
    }

    fn hess_into(&self, i: usize, left: bool, x: &[f64], out: &mut [f64]) {
        BoundSpaceField::hess_into(self, i, left, x, out)
    }

    fn g_value(&self, k: usize, x: &[f64]) -> f64 {
        BoundSpaceField::g_value(self, k, x)
    }

    fn h_values_into(&self, k: usize, x: &[f64], out: &mut [f64]) {
        BoundSpaceField::h_values_into(self, k, x, out)
    }

    fn h_grads_into(&self, k: usize, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        let t = self.weights.grid.t(k);
        out.fill(0.0);
        let mut buf = vec![0.0; d];
        for &(c, ref m, ref f) in &self.field.h {
            f.grad_into(x, &mut buf);
            let row = &mut out[c * d..(c + 1) * d];
            for (o, b) in row.iter_mut().zip(&buf) {
                *o += m.at(t) * b;
            }
        }
    }
}

/// Concatenated inner test functions of all layers of a measure field, with
/// the slice of the concatenated list each layer reads.
#[derive(Debug, Clone)]
pub struct EtaSet {
    pub shapes: Vec<TestFunction>,
    /// Per layer (canonical order f0, g, h): start..end in `shapes`.
    pub ranges: Vec<(usize, usize)>,
}

impl EtaSet {
    pub fn from_field(field: &MeasureField) -> Self {
        let mut shapes = Vec::new();
        let mut ranges = Vec::new();
        for f in field.shapes() {
            let start = shapes.len();
            shapes.extend(f.inner.iter().cloned());
            ranges.push((start, shapes.len()));
        }
        EtaSet { shapes, ranges }
    }

    pub fn n(&self) -> usize {
        self.shapes.len()
    }
}

/// Project a particle cloud onto the eta coordinates: Z^m_k = <mu_k, eta_m>,
/// with the cloud's jump times recorded as jumps of Z (delta computed from
/// per-particle left limits).
pub fn project_flow(flow: &EmpiricalFlow, etas: &EtaSet) -> ObservedPath {
    let n_pts = flow.grid.len();
    let n_eta = etas.n();
    let inv_n = 1.0 / flow.n() as f64;
    let mut values = Flat::zeros(n_pts, n_eta);
    for p in &flow.particles {
        for k in 0..n_pts {
            let x = p.obs.value(k);
            let row = values.row_mut(k);
            for (m, eta) in etas.shapes.iter().enumerate() {
                row[m] += inv_n * eta.value(x);
            }
        }
    }
    let jump_indices = flow.jump_indices();
    let mut idx = Vec::with_capacity(jump_indices.len());
    let mut delta = Flat::zeros(0, n_eta);
    let mut left = vec![0.0; flow.d()];
    for &j in &jump_indices {
        let mut dz = vec![0.0; n_eta];
        for p in &flow.particles {
            if p.obs.jumps.at(j).is_some() {
                let x = p.obs.value(j);
                p.obs.left_limit_into(j, &mut left);
                for (m, eta) in etas.shapes.iter().enumerate() {
                    dz[m] += inv_n * (eta.value(x) - eta.value(&left));
                }
            }
        }
        idx.push(j as u32);
        delta.push_row(&dz);
    }
    ObservedPath {
        grid: Arc::clone(&flow.grid),
        values,
        jumps: Jumps {
            idx,
            delta,
        },
    }
}

/// A bound measure field viewed as a space field of the projected coordinates
/// z: F(t, mu) = sum_l w_l(t) f_l(z[range_l]).
pub struct MeasureFieldOnZ<'a> {
    pub bound: &'a BoundMeasureField,
    pub etas: &'a EtaSet,
}

impl<'a> MeasureFieldOnZ<'a> {
    fn weights(&self, i: usize, left: bool) -> Vec<f64> {
        self.bound.layer_weights(i, left)
    }
}

impl<'a> PathField for MeasureFieldOnZ<'a> {
    fn d(&self) -> usize {
        self.etas.n()
    }

    fn dy(&self) -> usize {
        self.bound.field.required_driver_dim()
    }

    fn eval(&self, i: usize, left: bool, z: &[f64]) -> f64 {
        let w = self.weights(i, left);
        let shapes = self.bound.field.shapes();
        let mut s = 0.0;
        for (l, f) in shapes.iter().enumerate() {
            let (a, b) = self.etas.ranges[l];
            s += w[l] * f.outer.value(&z[a..b]);
        }
        s
    }

    fn grad_into(&self, i: usize, left: bool, z: &[f64], out: &mut [f64]) {
        let w = self.weights(i, left);
        let shapes = self.bound.field.shapes();
        out.fill(0.0);
        let mut buf = vec![0.0; self.etas.n()];
        for (l, f) in shapes.iter().enumerate() {
            let (a, b) = self.etas.ranges[l];
            f.outer.grad_into(&z[a..b], &mut buf[..b - a]);
            for (o, g) in out[a..b].iter_mut().zip(&buf[..b - a]) {
                *o += w[l] * g;
            }
        }
    }

    fn hess_into(&self, i: usize, left: bool, z: &[f64], out: &mut [f64]) {
        let n = self.etas.n();
        let w = self.weights(i, left);
        let shapes = self.bound.field.shapes();
        out.fill(0.0);
        let mut buf = vec![0.0; n * n];
        for (l, f) in shapes.iter().enumerate() {
            let (a, b) = self.etas.ranges[l];
            let nl = b - a;
            f.outer.hess_into(&z[a..b], &mut buf[..nl * nl]);
            for r in 0..nl {
                for c in 0..nl {
                    out[(a + r) * n + (a + c)] += w[l] * buf[r * nl + c];
                }
            }
        }
    }

    fn g_value(&self, k: usize, z: &[f64]) -> f64 {
        let t = self.bound.grid().t(k);
        let field = &self.bound.field;
        let mut s = 0.0;
        for (l, (m, f)) in field.g.iter().enumerate() {
            let (a, b) = self.etas.ranges[field.f0.len() + l];
            s += m.at(t) * f.outer.value(&z[a..b]);
        }
        s
    }

    fn h_values_into(&self, k: usize, z: &[f64], out: &mut [f64]) {
        let t = self.bound.grid().t(k);
        let field = &self.bound.field;
        out.fill(0.0);
        let base = field.f0.len() + field.g.len();
        for (l, (c, m, f)) in field.h.iter().enumerate() {
            let (a, b) = self.etas.ranges[base + l];
            out[*c] += m.at(t) * f.outer.value(&z[a..b]);
        }
    }

    fn h_grads_into(&self, k: usize, z: &[f64], out: &mut [f64]) {
        let n = self.etas.n();
        let t = self.bound.grid().t(k);
        let field = &self.bound.field;
        out.fill(0.0);
        let base = field.f0.len() + field.g.len();
        let mut buf = vec![0.0; n];
        for (l, &(c, ref m, ref f)) in field.h.iter().enumerate() {
            let (a, b) = self.etas.ranges[base + l];
            f.outer.grad_into(&z[a..b], &mut buf[..b - a]);
            let row = &mut out[c * n..(c + 1) * n];
            for (o, g) in row[a..b].iter_mut().zip(&buf[..b - a]) {
                *o += m.at(t) * g;
            }
        }
    }
}
