//! Cylindrical functionals on the space of probability measures, with exact
//! first- and second-order linear (flat) and intrinsic (Lions) derivatives,
//! plus finite-difference validators realized on the discrete lift.
//!
//! A cylindrical functional is F(mu) = f(<mu,g_1>, ..., <mu,g_n>) with smooth
//! inner test functions g_j and a smooth outer function f. On this class all
//! derivatives reduce to finite-dimensional chain rules:
//!   dF/dmu(mu,y)      = sum_j d_j f(Z) (g_j(y) - <mu,g_j>)   (mean-subtracted)
//!   d_mu F(mu,y)      = sum_j d_j f(Z) grad g_j(y)
//!   d_x d_mu F(mu,y)  = sum_j d_j f(Z) hess g_j(y)
//! and the second-order variants via the Hessian of f.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

use crate::error::{EngineError, Result};
use crate::measure::EmpiricalMeasure;

/// Smooth scalar function of one real variable with two exact derivatives.
#[derive(Debug, Clone)]
pub enum Univariate {
    /// c0 + c1 x + c2 x^2 + c3 x^3 + c4 x^4
    Poly([f64; 5]),
    /// amp * sin(a x + b)
    Sin { a: f64, b: f64, amp: f64 },
    /// amp * cos(a x + b)
    Cos { a: f64, b: f64, amp: f64 },
    /// amp * exp(-(x-center)^2 / (2 width^2))
    GaussBump { center: f64, width: f64, amp: f64 },
    /// amp * exp(1 - 1/(1-u^2)) for u=(x-center)/radius, |u|<1; 0 otherwise.
    CompactBump { center: f64, radius: f64, amp: f64 },
}

impl Univariate {
    pub fn v(&self, x: f64) -> f64 {
        match *self {
            Univariate::Poly(c) => (((c[4] * x + c[3]) * x + c[2]) * x + c[1]) * x + c[0],
            Univariate::Sin { a, b, amp } => amp * (a * x + b).sin(),
            Univariate::Cos { a, b, amp } => amp * (a * x + b).cos(),
            Univariate::GaussBump { center, width, amp } => {
                let u = (x - center) / width;
                amp * (-0.5 * u * u).exp()
            }
            Univariate::CompactBump { center, radius, amp } => {
                let u = (x - center) / radius;
                if u * u >= 1.0 {
                    0.0
                } else {
                    amp * (1.0 - 1.0 / (1.0 - u * u)).exp()
                }
            }
        }
    }

    pub fn d1(&self, x: f64) -> f64 {
        match *self {
            Univariate::Poly(c) => ((4.0 * c[4] * x + 3.0 * c[3]) * x + 2.0 * c[2]) * x + c[1],
            Univariate::Sin { a, b, amp } => amp * a * (a * x + b).cos(),
            Univariate::Cos { a, b, amp } => -amp * a * (a * x + b).sin(),
            Univariate::GaussBump { center, width, amp } => {
                let u = (x - center) / width;
                amp * (-0.5 * u * u).exp() * (-u / width)
            }
            Univariate::CompactBump { center, radius, amp } => {
                let u = (x - center) / radius;
                if u * u >= 1.0 {
                    0.0
                } else {
                    let s = 1.0 - u * u;
                    let g1 = -2.0 * u / (s * s);
                    amp * (1.0 - 1.0 / s).exp() * g1 / radius
                }
            }
        }
    }

    pub fn d2(&self, x: f64) -> f64 {
        match *self {
            Univariate::Poly(c) => (12.0 * c[4] * x + 6.0 * c[3]) * x + 2.0 * c[2],
            Univariate::Sin { a, b, amp } => -amp * a * a * (a * x + b).sin(),
            Univariate::Cos { a, b, amp } => -amp * a * a * (a * x + b).cos(),
            Univariate::GaussBump { center, width, amp } => {
                let u = (x - center) / width;
                amp * (-0.5 * u * u).exp() * (u * u - 1.0) / (width * width)
            }
            Univariate::CompactBump { center, radius, amp } => {
                let u = (x - center) / radius;
                if u * u >= 1.0 {
                    0.0
                } else {
                    let s = 1.0 - u * u;
                    let g1 = -2.0 * u / (s * s);
                    let g2 = -2.0 / (s * s) - 8.0 * u * u / (s * s * s);
                    amp * (1.0 - 1.0 / s).exp() * (g2 + g1 * g1) / (radius * radius)
                }
            }
        }
    }
}

/// Inner test function g: R^d -> R with exact gradient and Hessian.
#[derive(Clone)]
pub enum TfKind {
    /// Univariate shape applied to one coordinate.
    Uni { coord: usize, shape: Univariate },
    /// Arbitrary callbacks (used by tests and custom scenarios).
    Custom {
        value: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
        grad: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
        hess: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
    },
}

#[derive(Clone)]
pub struct TestFunction {
    pub name: String,
    pub kind: TfKind,
    /// Declared sup bound for |g|, |grad g|, |hess g| on the probe box.
    pub bound: f64,
    /// True when the function is only locally bounded (e.g. polynomials);
    /// admitted because desk-scale paths are effectively bounded.
    pub locally_valid: bool,
}

impl std::fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "TestFunction({})", self.name)
    }
}

impl TestFunction {
    pub fn uni(name: impl Into<String>, coord: usize, shape: Univariate, bound: f64, locally_valid: bool) -> Self {
        TestFunction {
            name: name.into(),
            kind: TfKind::Uni { coord, shape },
            bound,
            locally_valid,
        }
    }

    /// g(x) = x_0 (identity on the first coordinate).
    pub fn coord_1d() -> Self {
        Self::uni("x", 0, Univariate::Poly([0.0, 1.0, 0.0, 0.0, 0.0]), 10.0, true)
    }

    /// g(x) = x_0^2.
    pub fn square_1d() -> Self {
        Self::uni("x^2", 0, Univariate::Poly([0.0, 0.0, 1.0, 0.0, 0.0]), 100.0, true)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match &self.kind {
            TfKind::Uni { coord, shape } => shape.v(x[*coord]),
            TfKind::Custom { value, .. } => value(x),
        }
    }

    pub fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            TfKind::Uni { coord, shape } => {
                out.fill(0.0);
                out[*coord] = shape.d1(x[*coord]);
            }
            TfKind::Custom { grad, .. } => grad(x, out),
        }
    }

    /// Hessian into a d x d row-major buffer.
    pub fn hess_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            TfKind::Uni { coord, shape } => {
                let d = (out.len() as f64).sqrt() as usize;
                out.fill(0.0);
                out[coord * d + coord] = shape.d2(x[*coord]);
            }
            TfKind::Custom { hess, .. } => hess(x, out),
        }
    }

    /// Fast scalar paths for d = 1.
    #[inline]
    pub fn v1(&self, x: f64) -> f64 {
        match &self.kind {
            TfKind::Uni { shape, .. } => shape.v(x),
            TfKind::Custom { value, .. } => value(&[x]),
        }
    }

    #[inline]
    pub fn d1(&self, x: f64) -> f64 {
        match &self.kind {
            TfKind::Uni { shape, .. } => shape.d1(x),
            TfKind::Custom { grad, .. } => {
                let mut out = [0.0];
                grad(&[x], &mut out);
                out[0]
            }
        }
    }

    #[inline]
    pub fn d2(&self, x: f64) -> f64 {
        match &self.kind {
            TfKind::Uni { shape, .. } => shape.d2(x),
            TfKind::Custom { hess, .. } => {
                let mut out = [0.0];
                hess(&[x], &mut out);
                out[0]
            }
        }
    }

    /// Max over a probe lattice of |g|, |g'|, |g''| minus the declared bound
    /// (negative means the declared bound holds on the lattice). d=1 probe.
    pub fn probe_bound_defect(&self, lo: f64, hi: f64, steps: usize) -> f64 {
        let mut worst: f64 = f64::NEG_INFINITY;
        for i in 0..=steps {
            let x = lo + (hi - lo) * i as f64 / steps as f64;
            worst = worst.max(self.v1(x).abs()).max(self.d1(x).abs()).max(self.d2(x).abs());
        }
        worst - self.bound
    }

    /// Finite-difference directional-derivative defect at probe points.
    pub fn fd_defect(&self, xs: &[f64], h: f64) -> f64 {
        let mut worst: f64 = 0.0;
        for &x in xs {
            let fd = (self.v1(x + h) - self.v1(x - h)) / (2.0 * h);
            worst = worst.max((fd - self.d1(x)).abs());
        }
        worst
    }
}

/// Outer function f: R^n -> R given as a sum of explicit terms, so that the
/// gradient and Hessian are exact and the structure is serializable.
#[derive(Debug, Clone, PartialEq)]
pub enum OuterTerm {
    Const(f64),
    /// c * z_i
    Lin(usize, f64),
    /// c * z_i * z_j
    Quad(usize, usize, f64),
    /// c * z_i * z_j * z_k
    Cubic(usize, usize, usize, f64),
    /// amp * sin(a * z_i)
    Sin(usize, f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OuterFn {
    pub n: usize,
    pub terms: Vec<OuterTerm>,
}

impl OuterFn {
    pub fn new(n: usize, terms: Vec<OuterTerm>) -> Self {
        OuterFn { n, terms }
    }

    /// f(z) = z_0 (projection; linear functionals of mu).
    pub fn projection() -> Self {
        OuterFn::new(1, vec![OuterTerm::Lin(0, 1.0)])
    }

    /// f(z) = z_0^2.
    pub fn square() -> Self {
        OuterFn::new(1, vec![OuterTerm::Quad(0, 0, 1.0)])
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        let mut s = 0.0;
        for t in &self.terms {
            s += match *t {
                OuterTerm::Const(c) => c,
                OuterTerm::Lin(i, c) => c * z[i],
                OuterTerm::Quad(i, j, c) => c * z[i] * z[j],
                OuterTerm::Cubic(i, j, k, c) => c * z[i] * z[j] * z[k],
                OuterTerm::Sin(i, a, amp) => amp * (a * z[i]).sin(),
            };
        }
        s
    }

    pub fn grad_into(&self, z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for t in &self.terms {
            match *t {
                OuterTerm::Const(_) => {}
                OuterTerm::Lin(i, c) => out[i] += c,
                OuterTerm::Quad(i, j, c) => {
                    out[i] += c * z[j];
                    out[j] += c * z[i];
                }
                OuterTerm::Cubic(i, j, k, c) => {
                    out[i] += c * z[j] * z[k];
                    out[j] += c * z[i] * z[k];
                    out[k] += c * z[i] * z[j];
                }
                OuterTerm::Sin(i, a, amp) => out[i] += amp * a * (a * z[i]).cos(),
            }
        }
    }

    /// Hessian into an n x n row-major buffer.
    pub fn hess_into(&self, z: &[f64], out: &mut [f64]) {
        let n = self.n;
        out.fill(0.0);
        for t in &self.terms {
            match *t {
                OuterTerm::Const(_) | OuterTerm::Lin(..) => {}
                OuterTerm::Quad(i, j, c) => {
                    out[i * n + j] += c;
                    out[j * n + i] += c;
                }
                OuterTerm::Cubic(i, j, k, c) => {
                    out[i * n + j] += c * z[k];
                    out[j * n + i] += c * z[k];
                    out[i * n + k] += c * z[j];
                    out[k * n + i] += c * z[j];
                    out[j * n + k] += c * z[i];
                    out[k * n + j] += c * z[i];
                }
                OuterTerm::Sin(i, a, amp) => out[i * n + i] += -amp * a * a * (a * z[i]).sin(),
            }
        }
    }

    pub fn is_affine(&self) -> bool {
        self.terms
            .iter()
            .all(|t| matches!(t, OuterTerm::Const(_) | OuterTerm::Lin(..)))
    }
}

/// F(mu) = f(<mu,g_1>, ..., <mu,g_n>).
#[derive(Debug, Clone)]
pub struct CylindricalFn {
    pub outer: OuterFn,
    pub inner: Vec<TestFunction>,
}

impl CylindricalFn {
    pub fn new(outer: OuterFn, inner: Vec<TestFunction>) -> Result<Self> {
        if inner.is_empty() || outer.n != inner.len() {
            return Err(EngineError::Dimension(format!(
                "outer arity {} must match {} inner functions (>=1)",
                outer.n,
                inner.len()
            )));
        }
        Ok(CylindricalFn { outer, inner })
    }

    /// F(mu) = <mu, x>.
    pub fn mean_1d() -> Self {
        CylindricalFn::new(OuterFn::projection(), vec![TestFunction::coord_1d()]).unwrap()
    }

    /// F(mu) = <mu, x^2>.
    pub fn second_moment_1d() -> Self {
        CylindricalFn::new(OuterFn::projection(), vec![TestFunction::square_1d()]).unwrap()
    }

    /// F(mu) = (<mu, x>)^2.
    pub fn mean_squared_1d() -> Self {
        CylindricalFn::new(OuterFn::square(), vec![TestFunction::coord_1d()]).unwrap()
    }

    pub fn n(&self) -> usize {
        self.inner.len()
    }

    /// Z-vector of inner averages under mu.
    pub fn zs(&self, mu: &EmpiricalMeasure) -> Vec<f64> {
        self.inner
            .iter()
            .map(|g| mu.integrate(|x| g.value(x)))
            .collect()
    }

    pub fn eval_at_z(&self, z: &[f64]) -> f64 {
        self.outer.value(z)
    }

    pub fn eval(&self, mu: &EmpiricalMeasure) -> f64 {
        self.eval_at_z(&self.zs(mu))
    }

    /// Linear (flat) derivative dF/dmu(mu, y), mean-subtracted so that its
    /// mu-average vanishes.
    pub fn linear_derivative_at(&self, z: &[f64], y: &[f64]) -> f64 {
        let mut df = vec![0.0; self.n()];
        self.outer.grad_into(z, &mut df);
        self.inner
            .iter()
            .enumerate()
            .map(|(j, g)| df[j] * (g.value(y) - z[j]))
            .sum()
    }

    pub fn linear_derivative(&self, mu: &EmpiricalMeasure, y: &[f64]) -> f64 {
        self.linear_derivative_at(&self.zs(mu), y)
    }

    /// Lions derivative d_mu F(mu, y) in R^d.
    pub fn lions_derivative_at(&self, z: &[f64], y: &[f64], out: &mut [f64]) {
        let mut df = vec![0.0; self.n()];
        self.outer.grad_into(z, &mut df);
        out.fill(0.0);
        let mut gbuf = vec![0.0; y.len()];
        for (j, g) in self.inner.iter().enumerate() {
            g.grad_into(y, &mut gbuf);
            crate::linalg::axpy(df[j], &gbuf, out);
        }
    }

    pub fn lions_derivative(&self, mu: &EmpiricalMeasure, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        self.lions_derivative_at(&self.zs(mu), y, &mut out);
        out
    }

    /// d_x d_mu F(mu, y) in R^{d x d} (row-major into `out`).
    pub fn lions_space_derivative_at(&self, z: &[f64], y: &[f64], out: &mut [f64]) {
        let mut df = vec![0.0; self.n()];
        self.outer.grad_into(z, &mut df);
        out.fill(0.0);
        let mut hbuf = vec![0.0; y.len() * y.len()];
        for (j, g) in self.inner.iter().enumerate() {
            g.hess_into(y, &mut hbuf);
            crate::linalg::axpy(df[j], &hbuf, out);
        }
    }

    pub fn lions_space_derivative(&self, mu: &EmpiricalMeasure, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; y.len() * y.len()];
        self.lions_space_derivative_at(&self.zs(mu), y, &mut out);
        out
    }

    /// Second derivatives: the scalar d2F/dmu2(mu, y, y') (mean-subtracted in
    /// both slots) and the matrix d_mumu F(mu, y, y') in R^{d x d}.
    pub fn second_derivatives_at(&self, z: &[f64], y: &[f64], y2: &[f64]) -> (f64, Vec<f64>) {
        let n = self.n();
        let d = y.len();
        let mut hf = vec![0.0; n * n];
        self.outer.hess_into(z, &mut hf);
        let mut flat = 0.0;
        let mut matrix = vec![0.0; d * d];
        let mut ga = vec![0.0; d];
        let mut gb = vec![0.0; d];
        for j in 0..n {
            for k in 0..n {
                let c = hf[j * n + k];
                if c == 0.0 {
                    continue;
                }
                flat += c * (self.inner[j].value(y) - z[j]) * (self.inner[k].value(y2) - z[k]);
                self.inner[j].grad_into(y, &mut ga);
                self.inner[k].grad_into(y2, &mut gb);
                crate::linalg::add_outer(c, &ga, &gb, &mut matrix);
            }
        }
        (flat, matrix)
    }

    pub fn second_derivatives(
        &self,
        mu: &EmpiricalMeasure,
        y: &[f64],
        y2: &[f64],
    ) -> (f64, Vec<f64>) {
        self.second_derivatives_at(&self.zs(mu), y, y2)
    }
}

/// Validate the Lions derivative against the Frechet derivative of the lift,
/// realized on the discrete probability space of N equally likely atoms:
/// perturbing atom i in coordinate k by +/- h changes the lift in direction
/// (1/N) e_{i,k}, so the central difference times N/(2h) must match
/// d_mu F(mu, atom_i)_k. Returns the max discrepancy over atoms and coords.
pub fn fd_lift_check(f: &CylindricalFn, mu: &EmpiricalMeasure, h: f64) -> Result<f64> {
    if h <= 0.0 {
        return Err(EngineError::InvalidArgument("fd step must be positive".into()));
    }
    let n_atoms = mu.n_atoms() as f64;
    let d = mu.d();
    let z = f.zs(mu);
    let mut worst: f64 = 0.0;
    let mut grad = vec![0.0; d];
    for i in 0..mu.n_atoms() {
        let atom = mu.atom(i).to_vec();
        f.lions_derivative_at(&z, &atom, &mut grad);
        for k in 0..d {
            // Shift only the z-components; all other atoms cancel.
            let mut xp = atom.clone();
            let mut xm = atom.clone();
            xp[k] += h;
            xm[k] -= h;
            let mut zp = z.clone();
            let mut zm = z.clone();
            for (j, g) in f.inner.iter().enumerate() {
                let base = g.value(&atom);
                zp[j] += (g.value(&xp) - base) / n_atoms;
                zm[j] += (g.value(&xm) - base) / n_atoms;
            }
            let fd = (f.eval_at_z(&zp) - f.eval_at_z(&zm)) * n_atoms / (2.0 * h);
            worst = worst.max((fd - grad[k]).abs());
        }
    }
    Ok(worst)
}

/// Randomized constructors for property suites.
pub mod random {
    use super::*;

    pub fn random_shape(rng: &mut ChaCha8Rng, allow_unbounded: bool) -> Univariate {
        let upper = if allow_unbounded { 5 } else { 4 };
        match rng.gen_range(0..upper) {
            0 => Univariate::Sin {
                a: rng.gen_range(0.5..2.0),
                b: rng.gen_range(-1.0..1.0),
                amp: rng.gen_range(0.3..1.5),
            },
            1 => Univariate::Cos {
                a: rng.gen_range(0.5..2.0),
                b: rng.gen_range(-1.0..1.0),
                amp: rng.gen_range(0.3..1.5),
            },
            2 => Univariate::GaussBump {
                center: rng.gen_range(-1.0..1.0),
                width: rng.gen_range(0.5..2.0),
                amp: rng.gen_range(0.3..1.5),
            },
            3 => Univariate::CompactBump {
                center: rng.gen_range(-1.0..1.0),
                radius: rng.gen_range(1.0..3.0),
                amp: rng.gen_range(0.3..1.5),
            },
            _ => {
                let mut c = [0.0; 5];
                for v in c.iter_mut().take(rng.gen_range(2..=4) + 1) {
                    *v = rng.gen_range(-0.6..0.6);
                }
                Univariate::Poly(c)
            }
        }
    }

    pub fn random_test_function(rng: &mut ChaCha8Rng, d: usize, allow_unbounded: bool) -> TestFunction {
        let coord = rng.gen_range(0..d);
        let shape = random_shape(rng, allow_unbounded);
        let unbounded = matches!(shape, Univariate::Poly(_));
        TestFunction::uni("random", coord, shape, 50.0, unbounded)
    }

    pub fn random_outer(rng: &mut ChaCha8Rng, n: usize, smooth_nonlinear: bool) -> OuterFn {
        let mut terms = vec![OuterTerm::Const(rng.gen_range(-0.5..0.5))];
        for i in 0..n {
            terms.push(OuterTerm::Lin(i, rng.gen_range(-1.0..1.0)));
        }
        for _ in 0..rng.gen_range(1..=n) {
            let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
            terms.push(OuterTerm::Quad(i, j, rng.gen_range(-0.8..0.8)));
        }
        if smooth_nonlinear && rng.gen_bool(0.5) {
            let (i, j, k) = (
                rng.gen_range(0..n),
                rng.gen_range(0..n),
                rng.gen_range(0..n),
            );
            terms.push(OuterTerm::Cubic(i, j, k, rng.gen_range(-0.4..0.4)));
        }
        if smooth_nonlinear && rng.gen_bool(0.3) {
            terms.push(OuterTerm::Sin(
                rng.gen_range(0..n),
                rng.gen_range(0.5..1.5),
                rng.gen_range(-0.8..0.8),
            ));
        }
        OuterFn::new(n, terms)
    }

    pub fn random_cylindrical(rng: &mut ChaCha8Rng, d: usize, max_n: usize) -> CylindricalFn {
        let n = rng.gen_range(1..=max_n);
        let inner = (0..n).map(|_| random_test_function(rng, d, true)).collect();
        let outer = random_outer(rng, n, true);
        CylindricalFn::new(outer, inner).unwrap()
    }

    pub fn random_measure(rng: &mut ChaCha8Rng, d: usize, n_atoms: usize) -> EmpiricalMeasure {
        let pts = (0..n_atoms)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect())
            .collect();
        EmpiricalMeasure::uniform(pts).unwrap()
    }
}
