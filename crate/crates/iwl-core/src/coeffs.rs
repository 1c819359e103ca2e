//! Semimartingale generators: drift, diffusion and jump maps, evaluated
//! through non-allocating callbacks (outputs written into caller buffers).

use std::sync::Arc;

use crate::drivers::JumpSpec;
use crate::error::{EngineError, Result};

/// b(t, x) -> R^d, written into `out` (length d).
pub type DriftFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// sigma(t, x) -> R^{d x d_W}, row-major into `out`.
pub type DiffusionFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// beta(t, e, x_left) -> jump increment in R^d, written into `out`.
pub type JumpMapFn = Arc<dyn Fn(f64, f64, &[f64], &mut [f64]) + Send + Sync>;

/// One Poisson jump stream: intensity plus the mark-to-increment map.
#[derive(Clone)]
pub struct JumpPart {
    pub spec: JumpSpec,
    pub map: JumpMapFn,
}

impl JumpPart {
    /// Jump increment beta(e) = scale * e on the first coordinate.
    pub fn scalar_mark(spec: JumpSpec, scale: f64) -> Self {
        JumpPart {
            spec,
            map: Arc::new(move |_t, e, _x, out| {
                out.fill(0.0);
                out[0] = scale * e;
            }),
        }
    }
}

impl std::fmt::Debug for JumpPart {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "JumpPart(rate={})", self.spec.rate)
    }
}

/// Generator record for Euler simulation and generator-exact covariation.
///
/// For conditional scenarios, the first `d_w_common` Brownian coordinates and
/// the first `common_jump_streams` jump streams are driven by the common
/// (sub-filtration-measurable) noise; the remainder are idiosyncratic.
#[derive(Clone)]
pub struct Coeffs {
    pub d: usize,
    pub d_w: usize,
    pub drift: DriftFn,
    pub diffusion: DiffusionFn,
    pub jumps: Vec<JumpPart>,
    pub d_w_common: usize,
    pub common_jump_streams: usize,
}

impl std::fmt::Debug for Coeffs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Coeffs(d={}, d_w={}, jumps={}, d_w_common={})",
            self.d,
            self.d_w,
            self.jumps.len(),
            self.d_w_common
        )
    }
}

impl Coeffs {
    pub fn new(d: usize, d_w: usize, drift: DriftFn, diffusion: DiffusionFn) -> Self {
        Coeffs {
            d,
            d_w,
            drift,
            diffusion,
            jumps: Vec::new(),
            d_w_common: 0,
            common_jump_streams: 0,
        }
    }

    pub fn with_jumps(mut self, jumps: Vec<JumpPart>) -> Self {
        self.jumps = jumps;
        self
    }

    pub fn with_common_split(mut self, d_w_common: usize, common_jump_streams: usize) -> Result<Self> {
        if d_w_common > self.d_w || common_jump_streams > self.jumps.len() {
            return Err(EngineError::Dimension(
                "common split exceeds declared driver dimensions".into(),
            ));
        }
        self.d_w_common = d_w_common;
        self.common_jump_streams = common_jump_streams;
        Ok(self)
    }

    /// Scalar dynamics dX = b dt + sigma dW (constant coefficients).
    pub fn additive_1d(b: f64, sigma: f64) -> Self {
        Coeffs::new(
            1,
            1,
            Arc::new(move |_t, _x, out| out[0] = b),
            Arc::new(move |_t, _x, out| out[0] = sigma),
        )
    }

    /// Scalar dynamics with time-dependent drift b(t).
    pub fn time_drift_1d(b: impl Fn(f64) -> f64 + Send + Sync + 'static, sigma: f64) -> Self {
        Coeffs::new(
            1,
            1,
            Arc::new(move |t, _x, out| out[0] = b(t)),
            Arc::new(move |_t, _x, out| out[0] = sigma),
        )
    }
}
