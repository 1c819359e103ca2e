//! Declarative scenario configuration: parse a TOML config, resolve catalog
//! templates into coefficients and fields, validate formula/mode
//! compatibility, and execute the requested verification.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calculus::{random, CylindricalFn, TestFunction, Univariate};
use crate::calculus::fd_lift_check;
use crate::coeffs::{Coeffs, JumpPart};
use crate::drivers::{sample_drivers, JumpSpec, MarkDist};
use crate::error::{EngineError, Result};
use crate::fields::{
    leibniz_check, MarkWeight, MeasureField, Modulation, PoissonField, ProductLayer, SpaceField,
    SpaceMeasureField,
};
use crate::grid::TimeGrid;
use crate::linalg::Flat;
use crate::path::{simulate_semimartingale, CovMode, SimOptions};
use crate::rng::{derive, tag};
use crate::verifier::conditional::{verify_conditional, ConditionalScenario, ConditionalSizes};
use crate::verifier::full::{verify_full_measure, FullLawScenario, FullMode, FullSizes};
use crate::verifier::ito::{verify_ito_pathwise, verify_ito_wentzell_pathwise};
use crate::verifier::poisson::{
    verify_poisson_conditional, verify_poisson_full, ConditionalPoissonScenario, PoissonMode,
    PoissonScenario,
};
use crate::verifier::report::{TermBreakdown, TermCurves, VerificationReport};
use crate::verifier::spacemeasure::{
    verify_conditional_space_measure, verify_time_space_measure, ChainForm,
    ConditionalSpaceMeasureScenario, SpaceMeasureScenario,
};

fn default_one() -> f64 {
    1.0
}
fn default_particles() -> usize {
    100
}
fn default_worlds() -> usize {
    10
}
fn default_t_end() -> f64 {
    1.0
}

/// Complete declarative description of one verification run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// One of: thm1, thm2, thm3, thm4, coro1, coro1-alt, coro2, coro3,
    /// coro4, leibniz, lift-check.
    pub formula: String,
    /// Evaluation mode; defaults per formula (see [`Formula::default_mode`]).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    pub seed: u64,
    /// Bracket evaluation: "realized" (default) or "generator".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov: Option<String>,
    /// Finite-N correction terms in pathwise-empirical mode (default true).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrections: Option<bool>,
    /// Declared time-continuity of the true law (default true).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub law_continuous: Option<bool>,
    pub dynamics: DynamicsSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<FieldSpec>,
    /// Intensity of the field's own Poisson random measure (coro3 only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_jump: Option<FieldJumpSpec>,
    pub sizes: SizesSpec,
    #[serde(default)]
    pub thresholds: ThresholdSpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

/// State dynamics built from a coefficient template.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSpec {
    /// One of: bm, drifted-bm, compound-poisson, jump-diffusion.
    pub template: String,
    #[serde(default)]
    pub drift: f64,
    #[serde(default = "default_one")]
    pub sigma: f64,
    #[serde(default)]
    pub x0: f64,
    #[serde(default)]
    pub jump_rate: f64,
    #[serde(default = "default_one")]
    pub jump_scale: f64,
    /// Finite mark distribution as [mark, probability] pairs; default unit marks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jump_marks: Option<Vec<(f64, f64)>>,
    /// Leading Brownian coordinates treated as common noise.
    #[serde(default)]
    pub common_brownian: usize,
    /// Leading jump streams treated as common noise.
    #[serde(default)]
    pub common_jump_streams: usize,
}

/// Field layers by catalog template. `phi` names a space test function,
/// `psi` a measure functional; which slots are required depends on the
/// formula (space forms need phi, measure forms need psi, product forms both).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub f0: Vec<LayerSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub g: Vec<LayerSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub h: Vec<LayerSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub j: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub phi_params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub psi_params: Vec<f64>,
    #[serde(default = "default_one")]
    pub weight: f64,
    /// Driver coordinate for h-layers.
    #[serde(default)]
    pub coord: usize,
    /// J-layers: mark weight w(t, e) = weight * e^mark_power.
    #[serde(default)]
    pub mark_power: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldJumpSpec {
    pub rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marks: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizesSpec {
    pub n_steps: usize,
    #[serde(default = "default_particles")]
    pub n_particles: usize,
    #[serde(default = "default_worlds")]
    pub n_worlds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_tilde: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_inner: Option<usize>,
    #[serde(default)]
    pub t_start: f64,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSpec {
    /// Override of the residual acceptance threshold; default is
    /// max(3*SE, 0.5*sqrt(dt)*scale) (see [`default_threshold`]).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// One of: dt, n_particles, n_worlds.
    pub parameter: String,
    /// Levels of the swept parameter; for "dt" these are n_steps values.
    pub levels: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_max: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Formula {
    Thm1,
    Thm2,
    Thm3,
    Thm4,
    Coro1,
    Coro1Alt,
    Coro2,
    Coro3,
    Coro4,
    Leibniz,
    LiftCheck,
}

impl Formula {
    pub fn parse(token: &str) -> Result<Formula> {
        Ok(match token {
            "thm1" => Formula::Thm1,
            "thm2" => Formula::Thm2,
            "thm3" => Formula::Thm3,
            "thm4" => Formula::Thm4,
            "coro1" => Formula::Coro1,
            "coro1-alt" => Formula::Coro1Alt,
            "coro2" => Formula::Coro2,
            "coro3" => Formula::Coro3,
            "coro4" => Formula::Coro4,
            "leibniz" => Formula::Leibniz,
            "lift-check" => Formula::LiftCheck,
            other => {
                return Err(EngineError::Config(format!(
                    "unknown formula '{other}'; expected one of thm1|thm2|thm3|thm4|coro1|coro1-alt|coro2|coro3|coro4|leibniz|lift-check"
                )))
            }
        })
    }

    pub fn token(&self) -> &'static str {
        match self {
            Formula::Thm1 => "thm1",
            Formula::Thm2 => "thm2",
            Formula::Thm3 => "thm3",
            Formula::Thm4 => "thm4",
            Formula::Coro1 => "coro1",
            Formula::Coro1Alt => "coro1-alt",
            Formula::Coro2 => "coro2",
            Formula::Coro3 => "coro3",
            Formula::Coro4 => "coro4",
            Formula::Leibniz => "leibniz",
            Formula::LiftCheck => "lift-check",
        }
    }

    pub fn default_mode(&self) -> &'static str {
        match self {
            Formula::Thm1 | Formula::Thm2 => "pathwise",
            Formula::Thm3 | Formula::Coro1 | Formula::Coro1Alt => "pathwise-empirical",
            Formula::Thm4 | Formula::Coro2 | Formula::Coro4 => "conditional",
            Formula::Coro3 => "exact-law",
            Formula::Leibniz | Formula::LiftCheck => "fd",
        }
    }
}

/// Parse a config from TOML text with field-level diagnostics.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig =
        toml::from_str(text).map_err(|e| EngineError::Config(e.to_string()))?;
    validate_config(&cfg)?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EngineError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

fn validate_config(cfg: &ScenarioConfig) -> Result<()> {
    let formula = Formula::parse(&cfg.formula)?;
    let mode = cfg.mode.as_deref().unwrap_or(formula.default_mode());
    let allowed: &[&str] = match formula {
        Formula::Thm1 | Formula::Thm2 => &["pathwise"],
        Formula::Thm3 | Formula::Coro1 | Formula::Coro1Alt => &["pathwise-empirical", "mc-law"],
        Formula::Thm4 | Formula::Coro2 | Formula::Coro4 => &["conditional"],
        Formula::Coro3 => &["exact-law", "empirical"],
        Formula::Leibniz | Formula::LiftCheck => &["fd"],
    };
    if !allowed.contains(&mode) {
        return Err(EngineError::Config(format!(
            "mode '{mode}' is not valid for formula '{}'; allowed: {}",
            cfg.formula,
            allowed.join("|")
        )));
    }
    if let Some(cov) = &cfg.cov {
        if cov != "realized" && cov != "generator" {
            return Err(EngineError::Config(format!(
                "cov '{cov}' must be 'realized' or 'generator'"
            )));
        }
    }
    if matches!(formula, Formula::Thm4 | Formula::Coro2 | Formula::Coro4)
        && cfg.dynamics.common_brownian == 0
        && cfg.dynamics.common_jump_streams == 0
    {
        return Err(EngineError::Config(format!(
            "formula '{}' needs common noise: set dynamics.common_brownian and/or dynamics.common_jump_streams",
            cfg.formula
        )));
    }
    if cfg.sizes.n_steps == 0 {
        return Err(EngineError::Config("sizes.n_steps must be positive".into()));
    }
    if !(cfg.sizes.t_end > cfg.sizes.t_start) {
        return Err(EngineError::Config(
            "sizes.t_end must exceed sizes.t_start".into(),
        ));
    }
    if let Some(sweep) = &cfg.sweep {
        if !["dt", "n_particles", "n_worlds"].contains(&sweep.parameter.as_str()) {
            return Err(EngineError::Config(format!(
                "sweep.parameter '{}' must be dt|n_particles|n_worlds",
                sweep.parameter
            )));
        }
        if sweep.levels.len() < 3 {
            return Err(EngineError::Config(
                "sweep.levels needs at least 3 levels".into(),
            ));
        }
    }
    if !matches!(formula, Formula::Leibniz | Formula::LiftCheck) && cfg.field.is_none() {
        return Err(EngineError::Config(format!(
            "formula '{}' needs a [field] table",
            cfg.formula
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Catalog
// ---------------------------------------------------------------------------

/// Resolve a space test-function template.
pub fn test_function(name: &str, params: &[f64]) -> Result<TestFunction> {
    let p = |i: usize, d: f64| params.get(i).copied().unwrap_or(d);
    Ok(match name {
        "coord" => TestFunction::coord_1d(),
        "square" => TestFunction::square_1d(),
        "cube" => TestFunction::uni(
            "x^3",
            0,
            Univariate::Poly([0.0, 0.0, 0.0, 1.0, 0.0]),
            1e6,
            true,
        ),
        "one" => TestFunction::uni("1", 0, Univariate::Poly([1.0, 0.0, 0.0, 0.0, 0.0]), 2.0, false),
        "polynomial" => {
            let mut c = [0.0; 5];
            for (i, v) in c.iter_mut().enumerate() {
                *v = p(i, 0.0);
            }
            TestFunction::uni("poly", 0, Univariate::Poly(c), 1e6, true)
        }
        "sin" => TestFunction::uni(
            "sin",
            0,
            Univariate::Sin {
                a: p(0, 1.0),
                b: p(1, 0.0),
                amp: p(2, 1.0),
            },
            4.0,
            false,
        ),
        "bump" => TestFunction::uni(
            "bump",
            0,
            Univariate::GaussBump {
                center: p(0, 0.0),
                width: p(1, 1.0),
                amp: p(2, 1.0),
            },
            4.0,
            false,
        ),
        other => {
            return Err(EngineError::Config(format!(
                "unknown test function template '{other}'"
            )))
        }
    })
}

/// Resolve a measure-functional template.
pub fn measure_functional(name: &str, params: &[f64]) -> Result<CylindricalFn> {
    Ok(match name {
        "mean" => CylindricalFn::mean_1d(),
        "second-moment" => CylindricalFn::second_moment_1d(),
        "mean-squared" => CylindricalFn::mean_squared_1d(),
        "moment" => {
            // <mu, polynomial(params)>
            let inner = test_function("polynomial", params)?;
            CylindricalFn::new(crate::calculus::OuterFn::projection(), vec![inner])?
        }
        other => {
            return Err(EngineError::Config(format!(
                "unknown measure functional template '{other}'"
            )))
        }
    })
}

/// Stable-sorted catalog listing with parameter schemas.
pub fn catalog_text() -> String {
    let mut sections: BTreeMap<&str, Vec<(&str, &str)>> = BTreeMap::new();
    sections.insert(
        "dynamics templates",
        vec![
            ("bm", "sigma (default 1), x0"),
            ("compound-poisson", "jump_rate, jump_scale, jump_marks ([[mark, prob]], default unit), x0"),
            ("drifted-bm", "drift, sigma, x0"),
            (
                "jump-diffusion",
                "drift, sigma, jump_rate, jump_scale, jump_marks, x0; common_brownian / common_jump_streams split",
            ),
        ],
    );
    sections.insert(
        "measure functionals (psi)",
        vec![
            ("mean", "<mu, x>"),
            ("mean-squared", "<mu, x>^2"),
            ("moment", "<mu, c0 + c1 x + ... + c4 x^4>; psi_params = [c0..c4]"),
            ("second-moment", "<mu, x^2>"),
        ],
    );
    sections.insert(
        "test functions (phi)",
        vec![
            ("bump", "phi_params = [center, width, amp]"),
            ("coord", "x"),
            ("cube", "x^3"),
            ("one", "constant 1"),
            ("polynomial", "phi_params = [c0..c4]"),
            ("sin", "phi_params = [a, b, amp]: amp*sin(a x + b)"),
            ("square", "x^2"),
        ],
    );
    let mut out = String::new();
    for (title, entries) in &sections {
        out.push_str(title);
        out.push('\n');
        for (name, schema) in entries {
            out.push_str(&format!("  {name}: {schema}\n"));
        }
    }
    out.push_str("formulas\n");
    for f in [
        "coro1", "coro1-alt", "coro2", "coro3", "coro4", "leibniz", "lift-check", "thm1", "thm2",
        "thm3", "thm4",
    ] {
        out.push_str(&format!("  {f}\n"));
    }
    out
}

// ---------------------------------------------------------------------------
// Resolution of config into engine inputs
// ---------------------------------------------------------------------------

fn build_coeffs(dy: &DynamicsSpec) -> Result<Coeffs> {
    let jumpy = match dy.template.as_str() {
        "bm" => false,
        "drifted-bm" => false,
        "compound-poisson" => true,
        "jump-diffusion" => true,
        other => {
            return Err(EngineError::Config(format!(
                "unknown dynamics template '{other}'"
            )))
        }
    };
    let (drift, sigma) = match dy.template.as_str() {
        "bm" => (0.0, dy.sigma),
        "compound-poisson" => (0.0, 0.0),
        _ => (dy.drift, dy.sigma),
    };
    let mut coeffs = Coeffs::additive_1d(drift, sigma);
    if jumpy {
        if dy.jump_rate < 0.0 || !dy.jump_rate.is_finite() {
            return Err(EngineError::Config(
                "dynamics.jump_rate must be finite and nonnegative".into(),
            ));
        }
        let marks = match &dy.jump_marks {
            Some(pairs) => MarkDist::Finite(pairs.clone()),
            None => MarkDist::unit(),
        };
        let spec = JumpSpec::new(dy.jump_rate, marks)
            .map_err(|e| EngineError::Config(format!("dynamics jump spec: {e}")))?;
        coeffs = coeffs.with_jumps(vec![JumpPart::scalar_mark(spec, dy.jump_scale)]);
    }
    if dy.common_brownian > 0 || dy.common_jump_streams > 0 {
        coeffs = coeffs
            .with_common_split(dy.common_brownian, dy.common_jump_streams)
            .map_err(|e| EngineError::Config(format!("dynamics common split: {e}")))?;
    }
    Ok(coeffs)
}

fn layer_psi(layer: &LayerSpec, slot: &str, idx: usize) -> Result<CylindricalFn> {
    let name = layer.psi.as_deref().ok_or_else(|| {
        EngineError::Config(format!("field.{slot}[{idx}] needs a psi template"))
    })?;
    measure_functional(name, &layer.psi_params)
}

fn layer_phi(layer: &LayerSpec, slot: &str, idx: usize) -> Result<TestFunction> {
    let name = layer.phi.as_deref().ok_or_else(|| {
        EngineError::Config(format!("field.{slot}[{idx}] needs a phi template"))
    })?;
    test_function(name, &layer.phi_params)
}

fn check_h_coord(layer: &LayerSpec, idx: usize) -> Result<()> {
    if layer.coord != 0 {
        return Err(EngineError::Config(format!(
            "field.h[{idx}].coord = {} is unsupported: config scenarios use a scalar field driver",
            layer.coord
        )));
    }
    Ok(())
}

fn build_measure_field(spec: &FieldSpec) -> Result<MeasureField> {
    let mut f0 = Vec::new();
    for (i, l) in spec.f0.iter().enumerate() {
        f0.push((l.weight, layer_psi(l, "f0", i)?));
    }
    let mut g = Vec::new();
    for (i, l) in spec.g.iter().enumerate() {
        g.push((Modulation::Const(l.weight), layer_psi(l, "g", i)?));
    }
    let mut h = Vec::new();
    for (i, l) in spec.h.iter().enumerate() {
        check_h_coord(l, i)?;
        h.push((l.coord, Modulation::Const(l.weight), layer_psi(l, "h", i)?));
    }
    let field = MeasureField { f0, g, h };
    if field.n_layers() == 0 {
        return Err(EngineError::Config("field has no layers".into()));
    }
    Ok(field)
}

fn build_space_field(spec: &FieldSpec) -> Result<SpaceField> {
    let mut f0 = Vec::new();
    for (i, l) in spec.f0.iter().enumerate() {
        f0.push((l.weight, layer_phi(l, "f0", i)?));
    }
    let mut g = Vec::new();
    for (i, l) in spec.g.iter().enumerate() {
        g.push((Modulation::Const(l.weight), layer_phi(l, "g", i)?));
    }
    let mut h = Vec::new();
    for (i, l) in spec.h.iter().enumerate() {
        check_h_coord(l, i)?;
        h.push((l.coord, Modulation::Const(l.weight), layer_phi(l, "h", i)?));
    }
    let field = SpaceField { f0, g, h };
    if field.n_layers() == 0 {
        return Err(EngineError::Config("field has no layers".into()));
    }
    Ok(field)
}

fn build_product_field(spec: &FieldSpec) -> Result<SpaceMeasureField> {
    let product = |l: &LayerSpec, slot: &str, i: usize| -> Result<ProductLayer> {
        Ok(ProductLayer {
            phi: layer_phi(l, slot, i)?,
            psi: layer_psi(l, slot, i)?,
        })
    };
    let mut f0 = Vec::new();
    for (i, l) in spec.f0.iter().enumerate() {
        f0.push((l.weight, product(l, "f0", i)?));
    }
    let mut g = Vec::new();
    for (i, l) in spec.g.iter().enumerate() {
        g.push((Modulation::Const(l.weight), product(l, "g", i)?));
    }
    let mut h = Vec::new();
    for (i, l) in spec.h.iter().enumerate() {
        check_h_coord(l, i)?;
        h.push((l.coord, Modulation::Const(l.weight), product(l, "h", i)?));
    }
    let field = SpaceMeasureField { f0, g, h };
    if field.n_layers() == 0 {
        return Err(EngineError::Config("field has no layers".into()));
    }
    Ok(field)
}

fn build_poisson_field(spec: &FieldSpec) -> Result<PoissonField> {
    let base = build_measure_field(&FieldSpec {
        f0: spec.f0.clone(),
        g: spec.g.clone(),
        h: spec.h.clone(),
        j: Vec::new(),
    })?;
    let mut j: Vec<(MarkWeight, CylindricalFn)> = Vec::new();
    for (i, l) in spec.j.iter().enumerate() {
        let shape = layer_psi(l, "j", i)?;
        let w = l.weight;
        let p = l.mark_power as i32;
        j.push((
            Arc::new(move |_t: f64, e: f64| w * e.powi(p)) as MarkWeight,
            shape,
        ));
    }
    Ok(PoissonField { base, j })
}

/// Scalar-driver Y dynamics used whenever the configured field has h-layers.
fn y_dynamics(field: &FieldSpec) -> Option<Coeffs> {
    if field.h.is_empty() {
        None
    } else {
        Some(Coeffs::additive_1d(0.0, 1.0))
    }
}

fn parse_cov(cfg: &ScenarioConfig) -> CovMode {
    match cfg.cov.as_deref() {
        Some("generator") => CovMode::GeneratorExact,
        _ => CovMode::Realized,
    }
}

fn full_mode(cfg: &ScenarioConfig, mode: &str) -> FullMode {
    match mode {
        "mc-law" => FullMode::McLaw {
            n_tilde: cfg.sizes.n_tilde.unwrap_or(cfg.sizes.n_particles),
        },
        _ => FullMode::EmpiricalProjection {
            corrections: cfg.corrections.unwrap_or(true),
        },
    }
}

fn full_sizes(cfg: &ScenarioConfig) -> FullSizes {
    FullSizes {
        n_steps: cfg.sizes.n_steps,
        n_particles: cfg.sizes.n_particles,
        n_worlds: cfg.sizes.n_worlds,
    }
}

fn conditional_sizes(cfg: &ScenarioConfig) -> ConditionalSizes {
    ConditionalSizes {
        n_steps: cfg.sizes.n_steps,
        n_inner: cfg.sizes.n_inner.unwrap_or(cfg.sizes.n_particles),
        n_worlds: cfg.sizes.n_worlds,
    }
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

/// Result of executing one config: the aggregated report (with the threshold
/// applied) plus per-term cumulative curves when the formula produces them.
pub struct RunOutcome {
    pub report: VerificationReport,
    pub curves: Option<TermCurves>,
    /// Threshold actually applied (config override or the default policy).
    pub threshold: f64,
}

/// Default acceptance threshold: max(3*SE, 0.5*sqrt(dt)*scale) where scale is
/// the mean |LHS| magnitude (floored at 1). All identities are exact, so all
/// slack is discretization (sqrt(dt) pathwise noise) or CLT noise (3*SE).
pub fn default_threshold(report: &VerificationReport, dt: f64) -> f64 {
    let scale = report
        .breakdowns
        .iter()
        .map(|b| b.lhs.abs())
        .sum::<f64>()
        .max(1.0)
        / report.breakdowns.len().max(1) as f64;
    let scale = scale.max(1.0);
    (3.0 * report.se).max(0.5 * dt.sqrt() * scale)
}

/// Execute a validated config and return the thresholded report.
pub fn execute(cfg: &ScenarioConfig) -> Result<RunOutcome> {
    validate_config(cfg)?;
    let formula = Formula::parse(&cfg.formula)?;
    let mode = cfg
        .mode
        .clone()
        .unwrap_or_else(|| formula.default_mode().to_string());
    let cov = parse_cov(cfg);
    let coeffs = build_coeffs(&cfg.dynamics)?;
    let x0 = vec![cfg.dynamics.x0];
    let t_start = cfg.sizes.t_start;
    let t_end = cfg.sizes.t_end;
    let dt = (t_end - t_start) / cfg.sizes.n_steps as f64;

    let (report, curves) = match formula {
        Formula::Thm1 => {
            let field = cfg.field.as_ref().expect("validated");
            let g = layer_phi(
                field.f0.first().ok_or_else(|| {
                    EngineError::Config("thm1 needs field.f0[0].phi as the test function".into())
                })?,
                "f0",
                0,
            )?;
            let mut breakdowns = Vec::new();
            let mut first_curves = None;
            for m in 0..cfg.sizes.n_worlds.max(1) {
                let path = simulate_single_path(&coeffs, &x0, cfg, m)?;
                let t_idx = path.grid.len() - 1;
                let (b, c) = verify_ito_pathwise(&g, &path, 0, t_idx)?;
                if first_curves.is_none() {
                    first_curves = Some(c);
                }
                breakdowns.push(b);
            }
            (
                VerificationReport::from_breakdowns("thm1", &mode, cfg.seed, breakdowns),
                first_curves,
            )
        }
        Formula::Thm2 => {
            let field = Arc::new(build_space_field(cfg.field.as_ref().expect("validated"))?);
            let mut breakdowns = Vec::new();
            let mut first_curves = None;
            for m in 0..cfg.sizes.n_worlds.max(1) {
                // The field driver is the state path itself.
                let path = simulate_single_path(&coeffs, &x0, cfg, m)?;
                let bound = field.bind(&path)?;
                let t_idx = path.grid.len() - 1;
                let (b, c) = verify_ito_wentzell_pathwise(&bound, &path, &path, 0, t_idx)?;
                if first_curves.is_none() {
                    first_curves = Some(c);
                }
                breakdowns.push(b);
            }
            (
                VerificationReport::from_breakdowns("thm2", &mode, cfg.seed, breakdowns),
                first_curves,
            )
        }
        Formula::Thm3 => {
            let fspec = cfg.field.as_ref().expect("validated");
            let sc = FullLawScenario {
                name: cfg.name.clone(),
                coeffs,
                x0,
                field: Arc::new(build_measure_field(fspec)?),
                y_coeffs: y_dynamics(fspec),
                y0: if fspec.h.is_empty() { vec![] } else { vec![0.0] },
                law_continuous: cfg.law_continuous.unwrap_or(true),
                t_start,
                t_end,
            };
            let (r, c) =
                verify_full_measure(&sc, full_mode(cfg, &mode), full_sizes(cfg), cov, cfg.seed)?;
            (r, Some(c))
        }
        Formula::Thm4 => {
            let fspec = cfg.field.as_ref().expect("validated");
            let sc = ConditionalScenario {
                name: cfg.name.clone(),
                coeffs,
                x0,
                field: Arc::new(build_measure_field(fspec)?),
                y_coeffs: if fspec.h.is_empty() {
                    None
                } else {
                    if cfg.dynamics.common_brownian != 1 {
                        return Err(EngineError::Config(
                            "thm4 with h-layers needs dynamics.common_brownian = 1 (scalar common driver)"
                                .into(),
                        ));
                    }
                    Some(Coeffs::additive_1d(0.0, 1.0))
                },
                y0: if fspec.h.is_empty() { vec![] } else { vec![0.0] },
                t_start,
                t_end,
            };
            let (r, c) = verify_conditional(&sc, conditional_sizes(cfg), cov, cfg.seed)?;
            (r, Some(c))
        }
        Formula::Coro1 | Formula::Coro1Alt => {
            let fspec = cfg.field.as_ref().expect("validated");
            let sc = SpaceMeasureScenario {
                name: cfg.name.clone(),
                coeffs,
                x0,
                field: Arc::new(build_product_field(fspec)?),
                y_coeffs: y_dynamics(fspec),
                y0: if fspec.h.is_empty() { vec![] } else { vec![0.0] },
                law_continuous: cfg.law_continuous.unwrap_or(true),
                t_start,
                t_end,
            };
            let form = if formula == Formula::Coro1 {
                ChainForm::Coro1
            } else {
                ChainForm::Coro1Alt
            };
            let (r, c) = verify_time_space_measure(
                &sc,
                form,
                full_mode(cfg, &mode),
                full_sizes(cfg),
                cov,
                cfg.seed,
            )?;
            (r, Some(c))
        }
        Formula::Coro2 => {
            let fspec = cfg.field.as_ref().expect("validated");
            let sc = ConditionalSpaceMeasureScenario {
                name: cfg.name.clone(),
                coeffs,
                x0,
                field: Arc::new(build_product_field(fspec)?),
                y_coeffs: if fspec.h.is_empty() {
                    None
                } else {
                    if cfg.dynamics.common_brownian != 1 {
                        return Err(EngineError::Config(
                            "coro2 with h-layers needs dynamics.common_brownian = 1 (scalar common driver)"
                                .into(),
                        ));
                    }
                    Some(Coeffs::additive_1d(0.0, 1.0))
                },
                y0: if fspec.h.is_empty() { vec![] } else { vec![0.0] },
                t_start,
                t_end,
            };
            let (r, c) =
                verify_conditional_space_measure(&sc, conditional_sizes(cfg), cov, cfg.seed)?;
            (r, Some(c))
        }
        Formula::Coro3 => {
            let fspec = cfg.field.as_ref().expect("validated");
            let field_jump = match &cfg.field_jump {
                Some(fj) => JumpSpec::new(
                    fj.rate,
                    match &fj.marks {
                        Some(pairs) => MarkDist::Finite(pairs.clone()),
                        None => MarkDist::unit(),
                    },
                )
                .map_err(|e| EngineError::Config(format!("field_jump: {e}")))?,
                None => JumpSpec::unit_jumps(0.0).expect("zero rate is valid"),
            };
            let sc = PoissonScenario {
                name: cfg.name.clone(),
                coeffs,
                x0,
                field: Arc::new(build_poisson_field(fspec)?),
                field_jump,
                t_start,
                t_end,
            };
            let pmode = match mode.as_str() {
                "empirical" => PoissonMode::Empirical,
                _ => PoissonMode::ExactLaw {
                    n_tilde: cfg.sizes.n_tilde.unwrap_or(cfg.sizes.n_particles),
                },
            };
            let (r, c) = verify_poisson_full(&sc, pmode, full_sizes(cfg), cfg.seed)?;
            (r, Some(c))
        }
        Formula::Coro4 => {
            let fspec = cfg.field.as_ref().expect("validated");
            let sc = ConditionalPoissonScenario {
                name: cfg.name.clone(),
                coeffs,
                x0,
                field: Arc::new(build_poisson_field(fspec)?),
                t_start,
                t_end,
            };
            let (r, c) =
                verify_poisson_conditional(&sc, conditional_sizes(cfg), cov, cfg.seed)?;
            (r, Some(c))
        }
        Formula::Leibniz => (run_leibniz(cfg)?, None),
        Formula::LiftCheck => (run_lift_check(cfg)?, None),
    };

    let threshold = cfg.thresholds.residual.unwrap_or_else(|| match formula {
        Formula::Leibniz => 1e-6,
        Formula::LiftCheck => 1e-5,
        _ => default_threshold(&report, dt),
    });
    let mut report = report;
    report.apply_threshold(threshold);
    Ok(RunOutcome {
        report,
        curves,
        threshold,
    })
}

fn simulate_single_path(
    coeffs: &Coeffs,
    x0: &[f64],
    cfg: &ScenarioConfig,
    world: usize,
) -> Result<crate::path::ObservedPath> {
    let grid = TimeGrid::build(cfg.sizes.t_start, cfg.sizes.t_end, cfg.sizes.n_steps, &[])?;
    let specs: Vec<JumpSpec> = coeffs.jumps.iter().map(|p| p.spec.clone()).collect();
    let (drivers, grid) = sample_drivers(
        &grid,
        coeffs.d_w,
        &specs,
        cfg.seed,
        &[tag::WORLD, world as u64],
    )?;
    let grid = Arc::new(grid);
    let path = simulate_semimartingale(coeffs, x0, &drivers, &grid, SimOptions::default())?;
    Ok(path.obs)
}

/// Randomized interchange checks: each sample draws a fresh layer set,
/// base measure, direction, and Brownian path, and records the discrepancy
/// as a one-term breakdown (LHS = discrepancy, RHS = 0).
fn run_leibniz(cfg: &ScenarioConfig) -> Result<VerificationReport> {
    let n_atoms = cfg.sizes.n_particles.min(50).max(3);
    let mut breakdowns = Vec::new();
    for m in 0..cfg.sizes.n_worlds.max(1) {
        let mut rng = derive(cfg.seed, &[tag::SCENARIO, m as u64]);
        let n_layers = rng.gen_range(1..=3);
        let layers: Vec<(Modulation, CylindricalFn)> = (0..n_layers)
            .map(|_| {
                (
                    Modulation::Const(rng.gen_range(-1.0..1.0)),
                    random::random_cylindrical(&mut rng, 1, 2),
                )
            })
            .collect();
        let base = random::random_measure(&mut rng, 1, n_atoms);
        let mut h = Flat::zeros(n_atoms, 1);
        for i in 0..n_atoms {
            h.row_mut(i)[0] = rng.gen_range(-1.0..1.0);
        }
        let path = simulate_single_path(
            &Coeffs::additive_1d(0.0, 1.0),
            &[0.0],
            cfg,
            m,
        )?;
        let defect = leibniz_check(&layers, &path, &base, &h, 1e-4)?;
        breakdowns.push(TermBreakdown::new("leibniz", defect));
    }
    Ok(VerificationReport::from_breakdowns(
        "leibniz", "fd", cfg.seed, breakdowns,
    ))
}

fn run_lift_check(cfg: &ScenarioConfig) -> Result<VerificationReport> {
    let n_atoms = cfg.sizes.n_particles.min(50).max(3);
    let mut breakdowns = Vec::new();
    for m in 0..cfg.sizes.n_worlds.max(1) {
        let mut rng = derive(cfg.seed, &[tag::SCENARIO, m as u64]);
        let f = random::random_cylindrical(&mut rng, 1, 3);
        let mu = random::random_measure(&mut rng, 1, n_atoms);
        let defect = fd_lift_check(&f, &mu, 1e-4)?;
        breakdowns.push(TermBreakdown::new("lift-check", defect));
    }
    Ok(VerificationReport::from_breakdowns(
        "lift-check",
        "fd",
        cfg.seed,
        breakdowns,
    ))
}
