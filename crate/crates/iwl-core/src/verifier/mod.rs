//! Term-by-term verification of the expansion formulas.
//!
//! Submodules, in dependency order: result types ([`report`]), the shared
//! field-on-path abstraction ([`pathfield`]), pathwise space-form assemblies
//! ([`ito`]), the full-law measure-flow form ([`full`]), the conditional-law
//! form ([`conditional`]), the joint time-space-measure forms
//! ([`spacemeasure`]), the Poisson-functional forms ([`poisson`]), and
//! convergence sweeps ([`sweep`]).

pub mod conditional;
pub mod full;
pub mod ito;
pub mod pathfield;
pub mod poisson;
pub mod report;
pub mod spacemeasure;
pub mod sweep;

pub use conditional::{
    build_conditional_world, rhs_terms_conditional, verify_conditional, ConditionalScenario,
    ConditionalSizes, ConditionalWorld, THM4_LABELS,
};
pub use full::{
    build_full_world, rhs_terms_full, verify_full_measure, FullLawScenario, FullMode, FullSizes,
    FullWorld, CORRECTION_LABELS, THM3_LABELS,
};
pub use ito::{verify_ito_pathwise, verify_ito_wentzell_pathwise, ITO_LABELS, IW_LABELS};
pub use pathfield::{project_flow, EtaSet, MeasureFieldOnZ, PathField};
pub use poisson::{
    build_conditional_poisson_world, build_poisson_world, rhs_terms_poisson_conditional,
    rhs_terms_poisson_full, verify_poisson_conditional, verify_poisson_full,
    ConditionalPoissonScenario, ConditionalPoissonWorld, PoissonAssembly, PoissonMode,
    PoissonScenario, PoissonWorld, CORO3_LABELS, CORO4_LABELS,
};
pub use report::{ConvergenceResult, TermBreakdown, TermCurves, VerificationReport};
pub use spacemeasure::{
    build_conditional_space_measure_world, build_space_measure_world,
    rhs_terms_conditional_space_measure, rhs_terms_space_measure, verify_conditional_space_measure,
    verify_time_space_measure, ChainForm, ConditionalSpaceMeasureScenario,
    ConditionalSpaceMeasureWorld, SpaceMeasureScenario, SpaceMeasureWorld, CORO1_LABELS,
    CORO2_LABELS, SM_CORRECTION_LABELS,
};
pub use sweep::convergence_study;
