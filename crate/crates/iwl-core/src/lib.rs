//! Numerical verification engine for Ito-Wentzell-type expansion formulas of
//! functionals of measure flows (full laws and conditional laws under common
//! noise) driven by jump semimartingales.
//!
//! The crate simulates semimartingale particle systems, equips cylindrical
//! functionals on the Wasserstein space with exact first- and second-order
//! linear and intrinsic (Lions) derivatives, evaluates every named term of the
//! expansion formulas, and checks each identity term by term: pathwise where
//! the identity is exact, statistically where it holds in law.

pub mod error;
pub mod grid;
pub mod linalg;
pub mod rng;

pub mod coeffs;
pub mod drivers;
pub mod path;

pub mod calculus;
pub mod fields;
pub mod flow;
pub mod measure;
pub mod runner;
pub mod scenario;
pub mod stats;
pub mod verifier;

pub use error::{EngineError, Result};
