//! Empirical measures on R^d and the 1-d quadratic Wasserstein distance.

use crate::error::{EngineError, Result};
use crate::linalg::Flat;

/// Finitely supported probability measure.
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure {
    /// Atom locations, one row per atom.
    pub atoms: Flat,
    pub weights: Vec<f64>,
}

impl EmpiricalMeasure {
    /// Uniform weights 1/N over the given points.
    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(EngineError::InvalidArgument(
                "empirical measure needs at least one atom".into(),
            ));
        }
        let d = points[0].len();
        if points.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
            return Err(EngineError::InvalidArgument(
                "atoms must share a dimension and be finite".into(),
            ));
        }
        let n = points.len();
        Ok(EmpiricalMeasure {
            atoms: Flat::from_rows(points, d),
            weights: vec![1.0 / n as f64; n],
        })
    }

    /// Uniform measure over scalar points.
    pub fn uniform_1d(points: &[f64]) -> Result<Self> {
        Self::uniform(points.iter().map(|&x| vec![x]).collect())
    }

    pub fn n_atoms(&self) -> usize {
        self.weights.len()
    }

    pub fn d(&self) -> usize {
        self.atoms.width()
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        self.atoms.row(i)
    }

    /// Weighted average of g over the atoms.
    pub fn integrate(&self, mut g: impl FnMut(&[f64]) -> f64) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n_atoms() {
            s += self.weights[i] * g(self.atoms.row(i));
        }
        s
    }

    pub fn weight_defect(&self) -> f64 {
        (self.weights.iter().sum::<f64>() - 1.0).abs()
    }
}

/// Exact W2 between two measures on R^1 with equal atom counts and uniform
/// weights: sort atoms and pair order statistics (quantile coupling).
pub fn wasserstein2_1d(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    if mu.d() != 1 || nu.d() != 1 {
        return Err(EngineError::InvalidArgument(
            "wasserstein2_1d supports dimension 1 only (diagnostic)".into(),
        ));
    }
    if mu.n_atoms() != nu.n_atoms() {
        return Err(EngineError::InvalidArgument(
            "wasserstein2_1d requires equal atom counts".into(),
        ));
    }
    let n = mu.n_atoms();
    let mut a: Vec<f64> = (0..n).map(|i| mu.atom(i)[0]).collect();
    let mut b: Vec<f64> = (0..n).map(|i| nu.atom(i)[0]).collect();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let cost: f64 = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n as f64;
    Ok(cost.sqrt())
}
