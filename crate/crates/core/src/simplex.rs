//! The probability simplex `S_d` and its chart `Ŝ_d ⊂ R^{d−1}`.
//!
//! A point `m ∈ S_d` is identified with `η = (m_1, …, m_{d−1})`; the last
//! mass is recovered as `1 − Σ η_j`. A function `v` on `S_d` induces
//! `v̂(η) = v(η, 1 − Σ η)`, and `∂_{η_j} v̂ = ∂_{m_j − m_d} v`.
//!
//! State indices are zero-based throughout the crate: state `d − 1` is the
//! one dropped by the chart.

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};

/// Absolute tolerance on the simplex invariants.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// A probability vector over `d` states.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::InvalidPoint(format!("need at least 2 states, got {}", coords.len())));
        }
        if let Some(bad) = coords.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidPoint(format!("coordinate {bad} is negative or non-finite")));
        }
        let sum: f64 = coords.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidPoint(format!("coordinates sum to {sum}")));
        }
        Ok(Self(coords))
    }

    /// The barycenter `(1/d, …, 1/d)`.
    pub fn barycenter(dim: usize) -> Self {
        Self(vec![1.0 / dim as f64; dim])
    }

    /// The vertex `e_k`.
    pub fn vertex(dim: usize, k: usize) -> Result<Self> {
        if k >= dim {
            return Err(Error::IndexOutOfRange { index: k, dim });
        }
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        Ok(Self(v))
    }

    /// Clips tiny negative drift and rescales onto the simplex. Fails when
    /// the input is further than `tol` from `S_d`.
    pub fn renormalized(mut coords: Vec<f64>, tol: f64) -> Result<Self> {
        let sum: f64 = coords.iter().sum();
        if !sum.is_finite() || (sum - 1.0).abs() > tol || coords.iter().any(|&v| v < -tol) {
            return Err(Error::InvalidPoint(format!(
                "vector drifted off the simplex beyond tolerance {tol} (sum {sum})"
            )));
        }
        for v in &mut coords {
            *v = v.max(0.0);
        }
        let sum: f64 = coords.iter().sum();
        for v in &mut coords {
            *v /= sum;
        }
        Ok(Self(coords))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Drops the last coordinate.
    pub fn project(&self) -> ProjectedPoint {
        ProjectedPoint(self.0[..self.0.len() - 1].to_vec())
    }
}

/// A chart point `η ∈ Ŝ_d`: nonnegative with `Σ η_j ≤ 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedPoint(Vec<f64>);

impl ProjectedPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::OutOfChart("chart point needs at least one coordinate".into()));
        }
        if let Some(bad) = coords.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::OutOfChart(format!("coordinate {bad} is negative or non-finite")));
        }
        let sum: f64 = coords.iter().sum();
        if sum > 1.0 + SIMPLEX_TOL {
            return Err(Error::OutOfChart(format!("coordinates sum to {sum} > 1")));
        }
        Ok(Self(coords))
    }

    /// Number of states `d` of the simplex this chart point represents.
    pub fn dim(&self) -> usize {
        self.0.len() + 1
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    /// `(η_1, …, η_{d−1}, 1 − Σ η_j)`.
    pub fn lift(&self) -> SimplexPoint {
        let rest = (1.0 - compensated_sum(&self.0)).max(0.0);
        let mut m = self.0.clone();
        m.push(rest);
        SimplexPoint(m)
    }
}

/// Neumaier summation; keeps `1 − Σ η` accurate to a few ulps for large `d`.
pub(crate) fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0f64;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

/// Checked lift of raw chart coordinates.
pub fn lift(eta: &[f64]) -> Result<SimplexPoint> {
    Ok(ProjectedPoint::new(eta.to_vec())?.lift())
}

pub fn project(m: &SimplexPoint) -> ProjectedPoint {
    m.project()
}

/// `∇η` of a chart function, length `d − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartGradient(Vec<f64>);

impl ChartGradient {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("chart gradient".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len() + 1
    }
}

/// The argument `z` fed to the Hamiltonian of state `i` when the value
/// function is known through its chart gradient `p`:
/// `(p_1 − p_i, …, p_{d−1} − p_i, −p_i)` for a chart state and `(p, 0)` for
/// the dropped state `d − 1`.
pub fn chart_gradient_to_directional(p: &ChartGradient, i: usize) -> Result<Vec<f64>> {
    let dim = p.dim();
    if i >= dim {
        return Err(Error::IndexOutOfRange { index: i, dim });
    }
    let mut z = vec![0.0; dim];
    directional_into(p.values(), i, &mut z);
    Ok(z)
}

/// Unchecked variant of [`chart_gradient_to_directional`] writing into `out`.
pub(crate) fn directional_into(p: &[f64], i: usize, out: &mut [f64]) {
    let last = p.len();
    if i == last {
        out[..last].copy_from_slice(p);
        out[last] = 0.0;
    } else {
        let pi = p[i];
        for (o, &pj) in out[..last].iter_mut().zip(p) {
            *o = pj - pi;
        }
        out[last] = -pi;
    }
}

/// Uniform (flat Dirichlet) sample on `S_d` from normalized exponentials.
pub fn sample_uniform<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> SimplexPoint {
    assert!(dim >= 2, "simplex dimension must be at least 2");
    let mut v: Vec<f64> = (0..dim).map(|_| Exp1.sample(rng)).collect();
    let sum: f64 = v.iter().sum();
    for x in &mut v {
        *x /= sum;
    }
    SimplexPoint(v)
}
