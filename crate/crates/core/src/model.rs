//! The finite-state mean field control problem.
//!
//! Running cost `f(t, i, a, m) = ½ Σ_{j≠i} c_ij a_j² + f₀ⁱ(m)` with rates
//! `a_j ∈ [0, M]`, terminal cost `gⁱ(m)`, and the per-state Hamiltonian
//!
//! ```text
//! Hⁱ(t, m, z) = sup_{a ∈ [0,M]^{d−1}} ( −Σ_{j≠i} a_j z_j − f(t, i, a, m) )
//!             = Σ_{j≠i} ( −a* z_j − ½ c_ij a*² ) − f₀ⁱ(m),   a* = clip(−z_j / c_ij, 0, M).
//! ```
//!
//! The value function solves `−∂t V + Σ_i m_i Hⁱ(t, m, Dⁱ V) = 0` with
//! `V(T, m) = Σ_i m_i gⁱ(m)`. On the chart, `Dⁱ V` is obtained from `∇η V̂`
//! through [`chart_gradient_to_directional`].

use crate::error::{Error, Result};
use crate::network::DualEvaluation;
use crate::simplex::{chart_gradient_to_directional, directional_into, ChartGradient, ProjectedPoint, SimplexPoint};

/// Positive off-diagonal transition costs `c_ij`; the diagonal is unused.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn ones(dim: usize) -> Self {
        Self {
            dim,
            entries: vec![1.0; dim * dim],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.len();
        let mut entries = Vec::with_capacity(dim * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Config(format!("cost matrix row {i} has {} entries, expected {dim}", row.len())));
            }
            for (j, &c) in row.iter().enumerate() {
                if i != j && !(c.is_finite() && c > 0.0) {
                    return Err(Error::Config(format!("cost c[{i}][{j}] = {c} must be positive")));
                }
                entries.push(c);
            }
        }
        Ok(Self { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dim: self.dim,
            entries: self.entries.iter().map(|c| c * factor).collect(),
        }
    }

    pub fn is_ones(&self) -> bool {
        (0..self.dim).all(|i| (0..self.dim).all(|j| i == j || self.get(i, j) == 1.0))
    }
}

/// The mass-dependent part `f₀ⁱ(m)` of the running cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StateCost {
    /// `f₀ⁱ(m) = m_i`
    OwnMass,
    Zero,
}

/// Terminal cost `gⁱ(m)`.
#[derive(Debug, Clone, PartialEq)]
pub enum TerminalCost {
    /// `gⁱ(m) = m_i`, so `G(m) = Σ m_i²`.
    OwnMass,
    /// `gⁱ(m) = c` for every state.
    Constant(f64),
    /// `gⁱ(m) = w_i`, independent of the mass.
    PerState(Vec<f64>),
}

/// A nonnegative rate matrix with zero diagonal, rates bounded by `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlMatrix {
    dim: usize,
    rates: Vec<f64>,
}

impl ControlMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            rates: vec![0.0; dim * dim],
        }
    }

    /// Validates `0 ≤ rate ≤ max_rate` off the diagonal; the diagonal is zeroed.
    pub fn new(dim: usize, mut rates: Vec<f64>, max_rate: f64) -> Result<Self> {
        if rates.len() != dim * dim {
            return Err(Error::Config(format!("rate matrix needs {} entries, got {}", dim * dim, rates.len())));
        }
        for i in 0..dim {
            rates[i * dim + i] = 0.0;
            for j in 0..dim {
                let r = rates[i * dim + j];
                if !(0.0..=max_rate).contains(&r) {
                    return Err(Error::Config(format!("rate a[{i}][{j}] = {r} outside [0, {max_rate}]")));
                }
            }
        }
        Ok(Self { dim, rates })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rates[i * self.dim + j]
    }

    /// Row `i`: the rates out of state `i`.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.rates[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.rates
    }

    pub(crate) fn from_raw(dim: usize, rates: Vec<f64>) -> Self {
        Self { dim, rates }
    }
}

/// Problem definition: `d` states on `[0, T]` with rates in `[0, M]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MfcpSpec {
    pub dim: usize,
    pub horizon: f64,
    pub max_rate: f64,
    pub cost: CostMatrix,
    pub state_cost: StateCost,
    pub terminal: TerminalCost,
}

/// `𝔞*(s)`: the clip of `s` to `[0, M]`.
#[inline]
pub fn a_star_scalar(s: f64, max_rate: f64) -> f64 {
    s.clamp(0.0, max_rate)
}

impl MfcpSpec {
    pub fn new(dim: usize, horizon: f64, max_rate: f64, cost: CostMatrix, state_cost: StateCost, terminal: TerminalCost) -> Result<Self> {
        let spec = Self {
            dim,
            horizon,
            max_rate,
            cost,
            state_cost,
            terminal,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The quadratic example: `c ≡ 1`, `f₀ⁱ = m_i`, `gⁱ = m_i`, `T = 1`, `M = 1`.
    pub fn example(dim: usize) -> Self {
        Self {
            dim,
            horizon: 1.0,
            max_rate: 1.0,
            cost: CostMatrix::ones(dim),
            state_cost: StateCost::OwnMass,
            terminal: TerminalCost::OwnMass,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!("problem.d must be >= 2, got {}", self.dim)));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::Config(format!("problem.T must be positive, got {}", self.horizon)));
        }
        if !(self.max_rate.is_finite() && self.max_rate > 0.0) {
            return Err(Error::Config(format!("problem.M must be positive, got {}", self.max_rate)));
        }
        if let TerminalCost::PerState(w) = &self.terminal {
            if w.len() != self.dim || w.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("terminal weights must be {} finite numbers", self.dim)));
            }
        }
        if self.cost.dim() != self.dim {
            return Err(Error::Config(format!(
                "cost matrix is {0}x{0} but problem.d = {1}",
                self.cost.dim(),
                self.dim
            )));
        }
        Ok(())
    }

    /// `a*(−z / c_ij)`, the maximizing rate from `i` to `j`.
    #[inline]
    pub fn optimal_rate(&self, i: usize, j: usize, z: f64) -> f64 {
        a_star_scalar(-z / self.cost.get(i, j), self.max_rate)
    }

    #[inline]
    pub fn state_cost(&self, i: usize, m: &[f64]) -> f64 {
        match self.state_cost {
            StateCost::OwnMass => m[i],
            StateCost::Zero => 0.0,
        }
    }

    /// `f(t, i, a, m)`; the self-rate `a_i` is ignored.
    pub fn running_cost(&self, _t: f64, i: usize, a: &[f64], m: &SimplexPoint) -> f64 {
        self.running_cost_raw(i, a, m.coords())
    }

    pub(crate) fn running_cost_raw(&self, i: usize, a: &[f64], m: &[f64]) -> f64 {
        let quad: f64 = (0..self.dim)
            .filter(|&j| j != i)
            .map(|j| self.cost.get(i, j) * a[j] * a[j])
            .sum();
        0.5 * quad + self.state_cost(i, m)
    }

    #[inline]
    pub fn terminal_cost(&self, i: usize, m: &[f64]) -> f64 {
        match &self.terminal {
            TerminalCost::OwnMass => m[i],
            TerminalCost::Constant(c) => *c,
            TerminalCost::PerState(w) => w[i],
        }
    }

    /// `G(m) = Σ_i m_i gⁱ(m)`.
    pub fn terminal_value(&self, m: &SimplexPoint) -> f64 {
        self.terminal_value_raw(m.coords())
    }

    pub(crate) fn terminal_value_raw(&self, m: &[f64]) -> f64 {
        (0..self.dim).map(|i| m[i] * self.terminal_cost(i, m)).sum()
    }

    /// `Hⁱ(t, m, z)` in closed form. `z_i` does not enter.
    pub fn hamiltonian(&self, i: usize, _t: f64, m: &SimplexPoint, z: &[f64]) -> f64 {
        self.hamiltonian_raw(i, m.coords(), z)
    }

    pub(crate) fn hamiltonian_raw(&self, i: usize, m: &[f64], z: &[f64]) -> f64 {
        let mut h = -self.state_cost(i, m);
        for (j, &zj) in z.iter().enumerate() {
            if j != i {
                let a = self.optimal_rate(i, j, zj);
                h += -a * zj - 0.5 * self.cost.get(i, j) * a * a;
            }
        }
        h
    }

    /// `H(t, m, ·) = Σ_i m_i Hⁱ(t, m, zⁱ)` given one argument per state.
    pub fn pde_hamiltonian(&self, t: f64, m: &SimplexPoint, per_state: &[Vec<f64>]) -> f64 {
        (0..self.dim).map(|i| m.coords()[i] * self.hamiltonian(i, t, m, &per_state[i])).sum()
    }

    /// `Ĥⁱ(t, η, p) = Hⁱ(t, m, zⁱ(p))`.
    pub fn chart_hamiltonian(&self, i: usize, t: f64, eta: &ProjectedPoint, p: &ChartGradient) -> Result<f64> {
        let z = chart_gradient_to_directional(p, i)?;
        Ok(self.hamiltonian(i, t, &eta.lift(), &z))
    }

    /// `L̂[φ](t, η) = −∂t φ + Σ_i m_i Ĥⁱ(t, η, ∇η φ)` with `m = lift(η)`.
    pub fn hjb_residual(&self, eval: &DualEvaluation, _t: f64, eta: &ProjectedPoint) -> f64 {
        let m = eta.lift();
        self.residual_raw(m.coords(), eval.dt, &eval.deta, None)
    }

    /// Residual at chart point `m` (already lifted), optionally writing
    /// `∂R/∂(∇η φ)` into `sens`. `∂R/∂(∂t φ) = −1` always.
    ///
    /// Each term `−a* z − ½ c a*²` has derivative `−a*` in `z`, so
    /// `∂R/∂p_k = m_k Σ_{j≠k} a*_kj − Σ_{i≠k} m_i a*_ik`.
    pub(crate) fn residual_raw(&self, m: &[f64], dt: f64, p: &[f64], mut sens: Option<&mut [f64]>) -> f64 {
        let d = self.dim;
        let last = d - 1;
        if let Some(s) = sens.as_deref_mut() {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut total = -dt;
        for (i, &mi) in m.iter().enumerate() {
            let pi = if i == last { 0.0 } else { p[i] };
            let mut hi = -self.state_cost(i, m);
            let mut outflow = 0.0;
            for j in 0..d {
                if j == i {
                    continue;
                }
                let zj = if j == last { -pi } else { p[j] - pi };
                let a = self.optimal_rate(i, j, zj);
                hi += -a * zj - 0.5 * self.cost.get(i, j) * a * a;
                if let Some(s) = sens.as_deref_mut() {
                    if j != last {
                        s[j] -= mi * a;
                    }
                    outflow += a;
                }
            }
            if i != last {
                if let Some(s) = sens.as_deref_mut() {
                    s[i] += mi * outflow;
                }
            }
            total += mi * hi;
        }
        total
    }

    /// `α*_ij(t, m) = a*_j(t, i, m, Dⁱ φ)` from the chart gradient in `eval`.
    pub fn recover_control(&self, eval: &DualEvaluation, _t: f64, m: &SimplexPoint) -> Result<ControlMatrix> {
        if eval.deta.len() + 1 != self.dim || m.dim() != self.dim {
            return Err(Error::Config(format!(
                "gradient of length {} and point of dimension {} do not match d = {}",
                eval.deta.len(),
                m.dim(),
                self.dim
            )));
        }
        Ok(self.control_from_chart_gradient(&eval.deta))
    }

    pub(crate) fn control_from_chart_gradient(&self, p: &[f64]) -> ControlMatrix {
        let d = self.dim;
        let mut rates = vec![0.0; d * d];
        let mut z = vec![0.0; d];
        for i in 0..d {
            directional_into(p, i, &mut z);
            for j in 0..d {
                if j != i {
                    rates[i * d + j] = self.optimal_rate(i, j, z[j]);
                }
            }
        }
        ControlMatrix::from_raw(d, rates)
    }
}

/// Anything that evaluates a value function on `[0, T] × Ŝ_d` together
/// with its time and chart derivatives.
pub trait ValueFunction: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, eta: &[f64]) -> Result<DualEvaluation>;
}

impl<V: ValueFunction + ?Sized> ValueFunction for &V {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn eval(&self, t: f64, eta: &[f64]) -> Result<DualEvaluation> {
        (**self).eval(t, eta)
    }
}
