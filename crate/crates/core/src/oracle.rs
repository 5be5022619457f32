//! Independent reference machinery: the forward equation for the law of the
//! controlled chain, cost evaluation along it, a lattice dynamic-programming
//! solver for the HJB equation in two and three states, an open-loop
//! trajectory optimizer, and an exact simulator of the N-agent system.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ControlMatrix, MfcpSpec, ValueFunction};
use crate::network::DualEvaluation;
use crate::simplex::{SimplexPoint, SIMPLEX_TOL};

/// Drift off the simplex tolerated per step before renormalization.
pub const DRIFT_TOL: f64 = 1e-10;

/// Default number of RK4 steps for cost evaluation.
pub const COST_STEPS: usize = 1000;

/// A feedback control `(t, m) ↦ α(t, m)`.
pub trait ControlPolicy: Sync {
    fn rates(&self, t: f64, m: &[f64]) -> Result<ControlMatrix>;
}

#[derive(Debug, Clone, Copy)]
pub struct ZeroPolicy {
    pub dim: usize,
}

impl ControlPolicy for ZeroPolicy {
    fn rates(&self, _t: f64, _m: &[f64]) -> Result<ControlMatrix> {
        Ok(ControlMatrix::zeros(self.dim))
    }
}

#[derive(Debug, Clone)]
pub struct ConstantPolicy(pub ControlMatrix);

impl ControlPolicy for ConstantPolicy {
    fn rates(&self, _t: f64, _m: &[f64]) -> Result<ControlMatrix> {
        Ok(self.0.clone())
    }
}

/// Any closure returning a rate matrix.
pub struct FnPolicy<F>(pub F);

impl<F> ControlPolicy for FnPolicy<F>
where
    F: Fn(f64, &[f64]) -> Result<ControlMatrix> + Sync,
{
    fn rates(&self, t: f64, m: &[f64]) -> Result<ControlMatrix> {
        (self.0)(t, m)
    }
}

/// The control recovered from a value function's chart gradient.
pub struct FeedbackPolicy<V> {
    pub spec: MfcpSpec,
    pub value: V,
}

impl<V: ValueFunction> FeedbackPolicy<V> {
    pub fn new(spec: MfcpSpec, value: V) -> Result<Self> {
        if value.dim() != spec.dim {
            return Err(Error::Config(format!("value function has d = {}, problem has d = {}", value.dim(), spec.dim)));
        }
        Ok(Self { spec, value })
    }
}

impl<V: ValueFunction> ControlPolicy for FeedbackPolicy<V> {
    fn rates(&self, t: f64, m: &[f64]) -> Result<ControlMatrix> {
        let d = self.spec.dim;
        let t = t.clamp(0.0, self.spec.horizon);
        let eval = self.value.eval(t, &m[..d - 1])?;
        Ok(self.spec.control_from_chart_gradient(&eval.deta))
    }
}

/// Rates constant on each of `controls.len()` equal subintervals of `[t0, t1]`.
#[derive(Debug, Clone)]
pub struct PiecewiseConstantPolicy {
    pub t0: f64,
    pub t1: f64,
    pub controls: Vec<ControlMatrix>,
}

impl ControlPolicy for PiecewiseConstantPolicy {
    fn rates(&self, t: f64, _m: &[f64]) -> Result<ControlMatrix> {
        let n = self.controls.len();
        let k = (((t - self.t0) / (self.t1 - self.t0)) * n as f64).floor();
        Ok(self.controls[(k.max(0.0) as usize).min(n - 1)].clone())
    }
}

/// `μ'_i = Σ_j (μ_j α_ji − μ_i α_ij)`; returns the running-cost rate
/// `Σ_i μ_i f(t, i, α_i, μ)` when `spec` is given.
fn vector_field(policy: &dyn ControlPolicy, spec: Option<&MfcpSpec>, t: f64, mu: &[f64], out: &mut [f64]) -> Result<f64> {
    let d = mu.len();
    let alpha = policy.rates(t, mu)?;
    if alpha.dim() != d {
        return Err(Error::Config(format!("policy returned {}x{} rates for d = {d}", alpha.dim(), alpha.dim())));
    }
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut running = 0.0;
    for i in 0..d {
        let row = alpha.row(i);
        for j in 0..d {
            if j != i {
                let flow = mu[i] * row[j];
                out[i] -= flow;
                out[j] += flow;
            }
        }
        if let Some(spec) = spec {
            running += mu[i] * spec.running_cost_raw(i, row, mu);
        }
    }
    Ok(running)
}

/// RK4 over `[t0, t1]` for the law and, optionally, the accumulated running cost.
fn rk4(
    policy: &dyn ControlPolicy,
    spec: Option<&MfcpSpec>,
    m0: &[f64],
    t0: f64,
    t1: f64,
    steps: usize,
    mut record: impl FnMut(&[f64]),
) -> Result<(Vec<f64>, f64)> {
    if steps == 0 {
        return Err(Error::Config("integration needs at least one step".into()));
    }
    let d = m0.len();
    let dt = (t1 - t0) / steps as f64;
    let mut mu = m0.to_vec();
    let mut cost = 0.0;
    let mut k = vec![vec![0.0; d]; 4];
    let mut stage = vec![0.0; d];
    record(&mu);
    for n in 0..steps {
        let t = t0 + n as f64 * dt;
        let c1 = vector_field(policy, spec, t, &mu, &mut k[0])?;
        for c in 0..d {
            stage[c] = mu[c] + 0.5 * dt * k[0][c];
        }
        let c2 = vector_field(policy, spec, t + 0.5 * dt, &stage, &mut k[1])?;
        for c in 0..d {
            stage[c] = mu[c] + 0.5 * dt * k[1][c];
        }
        let c3 = vector_field(policy, spec, t + 0.5 * dt, &stage, &mut k[2])?;
        for c in 0..d {
            stage[c] = mu[c] + dt * k[2][c];
        }
        let c4 = vector_field(policy, spec, t + dt, &stage, &mut k[3])?;
        for c in 0..d {
            mu[c] += dt / 6.0 * (k[0][c] + 2.0 * k[1][c] + 2.0 * k[2][c] + k[3][c]);
        }
        cost += dt / 6.0 * (c1 + 2.0 * c2 + 2.0 * c3 + c4);
        let sum: f64 = mu.iter().sum();
        let min = mu.iter().copied().fold(f64::INFINITY, f64::min);
        if !sum.is_finite() || (sum - 1.0).abs() > DRIFT_TOL || min < -DRIFT_TOL {
            return Err(Error::Integration(format!(
                "left the simplex at t = {}: mass {sum}, minimum {min}",
                t + dt
            )));
        }
        mu.iter_mut().for_each(|v| *v = v.max(0.0));
        let sum: f64 = mu.iter().sum();
        mu.iter_mut().for_each(|v| *v /= sum);
        record(&mu);
    }
    Ok((mu, cost))
}

/// The law `μ_t` on `steps + 1` equally spaced times in `[t0, t1]`.
pub fn integrate_forward(m0: &SimplexPoint, policy: &dyn ControlPolicy, t0: f64, t1: f64, steps: usize) -> Result<Vec<SimplexPoint>> {
    let mut path = Vec::with_capacity(steps + 1);
    rk4(policy, None, m0.coords(), t0, t1, steps, |mu| path.push(mu.to_vec()))?;
    path.into_iter().map(|mu| SimplexPoint::renormalized(mu, SIMPLEX_TOL)).collect()
}

/// `J(t0, m0, α) = ∫ Σ_i μ_i f(s, i, α_i, μ_s) ds + Σ_i μ_T^i gⁱ(μ_T)`, with
/// the running cost integrated on the RK4 grid.
pub fn evaluate_cost(spec: &MfcpSpec, m0: &SimplexPoint, policy: &dyn ControlPolicy, t0: f64, steps: usize) -> Result<f64> {
    if m0.dim() != spec.dim {
        return Err(Error::Config(format!("initial point has d = {}, problem has d = {}", m0.dim(), spec.dim)));
    }
    let (mu, running) = rk4(policy, Some(spec), m0.coords(), t0, spec.horizon, steps, |_| {})?;
    Ok(running + spec.terminal_value_raw(&mu))
}

/// Lattice `{η = h k : k ∈ ℕ^{d−1}, Σ k ≤ n}` on the chart, `h = 1/n`.
#[derive(Debug, Clone)]
struct Lattice {
    dim: usize,
    n: usize,
    /// Chart coordinates (in units of `h`), padded to two entries.
    nodes: Vec<[usize; 2]>,
}

impl Lattice {
    fn new(dim: usize, n: usize) -> Self {
        let nodes = match dim {
            2 => (0..=n).map(|a| [a, 0]).collect(),
            _ => (0..=n).flat_map(|a| (0..=n - a).map(move |b| [a, b])).collect(),
        };
        Self { dim, n, nodes }
    }

    fn len(&self) -> usize {
        self.nodes.len()
    }

    fn index(&self, k: [usize; 2]) -> usize {
        match self.dim {
            2 => k[0],
            _ => k[0] * (self.n + 1) - k[0] * k[0].saturating_sub(1) / 2 + k[1],
        }
    }

    /// State counts `(k, n − Σ k)`.
    fn counts(&self, k: [usize; 2]) -> [usize; 3] {
        match self.dim {
            2 => [k[0], self.n - k[0], 0],
            _ => [k[0], k[1], self.n - k[0] - k[1]],
        }
    }

    fn counts_to_node(&self, c: [usize; 3]) -> [usize; 2] {
        match self.dim {
            2 => [c[0], 0],
            _ => [c[0], c[1]],
        }
    }
}

/// Value function on the chart lattice at `N_t + 1` equally spaced times.
#[derive(Debug, Clone)]
pub struct ValueGrid {
    spec: MfcpSpec,
    lattice: Lattice,
    mesh: f64,
    time_steps: usize,
    dt: f64,
    /// `values[k * nodes + node]`
    values: Vec<f64>,
    /// Nodal derivatives `(∂η…, ∂t)`, `d` per node and slice.
    grads: Vec<f64>,
}

/// Backward induction `V(t_k) = V(t_{k+1}) − Δt Σ_i m_i Hⁱ(z^i)` with the
/// upwind differences `z^i_j = (V(m + h(e_j − e_i)) − V(m)) / h`.
///
/// The neighbor exists whenever `m_i > 0`, so the stencil is one-sided at
/// the boundary by construction. Requires `Δt ≤ h / (2 M d)`.
pub fn solve_grid_hjb(spec: &MfcpSpec, time_steps: usize, mesh: f64) -> Result<ValueGrid> {
    spec.validate()?;
    let d = spec.dim;
    if !(2..=3).contains(&d) {
        return Err(Error::Config(format!("grid solver supports d in {{2, 3}}, got {d}")));
    }
    if time_steps == 0 {
        return Err(Error::Config("grid solver needs at least one time step".into()));
    }
    let n = (1.0 / mesh).round();
    if !(mesh > 0.0) || n < 1.0 || (n * mesh - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("mesh {mesh} must be 1/n for an integer n")));
    }
    let n = n as usize;
    let h = 1.0 / n as f64;
    let dt = spec.horizon / time_steps as f64;
    let bound = h / (2.0 * spec.max_rate * d as f64);
    if dt > bound * (1.0 + 1e-12) {
        return Err(Error::Cfl { dt, bound, mesh: h });
    }

    let lattice = Lattice::new(d, n);
    let nodes = lattice.len();
    let masses: Vec<[f64; 3]> = lattice
        .nodes
        .iter()
        .map(|&k| {
            let c = lattice.counts(k);
            [c[0] as f64 * h, c[1] as f64 * h, c[2] as f64 * h]
        })
        .collect();
    // neighbor[node][i][j]: node index of m + h(e_j − e_i), when m_i > 0
    let neighbors: Vec<[[usize; 3]; 3]> = lattice
        .nodes
        .iter()
        .map(|&k| {
            let c = lattice.counts(k);
            let mut out = [[usize::MAX; 3]; 3];
            for i in 0..d {
                if c[i] == 0 {
                    continue;
                }
                for j in 0..d {
                    if j != i {
                        let mut cn = c;
                        cn[i] -= 1;
                        cn[j] += 1;
                        out[i][j] = lattice.index(lattice.counts_to_node(cn));
                    }
                }
            }
            out
        })
        .collect();

    let mut values = vec![0.0; (time_steps + 1) * nodes];
    for (node, m) in masses.iter().enumerate() {
        values[time_steps * nodes + node] = spec.terminal_value_raw(&m[..d]);
    }
    for k in (0..time_steps).rev() {
        let (head, tail) = values.split_at_mut((k + 1) * nodes);
        let next = &tail[..nodes];
        let current = &mut head[k * nodes..];
        current.par_iter_mut().enumerate().for_each(|(node, out)| {
            let m = &masses[node][..d];
            let v = next[node];
            let mut z = [0.0; 3];
            let mut total = 0.0;
            for i in 0..d {
                if m[i] <= 0.0 {
                    continue;
                }
                for j in 0..d {
                    z[j] = if j == i { 0.0 } else { (next[neighbors[node][i][j]] - v) / h };
                }
                total += m[i] * spec.hamiltonian_raw(i, m, &z[..d]);
            }
            *out = v - dt * total;
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("grid value function".into()));
    }

    let mut grid = ValueGrid {
        spec: spec.clone(),
        lattice,
        mesh: h,
        time_steps,
        dt,
        values,
        grads: Vec::new(),
    };
    grid.grads = grid.nodal_gradients();
    Ok(grid)
}

impl ValueGrid {
    pub fn spec(&self) -> &MfcpSpec {
        &self.spec
    }

    pub fn mesh(&self) -> f64 {
        self.mesh
    }

    pub fn time_steps(&self) -> usize {
        self.time_steps
    }

    pub fn node_count(&self) -> usize {
        self.lattice.len()
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.time_steps {
            self.spec.horizon
        } else {
            k as f64 * self.dt
        }
    }

    /// Chart coordinates of a node.
    pub fn node_eta(&self, node: usize) -> Vec<f64> {
        let k = self.lattice.nodes[node];
        (0..self.spec.dim - 1).map(|c| k[c] as f64 * self.mesh).collect()
    }

    /// Simplex coordinates of a node.
    pub fn node_mass(&self, node: usize) -> Vec<f64> {
        let c = self.lattice.counts(self.lattice.nodes[node]);
        (0..self.spec.dim).map(|i| c[i] as f64 * self.mesh).collect()
    }

    pub fn value(&self, k: usize, node: usize) -> f64 {
        self.values[k * self.lattice.len() + node]
    }

    /// One time slice, indexed by node.
    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.lattice.len();
        &self.values[k * n..(k + 1) * n]
    }

    /// Node index of the lattice point `m`, if `m` lies on the lattice.
    pub fn node_at(&self, m: &[f64]) -> Option<usize> {
        let d = self.spec.dim;
        let mut k = [0usize; 2];
        for c in 0..d - 1 {
            let x = m[c] / self.mesh;
            let r = x.round();
            if (x - r).abs() > 1e-9 || r < 0.0 {
                return None;
            }
            k[c] = r as usize;
        }
        if k[0] + k[1] > self.lattice.n {
            return None;
        }
        Some(self.lattice.index(k))
    }

    /// Nodes whose masses all stay at least `band` away from zero.
    pub fn interior_nodes(&self, band: f64) -> Vec<usize> {
        (0..self.lattice.len())
            .filter(|&node| self.node_mass(node).iter().all(|&m| m >= band - 1e-12))
            .collect()
    }

    /// Writes `t,eta_1,…,value` rows for every slice and node.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.spec.dim;
        let etas: Vec<String> = (1..d).map(|c| format!("eta_{c}")).collect();
        writeln!(w, "t,{},value", etas.join(","))?;
        for k in 0..=self.time_steps {
            let t = self.time(k);
            for node in 0..self.lattice.len() {
                let eta: Vec<String> = self.node_eta(node).iter().map(|e| e.to_string()).collect();
                writeln!(w, "{t},{},{}", eta.join(","), self.value(k, node))?;
            }
        }
        Ok(())
    }

    /// Central differences in η and t, one-sided where a neighbor is missing.
    fn nodal_gradients(&self) -> Vec<f64> {
        let d = self.spec.dim;
        let nodes = self.lattice.len();
        let n = self.lattice.n;
        let h = self.mesh;
        let mut grads = vec![0.0; (self.time_steps + 1) * nodes * d];
        for k in 0..=self.time_steps {
            let slice = self.slice(k);
            for node in 0..nodes {
                let kk = self.lattice.nodes[node];
                let total = kk[0] + kk[1];
                let out = &mut grads[(k * nodes + node) * d..(k * nodes + node + 1) * d];
                for c in 0..d - 1 {
                    let mut up = kk;
                    let mut dn = kk;
                    let has_up = total < n;
                    let has_dn = kk[c] > 0;
                    up[c] += 1;
                    dn[c] = dn[c].saturating_sub(1);
                    let v = slice[node];
                    out[c] = match (has_up, has_dn) {
                        (true, true) => (slice[self.lattice.index(up)] - slice[self.lattice.index(dn)]) / (2.0 * h),
                        (true, false) => (slice[self.lattice.index(up)] - v) / h,
                        (false, true) => (v - slice[self.lattice.index(dn)]) / h,
                        (false, false) => 0.0,
                    };
                }
                let dt = self.dt;
                out[d - 1] = if k == 0 {
                    (self.value(1, node) - self.value(0, node)) / dt
                } else if k == self.time_steps {
                    (self.value(k, node) - self.value(k - 1, node)) / dt
                } else {
                    (self.value(k + 1, node) - self.value(k - 1, node)) / (2.0 * dt)
                };
            }
        }
        grads
    }

    /// Lattice vertices and weights of the linear element containing `η`.
    fn element(&self, eta: &[f64]) -> Result<Vec<(usize, f64)>> {
        let d = self.spec.dim;
        let n = self.lattice.n;
        let nf = n as f64;
        let tol = 1e-9;
        let mut x: Vec<f64> = eta.iter().map(|e| e / self.mesh).collect();
        let sum: f64 = x.iter().sum();
        if x.iter().any(|&v| !(v >= -tol * nf)) || sum > nf * (1.0 + tol) {
            return Err(Error::OutOfChart(format!("{eta:?}")));
        }
        x.iter_mut().for_each(|v| *v = v.max(0.0));
        let sum: f64 = x.iter().sum();
        if sum > nf {
            x.iter_mut().for_each(|v| *v *= nf / sum);
        }
        let cell = |v: f64| (v.floor() as usize).min(n - 1);
        let verts = if d == 2 {
            let i = cell(x[0]);
            let f = x[0] - i as f64;
            vec![([i, 0], 1.0 - f), ([i + 1, 0], f)]
        } else {
            let (i, j) = (cell(x[0]), cell(x[1]));
            let (fx, fy) = (x[0] - i as f64, x[1] - j as f64);
            if fx + fy <= 1.0 {
                vec![([i, j], 1.0 - fx - fy), ([i + 1, j], fx), ([i, j + 1], fy)]
            } else {
                vec![([i + 1, j + 1], fx + fy - 1.0), ([i + 1, j], 1.0 - fy), ([i, j + 1], 1.0 - fx)]
            }
        };
        // on the far face a zero-weight vertex may fall outside the lattice
        Ok(verts
            .into_iter()
            .filter(|&(k, _)| k[0] + k[1] <= n)
            .map(|(k, w)| (self.lattice.index(k), w))
            .collect())
    }
}

/// Piecewise-linear in `(t, η)` for values and for the nodal derivatives.
impl ValueFunction for ValueGrid {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn eval(&self, t: f64, eta: &[f64]) -> Result<DualEvaluation> {
        let d = self.spec.dim;
        if eta.len() + 1 != d {
            return Err(Error::Config(format!("chart point has {} coordinates, grid expects {}", eta.len(), d - 1)));
        }
        if !(t >= -1e-12 && t <= self.spec.horizon + 1e-12) {
            return Err(Error::Config(format!("time {t} outside [0, {}]", self.spec.horizon)));
        }
        let s = (t / self.dt).clamp(0.0, self.time_steps as f64);
        let k = (s.floor() as usize).min(self.time_steps - 1);
        let ft = s - k as f64;
        let nodes = self.lattice.len();
        let mut out = DualEvaluation {
            value: 0.0,
            dt: 0.0,
            deta: vec![0.0; d - 1],
        };
        for (node, w) in self.element(eta)? {
            for (slice, wt) in [(k, 1.0 - ft), (k + 1, ft)] {
                let weight = w * wt;
                if weight == 0.0 {
                    continue;
                }
                out.value += weight * self.values[slice * nodes + node];
                let g = &self.grads[(slice * nodes + node) * d..(slice * nodes + node + 1) * d];
                for c in 0..d - 1 {
                    out.deta[c] += weight * g[c];
                }
                out.dt += weight * g[d - 1];
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OpenLoopConfig {
    pub intervals: usize,
    pub iterations: usize,
    pub step: f64,
    /// RK4 steps per interval.
    pub substeps: usize,
    pub fd_step: f64,
}

impl Default for OpenLoopConfig {
    fn default() -> Self {
        Self {
            intervals: 20,
            iterations: 500,
            step: 0.05,
            substeps: 10,
            fd_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OpenLoopSolution {
    pub cost: f64,
    pub policy: PiecewiseConstantPolicy,
}

/// Minimizes the cost over piecewise-constant rates by projected gradient
/// descent with central finite-difference gradients, starting from zero.
pub fn optimize_open_loop(spec: &MfcpSpec, m0: &SimplexPoint, t0: f64, cfg: &OpenLoopConfig) -> Result<OpenLoopSolution> {
    let d = spec.dim;
    if m0.dim() != d {
        return Err(Error::Config(format!("initial point has d = {}, problem has d = {d}", m0.dim())));
    }
    if cfg.intervals == 0 || cfg.substeps == 0 {
        return Err(Error::Config("open-loop optimization needs intervals and substeps".into()));
    }
    let slots: Vec<(usize, usize, usize)> = (0..cfg.intervals)
        .flat_map(|k| (0..d).flat_map(move |i| (0..d).filter(move |&j| j != i).map(move |j| (k, i, j))))
        .collect();
    let mut x = vec![0.0; cfg.intervals * d * d];
    let at = |k: usize, i: usize, j: usize| (k * d + i) * d + j;
    let cost = |x: &[f64]| open_loop_cost(spec, m0.coords(), t0, x, cfg);
    for _ in 0..cfg.iterations {
        let grad: Vec<f64> = slots
            .par_iter()
            .map(|&(k, i, j)| {
                let mut up = x.clone();
                let mut dn = x.clone();
                up[at(k, i, j)] += cfg.fd_step;
                dn[at(k, i, j)] -= cfg.fd_step;
                (cost(&up) - cost(&dn)) / (2.0 * cfg.fd_step)
            })
            .collect();
        for (&(k, i, j), g) in slots.iter().zip(grad) {
            let v = &mut x[at(k, i, j)];
            *v = (*v - cfg.step * g).clamp(0.0, spec.max_rate);
        }
    }
    let controls = (0..cfg.intervals)
        .map(|k| ControlMatrix::new(d, x[k * d * d..(k + 1) * d * d].to_vec(), spec.max_rate))
        .collect::<Result<Vec<_>>>()?;
    Ok(OpenLoopSolution {
        cost: cost(&x),
        policy: PiecewiseConstantPolicy {
            t0,
            t1: spec.horizon,
            controls,
        },
    })
}

/// Cost of piecewise-constant rates `x[(k·d + i)·d + j]`, which may leave
/// `[0, M]` slightly during finite differencing.
fn open_loop_cost(spec: &MfcpSpec, m0: &[f64], t0: f64, x: &[f64], cfg: &OpenLoopConfig) -> f64 {
    let d = spec.dim;
    let h = (spec.horizon - t0) / (cfg.intervals * cfg.substeps) as f64;
    let mut mu = m0.to_vec();
    let mut running = 0.0;
    let field = |rates: &[f64], mu: &[f64], out: &mut [f64]| -> f64 {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut r = 0.0;
        for i in 0..d {
            let row = &rates[i * d..(i + 1) * d];
            for j in 0..d {
                if j != i {
                    out[i] -= mu[i] * row[j];
                    out[j] += mu[i] * row[j];
                }
            }
            r += mu[i] * spec.running_cost_raw(i, row, mu);
        }
        r
    };
    let mut k = vec![vec![0.0; d]; 4];
    let mut stage = vec![0.0; d];
    for interval in 0..cfg.intervals {
        let rates = &x[interval * d * d..(interval + 1) * d * d];
        for _ in 0..cfg.substeps {
            let c1 = field(rates, &mu, &mut k[0]);
            for c in 0..d {
                stage[c] = mu[c] + 0.5 * h * k[0][c];
            }
            let c2 = field(rates, &stage, &mut k[1]);
            for c in 0..d {
                stage[c] = mu[c] + 0.5 * h * k[1][c];
            }
            let c3 = field(rates, &stage, &mut k[2]);
            for c in 0..d {
                stage[c] = mu[c] + h * k[2][c];
            }
            let c4 = field(rates, &stage, &mut k[3]);
            for c in 0..d {
                mu[c] += h / 6.0 * (k[0][c] + 2.0 * k[1][c] + 2.0 * k[2][c] + k[3][c]);
            }
            running += h / 6.0 * (c1 + 2.0 * c2 + 2.0 * c3 + c4);
        }
    }
    running + spec.terminal_value_raw(&mu)
}

/// Largest-remainder rounding of `N · m0` to agent counts summing to `N`.
pub fn quantize(m0: &SimplexPoint, n: usize) -> Vec<usize> {
    let scaled: Vec<f64> = m0.coords().iter().map(|m| m * n as f64).collect();
    let mut counts: Vec<usize> = scaled.iter().map(|s| s.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = scaled[a] - scaled[a].floor();
        let rb = scaled[b] - scaled[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Monte Carlo estimate of the N-agent cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NAgentEstimate {
    pub mean: f64,
    /// Zero when only one repetition was run.
    pub std_err: f64,
    pub terminal_mean: f64,
    pub terminal_std_err: f64,
    pub reps: usize,
}

struct Replica {
    running: f64,
    terminal: f64,
    samples: Vec<Vec<f64>>,
}

/// One exact simulation of the empirical measure by thinning against the
/// rate bound `N (d − 1) M`; the running cost is integrated by Simpson's rule
/// between consecutive candidate times. Records `μ^N` at `sample_times`.
fn run_replica(
    spec: &MfcpSpec,
    policy: &dyn ControlPolicy,
    counts0: &[usize],
    rng: &mut ChaCha8Rng,
    sample_times: &[f64],
) -> Result<Replica> {
    let d = spec.dim;
    let n: usize = counts0.iter().sum();
    let nf = n as f64;
    let mut counts = counts0.to_vec();
    let mut mu: Vec<f64> = counts.iter().map(|&c| c as f64 / nf).collect();
    let bound = nf * (d - 1) as f64 * spec.max_rate;
    let clock = Exp::new(bound).map_err(|e| Error::Config(format!("invalid rate bound {bound}: {e}")))?;
    let rate_cost = |t: f64, mu: &[f64]| -> Result<(ControlMatrix, f64)> {
        let alpha = policy.rates(t, mu)?;
        let f = (0..d).map(|i| mu[i] * spec.running_cost_raw(i, alpha.row(i), mu)).sum();
        Ok((alpha, f))
    };
    let mut samples = Vec::with_capacity(sample_times.len());
    let mut next_sample = 0;
    let mut t = 0.0;
    let mut running = 0.0;
    let (_, mut f_now) = rate_cost(t, &mu)?;
    loop {
        let tc = (t + clock.sample(rng)).min(spec.horizon);
        while next_sample < sample_times.len() && sample_times[next_sample] < tc {
            samples.push(mu.clone());
            next_sample += 1;
        }
        let (_, f_mid) = rate_cost(0.5 * (t + tc), &mu)?;
        let (alpha, f_end) = rate_cost(tc, &mu)?;
        running += (tc - t) / 6.0 * (f_now + 4.0 * f_mid + f_end);
        t = tc;
        f_now = f_end;
        if t >= spec.horizon {
            break;
        }
        let total: f64 = (0..d)
            .map(|i| counts[i] as f64 * alpha.row(i).iter().enumerate().filter(|&(j, _)| j != i).map(|(_, a)| a).sum::<f64>())
            .sum();
        let u: f64 = rng.random::<f64>() * bound;
        if u < total {
            // pick the transition (i, j) with probability counts_i α_ij / total
            let mut acc = 0.0;
            let mut chosen = None;
            'pick: for i in 0..d {
                for j in 0..d {
                    if j != i {
                        acc += counts[i] as f64 * alpha.get(i, j);
                        if u < acc {
                            chosen = Some((i, j));
                            break 'pick;
                        }
                    }
                }
            }
            let (i, j) = chosen.unwrap_or_else(|| {
                // rounding at the top end: take the last transition with positive rate
                (0..d)
                    .flat_map(|i| (0..d).map(move |j| (i, j)))
                    .rfind(|&(i, j)| i != j && counts[i] > 0 && alpha.get(i, j) > 0.0)
                    .expect("positive total rate")
            });
            counts[i] -= 1;
            counts[j] += 1;
            mu[i] = counts[i] as f64 / nf;
            mu[j] = counts[j] as f64 / nf;
            f_now = rate_cost(t, &mu)?.1;
        }
    }
    while next_sample < sample_times.len() {
        samples.push(mu.clone());
        next_sample += 1;
    }
    Ok(Replica {
        running,
        terminal: spec.terminal_value_raw(&mu),
        samples,
    })
}

fn replica_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64 + 1);
    rng
}

fn check_agents(spec: &MfcpSpec, n: usize, m0: &SimplexPoint) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("N must be >= 1".into()));
    }
    if m0.dim() != spec.dim {
        return Err(Error::Config(format!("initial point has d = {}, problem has d = {}", m0.dim(), spec.dim)));
    }
    Ok(())
}

/// `J^N` under `policy` from the `N`-quantized initial measure, averaged over
/// `reps` independent repetitions (each with its own random stream).
pub fn simulate_n_agents(
    spec: &MfcpSpec,
    policy: &dyn ControlPolicy,
    n: usize,
    m0: &SimplexPoint,
    reps: usize,
    seed: u64,
) -> Result<NAgentEstimate> {
    check_agents(spec, n, m0)?;
    if reps == 0 {
        return Err(Error::Config("reps must be >= 1".into()));
    }
    let counts = quantize(m0, n);
    let results: Vec<(f64, f64)> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let r = run_replica(spec, policy, &counts, &mut replica_rng(seed, rep), &[])?;
            Ok((r.running + r.terminal, r.terminal))
        })
        .collect::<Result<_>>()?;
    let stats = |xs: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = xs.collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        if v.len() < 2 {
            return (mean, 0.0);
        }
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (mean, (var / v.len() as f64).sqrt())
    };
    let (mean, std_err) = stats(&mut results.iter().map(|r| r.0));
    let (terminal_mean, terminal_std_err) = stats(&mut results.iter().map(|r| r.1));
    Ok(NAgentEstimate {
        mean,
        std_err,
        terminal_mean,
        terminal_std_err,
        reps,
    })
}

/// One realization of the empirical measure `μ^N_t` at `times` (ascending, in `[0, T]`).
pub fn simulate_empirical_path(
    spec: &MfcpSpec,
    policy: &dyn ControlPolicy,
    n: usize,
    m0: &SimplexPoint,
    times: &[f64],
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    check_agents(spec, n, m0)?;
    let counts = quantize(m0, n);
    Ok(run_replica(spec, policy, &counts, &mut replica_rng(seed, 0), times)?.samples)
}
