//! Neural approximators `φ(t, η; θ)` with exact input derivatives.
//!
//! Hidden activations are carried as stacked dual blocks: block 0 holds the
//! values for a batch of points and block `k ≥ 1` holds the derivative of
//! those values along input coordinate `k − 1`. Inputs are ordered
//! `(η_1, …, η_{d−1}, t)`. Layer Jacobian-vector products are accumulated on
//! the way forward, so a single pass yields `φ`, `∇η φ` and `∂t φ`; the
//! cached blocks then support a reverse sweep that returns the exact
//! parameter gradient of any scalar built from those three quantities.
//!
//! Two layer kinds are provided:
//!
//! * `Plain`: `a_ℓ = σ(W_ℓ a_{ℓ−1} + b_ℓ)` followed by an affine head.
//! * `Gated`: the DGM recurrence. An entry layer `S_1 = σ(W x + b)` is
//!   followed by `depth` gated layers
//!
//!   ```text
//!   Z = σ(U_z x + W_z S + b_z)        G = σ(U_g x + W_g S + b_g)
//!   R = σ(U_r x + W_r S + b_r)        H = σ(U_h x + W_h (S ⊙ R) + b_h)
//!   S' = (1 − G) ⊙ H + Z ⊙ S
//!   ```
//!
//!   and the same affine head `φ = w · S_{L+1} + b`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Points per chunk in batched passes.
const CHUNK_ROWS: usize = 1024;
/// Cached activations above this many bytes are recomputed in the reverse pass.
const TAPE_BUDGET_BYTES: usize = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Plain,
    Gated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// Linear test mode; turns the network into an affine map of its input.
    Identity,
}

/// Shape of a network approximating a value function on `[0, T] × Ŝ_d`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    /// Number of states `d`; the network sees `d − 1` chart coordinates plus time.
    pub dim: usize,
    pub kind: LayerKind,
    /// Hidden layers (plain) or gated layers after the entry layer (gated).
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
}

impl Architecture {
    pub fn new(dim: usize, kind: LayerKind, depth: usize, width: usize) -> Self {
        Self {
            dim,
            kind,
            depth,
            width,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!("dimension must be >= 2, got {}", self.dim)));
        }
        if self.depth < 1 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.width < 1 {
            return Err(Error::Config("width must be >= 1".into()));
        }
        Ok(())
    }

    /// Inputs per point: `d − 1` chart coordinates and time.
    pub fn input_dim(&self) -> usize {
        self.dim
    }

    pub fn param_count(&self) -> usize {
        let (n, k) = (self.width, self.input_dim());
        let head = n + 1;
        match self.kind {
            LayerKind::Plain => n * k + n + (self.depth - 1) * (n * n + n) + head,
            LayerKind::Gated => n * k + n + 4 * self.depth * (n * k + n * n + n) + head,
        }
    }

    /// Number of dual blocks stored per gated/plain layer in a forward tape.
    fn cached_blocks_per_point(&self) -> usize {
        match self.kind {
            LayerKind::Plain => self.depth,
            LayerKind::Gated => 1 + 6 * self.depth,
        }
    }
}

/// Flattened network weights `θ ∈ R^P`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for ParameterVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

/// Network output at one point together with its input derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEvaluation {
    pub value: f64,
    /// `∂t φ`
    pub dt: f64,
    /// `∇η φ`, length `d − 1`.
    pub deta: Vec<f64>,
}

/// Batched network output. `grad` has one row per point with columns
/// `(∂η_1 φ, …, ∂η_{d−1} φ, ∂t φ)` and is present only when requested.
#[derive(Debug, Clone)]
pub struct NetOutput {
    pub value: Array1<f64>,
    pub grad: Option<Array2<f64>>,
}

impl NetOutput {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// The `j`-th point as a [`DualEvaluation`]. Panics if `grad` is absent.
    pub fn point(&self, j: usize) -> DualEvaluation {
        let grad = self.grad.as_ref().expect("input gradients were not computed");
        let row = grad.row(j);
        let k = row.len();
        DualEvaluation {
            value: self.value[j],
            dt: row[k - 1],
            deta: row.slice(s![..k - 1]).to_vec(),
        }
    }
}

/// Loss value plus its cotangents with respect to every network output used.
#[derive(Debug, Clone)]
pub struct LossCotangents {
    pub loss: f64,
    pub interior_value: Array1<f64>,
    /// Same layout as [`NetOutput::grad`].
    pub interior_grad: Array2<f64>,
    pub terminal_value: Array1<f64>,
}

/// A scalar loss built from network values and input derivatives at interior
/// points and from plain values at terminal points.
pub trait DualLoss: Sync {
    fn evaluate(&self, interior: &NetOutput, terminal: &Array1<f64>) -> Result<LossCotangents>;
}

#[derive(Debug, Clone, Copy)]
struct AffineSlots {
    input: Option<usize>,
    state: Option<usize>,
    state_dim: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
enum Layout {
    Plain(Vec<AffineSlots>),
    Gated {
        entry: AffineSlots,
        gates: Vec<[AffineSlots; 4]>,
    },
}

/// Stacked values and tangents for a batch of `rows` points.
#[derive(Debug, Clone)]
struct Dual {
    rows: usize,
    data: Array2<f64>,
}

impl Dual {
    fn zeros(rows: usize, blocks: usize, width: usize) -> Self {
        Self {
            rows,
            data: Array2::zeros((rows * blocks, width)),
        }
    }

    fn like(other: &Dual) -> Self {
        Self {
            rows: other.rows,
            data: Array2::zeros(other.data.raw_dim()),
        }
    }

    fn blocks(&self) -> usize {
        self.data.nrows() / self.rows.max(1)
    }

    fn value(&self) -> ArrayView2<'_, f64> {
        self.data.slice(s![..self.rows, ..])
    }

    fn tangents(&self) -> ArrayView2<'_, f64> {
        self.data.slice(s![self.rows.., ..])
    }
}

struct GateCache {
    z: Dual,
    g: Dual,
    r: Dual,
    sr: Dual,
    h: Dual,
}

/// Cached forward pass for one chunk of points.
struct Tape {
    /// Hidden states: plain layer outputs, or `S_1, …, S_{L+1}` for gated.
    hidden: Vec<Dual>,
    gates: Vec<GateCache>,
}

/// A network of fixed architecture; parameters are passed per call.
#[derive(Debug, Clone)]
pub struct Network {
    arch: Architecture,
    layout: Layout,
    head_w: usize,
    head_b: usize,
    len: usize,
}

impl Network {
    pub fn new(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let (n, k) = (arch.width, arch.input_dim());
        let mut cursor = 0usize;
        let mut take = |size: usize| {
            let at = cursor;
            cursor += size;
            at
        };
        let layout = match arch.kind {
            LayerKind::Plain => {
                let mut layers = Vec::with_capacity(arch.depth);
                for l in 0..arch.depth {
                    let slots = if l == 0 {
                        AffineSlots {
                            input: Some(take(n * k)),
                            state: None,
                            state_dim: 0,
                            bias: take(n),
                        }
                    } else {
                        AffineSlots {
                            input: None,
                            state: Some(take(n * n)),
                            state_dim: n,
                            bias: take(n),
                        }
                    };
                    layers.push(slots);
                }
                Layout::Plain(layers)
            }
            LayerKind::Gated => {
                let entry = AffineSlots {
                    input: Some(take(n * k)),
                    state: None,
                    state_dim: 0,
                    bias: take(n),
                };
                let mut gates = Vec::with_capacity(arch.depth);
                for _ in 0..arch.depth {
                    let mut gate = || AffineSlots {
                        input: Some(take(n * k)),
                        state: Some(take(n * n)),
                        state_dim: n,
                        bias: take(n),
                    };
                    gates.push([gate(), gate(), gate(), gate()]);
                }
                Layout::Gated { entry, gates }
            }
        };
        let head_w = take(n);
        let head_b = take(1);
        let len = cursor;
        debug_assert_eq!(len, arch.param_count());
        Ok(Self {
            arch,
            layout,
            head_w,
            head_b,
            len,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.len
    }

    /// Weights uniform on `±1/√fan_in`, biases zero. Deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> ParameterVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; self.len];
        let (n, k) = (self.arch.width, self.arch.input_dim());
        let mut fill = |theta: &mut [f64], offset: usize, size: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut theta[offset..offset + size] {
                *v = rng.random_range(-bound..bound);
            }
        };
        let mut fill_slots = |theta: &mut [f64], slots: &AffineSlots| {
            if let Some(off) = slots.input {
                fill(theta, off, n * k, k);
            }
            if let Some(off) = slots.state {
                fill(theta, off, n * slots.state_dim, slots.state_dim);
            }
        };
        match &self.layout {
            Layout::Plain(layers) => layers.iter().for_each(|sl| fill_slots(&mut theta, sl)),
            Layout::Gated { entry, gates } => {
                fill_slots(&mut theta, entry);
                for gate in gates {
                    gate.iter().for_each(|sl| fill_slots(&mut theta, sl));
                }
            }
        }
        fill(&mut theta, self.head_w, n, n);
        ParameterVector(theta)
    }

    fn check_params(&self, theta: &ParameterVector) -> Result<()> {
        if theta.len() != self.len {
            return Err(Error::Config(format!(
                "parameter vector has length {}, architecture expects {}",
                theta.len(),
                self.len
            )));
        }
        Ok(())
    }

    /// Value and exact input derivatives at a single point `(t, η)`.
    pub fn evaluate(&self, theta: &ParameterVector, t: f64, eta: &[f64]) -> Result<DualEvaluation> {
        if eta.len() + 1 != self.arch.input_dim() {
            return Err(Error::Config(format!(
                "chart point has {} coordinates, network expects {}",
                eta.len(),
                self.arch.input_dim() - 1
            )));
        }
        let mut x = Array2::zeros((1, self.arch.input_dim()));
        for (j, &e) in eta.iter().enumerate() {
            x[[0, j]] = e;
        }
        x[[0, eta.len()]] = t;
        Ok(self.forward(theta, x.view(), true)?.point(0))
    }

    /// Batched forward pass over rows `(η, t)`; input derivatives on request.
    pub fn forward(&self, theta: &ParameterVector, x: ArrayView2<'_, f64>, with_grad: bool) -> Result<NetOutput> {
        self.check_params(theta)?;
        let k = self.arch.input_dim();
        if x.ncols() != k {
            return Err(Error::Config(format!("input has {} columns, expected {k}", x.ncols())));
        }
        let rows = x.nrows();
        let mut value = Array1::zeros(rows);
        let mut grad = with_grad.then(|| Array2::zeros((rows, k)));
        let chunks: Vec<_> = chunk_ranges(rows)
            .into_par_iter()
            .map(|(lo, hi)| self.run_chunk(theta.as_slice(), x.slice(s![lo..hi, ..]), with_grad, false).0)
            .collect();
        for ((lo, hi), out) in chunk_ranges(rows).into_iter().zip(chunks) {
            scatter_output(&out, hi - lo, lo, &mut value, grad.as_mut());
        }
        check_finite(value.iter(), "network output")?;
        if let Some(g) = &grad {
            check_finite(g.iter(), "network input gradient")?;
        }
        Ok(NetOutput { value, grad })
    }

    /// Loss value and exact parameter gradient for a loss built from network
    /// outputs at `interior` (with input derivatives) and `terminal` points.
    pub fn loss_gradient(
        &self,
        theta: &ParameterVector,
        interior: ArrayView2<'_, f64>,
        terminal: ArrayView2<'_, f64>,
        loss: &dyn DualLoss,
    ) -> Result<(f64, ParameterVector)> {
        self.check_params(theta)?;
        let k = self.arch.input_dim();
        let blocks_int = 1 + k;
        let per_point = self.arch.cached_blocks_per_point() * self.arch.width * 8;
        let tape_bytes = per_point * (interior.nrows() * blocks_int + terminal.nrows());
        let keep = tape_bytes <= TAPE_BUDGET_BYTES;

        let int_ranges = chunk_ranges(interior.nrows());
        let term_ranges = chunk_ranges(terminal.nrows());
        let th = theta.as_slice();

        let int_pass: Vec<_> = int_ranges
            .par_iter()
            .map(|&(lo, hi)| self.run_chunk(th, interior.slice(s![lo..hi, ..]), true, keep))
            .collect();
        let term_pass: Vec<_> = term_ranges
            .par_iter()
            .map(|&(lo, hi)| self.run_chunk(th, terminal.slice(s![lo..hi, ..]), false, keep))
            .collect();

        let mut int_out = NetOutput {
            value: Array1::zeros(interior.nrows()),
            grad: Some(Array2::zeros((interior.nrows(), k))),
        };
        for (&(lo, hi), (out, _)) in int_ranges.iter().zip(&int_pass) {
            scatter_output(out, hi - lo, lo, &mut int_out.value, int_out.grad.as_mut());
        }
        let mut term_out = Array1::zeros(terminal.nrows());
        for (&(lo, hi), (out, _)) in term_ranges.iter().zip(&term_pass) {
            scatter_output(out, hi - lo, lo, &mut term_out, None);
        }
        check_finite(int_out.value.iter(), "network output")?;
        check_finite(int_out.grad.as_ref().unwrap().iter(), "network input gradient")?;
        check_finite(term_out.iter(), "network terminal output")?;

        let cot = loss.evaluate(&int_out, &term_out)?;
        if !cot.loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }

        let int_grads: Vec<Vec<f64>> = int_ranges
            .par_iter()
            .zip(int_pass.into_par_iter())
            .map(|(&(lo, hi), (_, tape))| {
                let x = interior.slice(s![lo..hi, ..]);
                let tape = tape.unwrap_or_else(|| self.run_chunk(th, x, true, true).1.unwrap());
                let rows = hi - lo;
                let mut phibar = Array1::zeros(rows * blocks_int);
                phibar.slice_mut(s![..rows]).assign(&cot.interior_value.slice(s![lo..hi]));
                for c in 0..k {
                    phibar
                        .slice_mut(s![(c + 1) * rows..(c + 2) * rows])
                        .assign(&cot.interior_grad.slice(s![lo..hi, c]));
                }
                self.backward_chunk(th, x, &tape, phibar.view())
            })
            .collect();
        let term_grads: Vec<Vec<f64>> = term_ranges
            .par_iter()
            .zip(term_pass.into_par_iter())
            .map(|(&(lo, hi), (_, tape))| {
                let x = terminal.slice(s![lo..hi, ..]);
                let tape = tape.unwrap_or_else(|| self.run_chunk(th, x, false, true).1.unwrap());
                self.backward_chunk(th, x, &tape, cot.terminal_value.slice(s![lo..hi]))
            })
            .collect();

        let mut grad = vec![0.0; self.len];
        for g in int_grads.iter().chain(term_grads.iter()) {
            for (acc, v) in grad.iter_mut().zip(g) {
                *acc += v;
            }
        }
        check_finite(grad.iter(), "parameter gradient")?;
        Ok((cot.loss, ParameterVector(grad)))
    }

    /// Forward pass over one chunk. Returns the stacked head output
    /// (`blocks × rows`) and, when `keep`, the tape for the reverse sweep.
    fn run_chunk(&self, theta: &[f64], x: ArrayView2<'_, f64>, with_grad: bool, keep: bool) -> (Array1<f64>, Option<Tape>) {
        let blocks = if with_grad { 1 + self.arch.input_dim() } else { 1 };
        let mut hidden = Vec::new();
        let mut gates = Vec::new();
        let last = match &self.layout {
            Layout::Plain(layers) => {
                let mut a = self.affine(theta, &layers[0], x, None, blocks);
                for slots in &layers[1..] {
                    let next = self.affine(theta, slots, x, Some(&a), blocks);
                    let prev = std::mem::replace(&mut a, next);
                    if keep {
                        hidden.push(prev);
                    }
                }
                a
            }
            Layout::Gated { entry, gates: layer_gates } => {
                let mut state = self.affine(theta, entry, x, None, blocks);
                for gate in layer_gates {
                    let (next, cache) = self.gated_forward(theta, gate, x, &state, blocks);
                    let prev = std::mem::replace(&mut state, next);
                    if keep {
                        hidden.push(prev);
                        gates.push(cache);
                    }
                }
                state
            }
        };
        let w = ArrayView1::from(&theta[self.head_w..self.head_w + self.arch.width]);
        let mut out = last.data.dot(&w);
        out.slice_mut(s![..last.rows]).mapv_inplace(|v| v + theta[self.head_b]);
        let tape = keep.then(|| {
            hidden.push(last);
            Tape { hidden, gates }
        });
        (out, tape)
    }

    fn gated_forward(&self, theta: &[f64], gate: &[AffineSlots; 4], x: ArrayView2<'_, f64>, s: &Dual, blocks: usize) -> (Dual, GateCache) {
        let z = self.affine(theta, &gate[0], x, Some(s), blocks);
        let g = self.affine(theta, &gate[1], x, Some(s), blocks);
        let r = self.affine(theta, &gate[2], x, Some(s), blocks);
        let sr = dual_mul(s, &r);
        let h = self.affine(theta, &gate[3], x, Some(&sr), blocks);

        // S' = (1 − G) ⊙ H + Z ⊙ S
        let rows = s.rows;
        let mut next = Dual::zeros(rows, blocks, s.data.ncols());
        {
            let (g0, h0, z0, s0) = (g.value(), h.value(), z.value(), s.value());
            Zip::from(next.data.slice_mut(s![..rows, ..]))
                .and(&g0)
                .and(&h0)
                .and(&z0)
                .and(&s0)
                .for_each(|o, &g, &h, &z, &s| *o = (1.0 - g) * h + z * s);
            for b in 1..blocks {
                let sl = s![b * rows..(b + 1) * rows, ..];
                Zip::from(next.data.slice_mut(sl))
                    .and(g.data.slice(sl))
                    .and(h.data.slice(sl))
                    .and(&g0)
                    .and(&h0)
                    .for_each(|o, &gd, &hd, &g, &h| *o = (1.0 - g) * hd - gd * h);
                Zip::from(next.data.slice_mut(sl))
                    .and(z.data.slice(sl))
                    .and(s.data.slice(sl))
                    .and(&z0)
                    .and(&s0)
                    .for_each(|o, &zd, &sd, &z, &s| *o += zd * s + z * sd);
            }
        }
        (next, GateCache { z, g, r, sr, h })
    }

    /// `σ(U x + W s + b)` on all dual blocks.
    fn affine(&self, theta: &[f64], slots: &AffineSlots, x: ArrayView2<'_, f64>, state: Option<&Dual>, blocks: usize) -> Dual {
        let n = self.arch.width;
        let k = self.arch.input_dim();
        let rows = x.nrows();
        let mut y = match (slots.state, state) {
            (Some(off), Some(st)) => Dual {
                rows,
                data: st.data.dot(&weight_view(theta, off, n, slots.state_dim).t()),
            },
            _ => Dual::zeros(rows, blocks, n),
        };
        let u = slots.input.map(|off| weight_view(theta, off, n, k));
        if let Some(u) = &u {
            let mut val = y.data.slice_mut(s![..rows, ..]);
            general_mat_mul(1.0, &x, &u.t(), 1.0, &mut val);
        }
        let bias = &theta[slots.bias..slots.bias + n];
        let len = rows * n;
        let data = y.data.as_slice_mut().expect("contiguous");
        let (val, tan) = data.split_at_mut(len);
        let tanh = self.arch.activation == Activation::Tanh;
        for row in val.chunks_exact_mut(n) {
            for (v, &b) in row.iter_mut().zip(bias) {
                *v = if tanh { fast_tanh(*v + b) } else { *v + b };
            }
        }
        for (blk, tb) in tan.chunks_exact_mut(len).enumerate() {
            for (trow, vrow) in tb.chunks_exact_mut(n).zip(val.chunks_exact(n)) {
                for c in 0..n {
                    let shift = u.as_ref().map_or(0.0, |u| u[[c, blk]]);
                    let slope = if tanh { 1.0 - vrow[c] * vrow[c] } else { 1.0 };
                    trow[c] = (trow[c] + shift) * slope;
                }
            }
        }
        y
    }

    /// Reverse sweep of [`Self::affine`]; accumulates parameter cotangents
    /// into `grad` and returns the cotangent of `state` when present.
    fn affine_backward(
        &self,
        theta: &[f64],
        grad: &mut [f64],
        slots: &AffineSlots,
        ybar: &Dual,
        x: ArrayView2<'_, f64>,
        state: Option<&Dual>,
        accumulate: Option<&mut Dual>,
    ) -> Option<Dual> {
        let n = self.arch.width;
        let k = self.arch.input_dim();
        let rows = ybar.rows;
        let blocks = ybar.blocks();
        {
            let mut gb = ArrayViewMut1::from(&mut grad[slots.bias..slots.bias + n]);
            gb += &ybar.value().sum_axis(Axis(0));
        }
        if let Some(off) = slots.input {
            let mut gu = weight_view_mut(grad, off, n, k);
            general_mat_mul(1.0, &ybar.value().t(), &x, 1.0, &mut gu);
            for b in 1..blocks {
                let colsum = ybar.data.slice(s![b * rows..(b + 1) * rows, ..]).sum_axis(Axis(0));
                let mut c = gu.column_mut(b - 1);
                c += &colsum;
            }
        }
        match (slots.state, state) {
            (Some(off), Some(st)) => {
                {
                    let mut gw = weight_view_mut(grad, off, n, slots.state_dim);
                    general_mat_mul(1.0, &ybar.data.t(), &st.data, 1.0, &mut gw);
                }
                let w = weight_view(theta, off, n, slots.state_dim);
                match accumulate {
                    Some(acc) => {
                        general_mat_mul(1.0, &ybar.data, &w, 1.0, &mut acc.data);
                        None
                    }
                    None => Some(Dual {
                        rows,
                        data: ybar.data.dot(&w),
                    }),
                }
            }
            _ => None,
        }
    }

    fn backward_chunk(&self, theta: &[f64], x: ArrayView2<'_, f64>, tape: &Tape, phibar: ArrayView1<'_, f64>) -> Vec<f64> {
        let n = self.arch.width;
        let act = self.arch.activation;
        let mut grad = vec![0.0; self.len];
        let last = tape.hidden.last().expect("tape holds the final hidden state");
        let rows = last.rows;

        // head: φ = S w + b on the value block
        {
            let mut gw = ArrayViewMut1::from(&mut grad[self.head_w..self.head_w + n]);
            gw += &last.data.t().dot(&phibar);
        }
        grad[self.head_b] += phibar.slice(s![..rows]).sum();
        let w = ArrayView1::from(&theta[self.head_w..self.head_w + n]);
        let mut sbar = Dual {
            rows,
            data: outer(phibar, w),
        };

        match &self.layout {
            Layout::Plain(layers) => {
                for l in (0..layers.len()).rev() {
                    let ybar = activation_backward(act, sbar, &tape.hidden[l]);
                    let prev = if l == 0 { None } else { Some(&tape.hidden[l - 1]) };
                    match self.affine_backward(theta, &mut grad, &layers[l], &ybar, x, prev, None) {
                        Some(bar) => sbar = bar,
                        None => break,
                    }
                }
            }
            Layout::Gated { entry, gates } => {
                for l in (0..gates.len()).rev() {
                    let s_in = &tape.hidden[l];
                    let cache = &tape.gates[l];
                    sbar = self.gated_backward(theta, &mut grad, &gates[l], x, s_in, cache, &sbar);
                }
                let ybar = activation_backward(act, sbar, &tape.hidden[0]);
                self.affine_backward(theta, &mut grad, entry, &ybar, x, None, None);
            }
        }
        grad
    }

    #[allow(clippy::too_many_arguments)]
    fn gated_backward(
        &self,
        theta: &[f64],
        grad: &mut [f64],
        gate: &[AffineSlots; 4],
        x: ArrayView2<'_, f64>,
        s: &Dual,
        cache: &GateCache,
        sbar: &Dual,
    ) -> Dual {
        let act = self.arch.activation;
        let mut yz = Dual::like(sbar);
        let mut yg = Dual::like(sbar);
        let mut yh = Dual::like(sbar);
        let mut s_acc = Dual::like(sbar);
        update_backward(act, sbar, s, cache, [&mut yz, &mut yg, &mut yh, &mut s_acc]);

        let srbar = self
            .affine_backward(theta, grad, &gate[3], &yh, x, Some(&cache.sr), None)
            .expect("gate has a state weight");
        let mut yr = Dual::like(sbar);
        reset_backward(act, &srbar, s, &cache.r, &mut yr, &mut s_acc);

        for (slots, y) in [(&gate[2], &yr), (&gate[1], &yg), (&gate[0], &yz)] {
            self.affine_backward(theta, grad, slots, y, x, Some(s), Some(&mut s_acc));
        }
        s_acc
    }
}

#[inline]
fn fast_tanh(x: f64) -> f64 {
    let e = (2.0 * x.clamp(-20.0, 20.0)).exp_m1();
    e / (e + 2.0)
}

/// `(σ'(y), c)` expressed through `a = σ(y)`, where `c · ȧ = ∂ȧ/∂y`.
#[inline]
fn slope_curvature(act: Activation, a: f64) -> (f64, f64) {
    match act {
        Activation::Tanh => (1.0 - a * a, -2.0 * a),
        Activation::Identity => (1.0, 0.0),
    }
}

/// Reverse sweep of `S' = (1 − G) ⊙ H + Z ⊙ S` fused with the activation
/// reverse of `Z`, `G`, `H`. Writes pre-activation cotangents of the three
/// gates and the direct cotangent of `S`.
fn update_backward(act: Activation, sbar: &Dual, s: &Dual, c: &GateCache, out: [&mut Dual; 4]) {
    let [yz, yg, yh, sacc] = out;
    let blocks = sbar.blocks();
    let len = sbar.rows * sbar.data.ncols();
    let sb = sbar.data.as_slice().expect("contiguous");
    let (sv, zv, gv, hv) = (
        s.data.as_slice().expect("contiguous"),
        c.z.data.as_slice().expect("contiguous"),
        c.g.data.as_slice().expect("contiguous"),
        c.h.data.as_slice().expect("contiguous"),
    );
    let yz = yz.data.as_slice_mut().expect("contiguous");
    let yg = yg.data.as_slice_mut().expect("contiguous");
    let yh = yh.data.as_slice_mut().expect("contiguous");
    let sacc = sacc.data.as_slice_mut().expect("contiguous");
    for e in 0..len {
        let (s0, z0, g0, h0, sb0) = (sv[e], zv[e], gv[e], hv[e], sb[e]);
        let (mut sum_g, mut sum_h, mut sum_s, mut sum_z) = (0.0, 0.0, 0.0, 0.0);
        for b in 1..blocks {
            let i = b * len + e;
            sum_g += sb[i] * gv[i];
            sum_h += sb[i] * hv[i];
            sum_s += sb[i] * sv[i];
            sum_z += sb[i] * zv[i];
        }
        let (dz, cz) = slope_curvature(act, z0);
        let (dg, cg) = slope_curvature(act, g0);
        let (dh, ch) = slope_curvature(act, h0);
        yh[e] = (sb0 * (1.0 - g0) - sum_g) * dh + ch * (1.0 - g0) * sum_h;
        yg[e] = (-sb0 * h0 - sum_h) * dg - cg * h0 * sum_g;
        yz[e] = (sb0 * s0 + sum_s) * dz + cz * s0 * sum_z;
        sacc[e] = sb0 * z0 + sum_z;
        let (fh, fg, fz) = ((1.0 - g0) * dh, -h0 * dg, s0 * dz);
        for b in 1..blocks {
            let i = b * len + e;
            yh[i] = sb[i] * fh;
            yg[i] = sb[i] * fg;
            yz[i] = sb[i] * fz;
            sacc[i] = sb[i] * z0;
        }
    }
}

/// Reverse sweep of `SR = S ⊙ R` fused with the activation reverse of `R`.
fn reset_backward(act: Activation, srbar: &Dual, s: &Dual, r: &Dual, yr: &mut Dual, sacc: &mut Dual) {
    let blocks = srbar.blocks();
    let len = srbar.rows * srbar.data.ncols();
    let qb = srbar.data.as_slice().expect("contiguous");
    let sv = s.data.as_slice().expect("contiguous");
    let rv = r.data.as_slice().expect("contiguous");
    let yr = yr.data.as_slice_mut().expect("contiguous");
    let sacc = sacc.data.as_slice_mut().expect("contiguous");
    for e in 0..len {
        let (s0, r0, q0) = (sv[e], rv[e], qb[e]);
        let (mut sum_r, mut sum_s) = (0.0, 0.0);
        for b in 1..blocks {
            let i = b * len + e;
            sum_r += qb[i] * rv[i];
            sum_s += qb[i] * sv[i];
        }
        let (dr, cr) = slope_curvature(act, r0);
        sacc[e] += q0 * r0 + sum_r;
        yr[e] = (q0 * s0 + sum_s) * dr + cr * s0 * sum_r;
        let fr = s0 * dr;
        for b in 1..blocks {
            let i = b * len + e;
            sacc[i] += qb[i] * r0;
            yr[i] = qb[i] * fr;
        }
    }
}

fn chunk_ranges(rows: usize) -> Vec<(usize, usize)> {
    (0..rows)
        .step_by(CHUNK_ROWS)
        .map(|lo| (lo, (lo + CHUNK_ROWS).min(rows)))
        .collect()
}

fn scatter_output(out: &Array1<f64>, rows: usize, lo: usize, value: &mut Array1<f64>, grad: Option<&mut Array2<f64>>) {
    value.slice_mut(s![lo..lo + rows]).assign(&out.slice(s![..rows]));
    if let Some(g) = grad {
        for c in 0..g.ncols() {
            g.slice_mut(s![lo..lo + rows, c])
                .assign(&out.slice(s![(c + 1) * rows..(c + 2) * rows]));
        }
    }
}

fn check_finite<'a>(mut values: impl Iterator<Item = &'a f64>, what: &str) -> Result<()> {
    if values.all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

fn weight_view(theta: &[f64], offset: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), &theta[offset..offset + rows * cols]).expect("layout slice matches shape")
}

fn weight_view_mut(grad: &mut [f64], offset: usize, rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), &mut grad[offset..offset + rows * cols]).expect("layout slice matches shape")
}

fn outer(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    let mut m = Array2::zeros((a.len(), b.len()));
    Zip::from(m.rows_mut()).and(&a).for_each(|mut row, &ai| {
        row.assign(&b);
        row *= ai;
    });
    m
}

/// Cotangent of the activation input given the cotangent of its output `a`.
/// With `a = tanh(y)`, `ȧ = (1 − a²) ẏ`, so `∂ȧ/∂y = −2a ȧ`.
fn activation_backward(act: Activation, mut abar: Dual, a: &Dual) -> Dual {
    if act == Activation::Identity {
        return abar;
    }
    let rows = a.rows;
    let av = a.value();
    let (mut vbar, mut tbar) = abar.data.view_mut().split_at(Axis(0), rows);
    let mut extra = Array2::<f64>::zeros(av.raw_dim());
    for (bar_blk, a_blk) in tbar
        .axis_chunks_iter_mut(Axis(0), rows.max(1))
        .zip(a.tangents().axis_chunks_iter(Axis(0), rows.max(1)))
    {
        Zip::from(&mut extra)
            .and(&bar_blk)
            .and(&a_blk)
            .and(&av)
            .for_each(|e, &tb, &ad, &a| *e -= 2.0 * a * ad * tb);
    }
    for mut bar_blk in tbar.axis_chunks_iter_mut(Axis(0), rows.max(1)) {
        Zip::from(&mut bar_blk).and(&av).for_each(|tb, &a| *tb *= 1.0 - a * a);
    }
    Zip::from(&mut vbar)
        .and(&av)
        .and(&extra)
        .for_each(|vb, &a, &e| *vb = *vb * (1.0 - a * a) + e);
    abar
}

/// Elementwise product of two dual stacks.
fn dual_mul(u: &Dual, v: &Dual) -> Dual {
    let rows = u.rows;
    let mut w = Dual {
        rows,
        data: Array2::zeros(u.data.raw_dim()),
    };
    let (u0, v0) = (u.value(), v.value());
    Zip::from(w.data.slice_mut(s![..rows, ..]))
        .and(&u0)
        .and(&v0)
        .for_each(|o, &a, &b| *o = a * b);
    for b in 1..u.blocks() {
        let sl = s![b * rows..(b + 1) * rows, ..];
        Zip::from(w.data.slice_mut(sl))
            .and(u.data.slice(sl))
            .and(v.data.slice(sl))
            .and(&u0)
            .and(&v0)
            .for_each(|o, &ud, &vd, &a, &bv| *o = ud * bv + a * vd);
    }
    w
}
