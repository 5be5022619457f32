//! Loss functionals and the training loop.
//!
//! The uniform loss is `max_j |L̂[φ](t_j, η_j)| + max_j |φ(T, p_j) − G(p_j)|`
//! over a sampled batch; the optimizer differentiates a log-sum-exp smoothing
//! of both maxima while the hard maxima are what gets reported. The L² loss
//! replaces both maxima by batch means of squares.

use std::sync::Mutex;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{MfcpSpec, ValueFunction};
use crate::network::{Architecture, DualEvaluation, DualLoss, LossCotangents, NetOutput, Network, ParameterVector};
use crate::simplex::{sample_uniform, SimplexPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Uniform,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Cosine warm-up over the first 30% of steps, cosine decay afterwards.
    OneCycle,
    Constant,
}

/// When a fresh collocation batch is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resampling {
    PerEpoch,
    PerStep,
}

/// Smooth-max temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Temperature {
    /// `τ = factor · max_j |v_j|`, recomputed per batch and not differentiated.
    Relative(f64),
    Absolute(f64),
}

impl Temperature {
    fn resolve(&self, max_abs: f64) -> f64 {
        match *self {
            Temperature::Relative(f) => f * max_abs,
            Temperature::Absolute(t) => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub loss: LossKind,
    /// Collocation points per batch (interior and terminal each).
    pub samples: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub peak_lr: f64,
    pub schedule: ScheduleKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    pub temperature: Temperature,
    /// Stop at the first epoch whose reported combined loss is below this.
    pub tolerance: Option<f64>,
    pub resampling: Resampling,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Uniform,
            samples: 10_000,
            epochs: 200,
            steps_per_epoch: 10,
            peak_lr: 8e-4,
            schedule: ScheduleKind::OneCycle,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            temperature: Temperature::Relative(0.01),
            tolerance: None,
            resampling: Resampling::PerEpoch,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    /// `E = 0` is accepted and makes training a no-op.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.samples == 0 {
            return fail("train.samples must be >= 1".into());
        }
        if self.steps_per_epoch == 0 {
            return fail("train.steps must be >= 1".into());
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return fail(format!("train.lr must be positive, got {}", self.peak_lr));
        }
        for (name, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return fail(format!("train.eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("train.weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(self.clip_norm > 0.0) {
            return fail(format!("train.clip_norm must be positive, got {}", self.clip_norm));
        }
        let tau = match self.temperature {
            Temperature::Relative(v) | Temperature::Absolute(v) => v,
        };
        if !(tau.is_finite() && tau > 0.0) {
            return fail(format!("train.tau must be positive, got {tau}"));
        }
        if let Some(d) = self.tolerance {
            if !(d > 0.0 && d < 1.0) {
                return fail(format!("train.tolerance must lie in (0, 1), got {d}"));
            }
        }
        Ok(())
    }
}

/// Interior points `(t, η)` and terminal points `(T, η)`, stored as network
/// input rows `(η, t)` together with lifted masses and terminal targets.
#[derive(Debug, Clone)]
pub struct CollocationBatch {
    interior: Array2<f64>,
    terminal: Array2<f64>,
    masses: Array2<f64>,
    targets: Array1<f64>,
}

impl CollocationBatch {
    pub fn new(spec: &MfcpSpec, interior: &[(f64, SimplexPoint)], terminal: &[SimplexPoint]) -> Result<Self> {
        if interior.is_empty() || terminal.is_empty() {
            return Err(Error::Config("collocation batch must be nonempty".into()));
        }
        let d = spec.dim;
        let mut x = Array2::zeros((interior.len(), d));
        let mut masses = Array2::zeros((interior.len(), d));
        for (j, (t, m)) in interior.iter().enumerate() {
            if !(0.0..=spec.horizon).contains(t) {
                return Err(Error::Config(format!("collocation time {t} outside [0, {}]", spec.horizon)));
            }
            check_dim(m, d)?;
            for k in 0..d - 1 {
                x[[j, k]] = m.coords()[k];
            }
            x[[j, d - 1]] = *t;
            masses.row_mut(j).assign(&ndarray::ArrayView1::from(m.coords()));
        }
        let mut xt = Array2::zeros((terminal.len(), d));
        let mut targets = Array1::zeros(terminal.len());
        for (j, p) in terminal.iter().enumerate() {
            check_dim(p, d)?;
            for k in 0..d - 1 {
                xt[[j, k]] = p.coords()[k];
            }
            xt[[j, d - 1]] = spec.horizon;
            targets[j] = spec.terminal_value(p);
        }
        Ok(Self {
            interior: x,
            terminal: xt,
            masses,
            targets,
        })
    }

    /// `k` interior points uniform on `[0, T] × S_d` and `k` independent
    /// terminal points uniform on `S_d`.
    pub fn sample<R: Rng + ?Sized>(spec: &MfcpSpec, k: usize, rng: &mut R) -> Result<Self> {
        let interior: Vec<_> = (0..k)
            .map(|_| {
                let t = rng.random_range(0.0..=spec.horizon);
                (t, sample_uniform(spec.dim, rng))
            })
            .collect();
        let terminal: Vec<_> = (0..k).map(|_| sample_uniform(spec.dim, rng)).collect();
        Self::new(spec, &interior, &terminal)
    }

    /// Rows `(η, t)`.
    pub fn interior_inputs(&self) -> ArrayView2<'_, f64> {
        self.interior.view()
    }

    /// Rows `(η, T)`.
    pub fn terminal_inputs(&self) -> ArrayView2<'_, f64> {
        self.terminal.view()
    }

    pub fn interior_len(&self) -> usize {
        self.interior.nrows()
    }

    pub fn terminal_len(&self) -> usize {
        self.terminal.nrows()
    }
}

fn check_dim(m: &SimplexPoint, d: usize) -> Result<()> {
    if m.dim() != d {
        return Err(Error::Config(format!("point of dimension {} in a batch for d = {d}", m.dim())));
    }
    Ok(())
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub epoch: usize,
    pub pde: f64,
    pub terminal: f64,
    pub combined: f64,
    /// Wall-clock seconds since training started.
    pub seconds: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "epoch,pde_loss,terminal_loss,combined_loss,seconds";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{:.3}", self.epoch, self.pde, self.terminal, self.combined, self.seconds)
    }
}

/// Loss value split into its PDE and terminal parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub combined: f64,
    pub pde: f64,
    pub terminal: f64,
}

impl LossParts {
    fn new(pde: f64, terminal: f64) -> Self {
        Self {
            combined: pde + terminal,
            pde,
            terminal,
        }
    }
}

/// `τ · log Σ exp(v_k / τ)`, shifted by the maximum for stability.
///
/// Panics on empty input or nonpositive `τ`.
pub fn smooth_max(values: &[f64], tau: f64) -> f64 {
    assert!(!values.is_empty(), "smooth_max of an empty vector");
    assert!(tau > 0.0, "smooth_max temperature must be positive");
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|v| ((v - max) / tau).exp()).sum();
    max + tau * sum.ln()
}

/// Smooth max of `|v|` and its gradient `∂/∂v_k = softmax_k · sign(v_k)`.
fn smooth_abs_max(values: &[f64], temperature: Temperature) -> (f64, Vec<f64>) {
    let max = values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let tau = temperature.resolve(max);
    if max == 0.0 || !(tau > 0.0) {
        let n = values.len() as f64;
        let bump = if tau > 0.0 { tau * n.ln() } else { 0.0 };
        return (max + bump, vec![0.0; values.len()]);
    }
    let weights: Vec<f64> = values.iter().map(|v| ((v.abs() - max) / tau).exp()).collect();
    let sum: f64 = weights.iter().sum();
    let grad = weights.iter().zip(values).map(|(w, v)| w / sum * v.signum()).collect();
    (max + tau * sum.ln(), grad)
}

fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
}

fn mean_square(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64
}

/// Residuals, their sensitivities to `∇η φ`, and terminal mismatches.
struct PointErrors {
    residual: Vec<f64>,
    sens: Array2<f64>,
    terminal: Vec<f64>,
}

fn point_errors(spec: &MfcpSpec, batch: &CollocationBatch, interior: &NetOutput, terminal: &Array1<f64>, with_sens: bool) -> Result<PointErrors> {
    let d = spec.dim;
    let grad = interior
        .grad
        .as_ref()
        .ok_or_else(|| Error::Config("interior outputs lack input gradients".into()))?;
    let k = batch.interior_len();
    let mut residual = Vec::with_capacity(k);
    let mut sens = Array2::zeros((if with_sens { k } else { 0 }, d - 1));
    let mut p = vec![0.0; d - 1];
    let mut s = vec![0.0; d - 1];
    for j in 0..k {
        let row = grad.row(j);
        for (c, pc) in p.iter_mut().enumerate() {
            *pc = row[c];
        }
        let m = batch.masses.row(j);
        let m = m.as_slice().expect("mass rows are contiguous");
        let r = spec.residual_raw(m, row[d - 1], &p, with_sens.then_some(s.as_mut_slice()));
        if with_sens {
            for (c, sc) in s.iter().enumerate() {
                sens[[j, c]] = *sc;
            }
        }
        residual.push(r);
    }
    if residual.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("PDE residual".into()));
    }
    let terminal: Vec<f64> = terminal.iter().zip(&batch.targets).map(|(v, g)| v - g).collect();
    if terminal.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("terminal mismatch".into()));
    }
    Ok(PointErrors { residual, sens, terminal })
}

/// Reported (unsmoothed) loss from batch errors.
fn report_parts(kind: LossKind, e: &PointErrors) -> LossParts {
    match kind {
        LossKind::Uniform => LossParts::new(max_abs(&e.residual), max_abs(&e.terminal)),
        LossKind::L2 => LossParts::new(mean_square(&e.residual), mean_square(&e.terminal)),
    }
}

/// The differentiated training objective on one batch. Records the reported
/// loss of the latest evaluation.
struct BatchObjective<'a> {
    spec: &'a MfcpSpec,
    batch: &'a CollocationBatch,
    kind: LossKind,
    temperature: Temperature,
    reported: Mutex<Option<LossParts>>,
}

impl DualLoss for BatchObjective<'_> {
    fn evaluate(&self, interior: &NetOutput, terminal: &Array1<f64>) -> Result<LossCotangents> {
        let e = point_errors(self.spec, self.batch, interior, terminal, true)?;
        *self.reported.lock().expect("loss record poisoned") = Some(report_parts(self.kind, &e));
        let (loss, r_bar, e_bar) = match self.kind {
            LossKind::Uniform => {
                let (pde, r_bar) = smooth_abs_max(&e.residual, self.temperature);
                let (term, e_bar) = smooth_abs_max(&e.terminal, self.temperature);
                (pde + term, r_bar, e_bar)
            }
            LossKind::L2 => {
                let nr = e.residual.len() as f64;
                let ne = e.terminal.len() as f64;
                let r_bar = e.residual.iter().map(|r| 2.0 * r / nr).collect();
                let e_bar = e.terminal.iter().map(|v| 2.0 * v / ne).collect();
                (mean_square(&e.residual) + mean_square(&e.terminal), r_bar, e_bar)
            }
        };
        let d = self.spec.dim;
        let k = e.residual.len();
        let mut interior_grad = Array2::zeros((k, d));
        for (j, rb) in r_bar.iter().enumerate() {
            for c in 0..d - 1 {
                interior_grad[[j, c]] = rb * e.sens[[j, c]];
            }
            interior_grad[[j, d - 1]] = -rb;
        }
        Ok(LossCotangents {
            loss,
            interior_value: Array1::zeros(k),
            interior_grad,
            terminal_value: Array1::from(e_bar),
        })
    }
}

fn network_errors(net: &Network, theta: &ParameterVector, spec: &MfcpSpec, batch: &CollocationBatch) -> Result<PointErrors> {
    check_arch(net.arch(), spec)?;
    let interior = net.forward(theta, batch.interior_inputs(), true)?;
    let terminal = net.forward(theta, batch.terminal_inputs(), false)?.value;
    point_errors(spec, batch, &interior, &terminal, false)
}

fn value_function_errors(value: &dyn ValueFunction, spec: &MfcpSpec, batch: &CollocationBatch) -> Result<PointErrors> {
    let d = spec.dim;
    if value.dim() != d {
        return Err(Error::Config(format!("value function has d = {}, problem has d = {d}", value.dim())));
    }
    let x = batch.interior_inputs();
    let mut vals = Array1::zeros(x.nrows());
    let mut grad = Array2::zeros((x.nrows(), d));
    for (j, row) in x.rows().into_iter().enumerate() {
        let row = row.to_vec();
        let ev = value.eval(row[d - 1], &row[..d - 1])?;
        vals[j] = ev.value;
        for c in 0..d - 1 {
            grad[[j, c]] = ev.deta[c];
        }
        grad[[j, d - 1]] = ev.dt;
    }
    let xt = batch.terminal_inputs();
    let mut term = Array1::zeros(xt.nrows());
    for (j, row) in xt.rows().into_iter().enumerate() {
        let row = row.to_vec();
        term[j] = value.eval(row[d - 1], &row[..d - 1])?.value;
    }
    let out = NetOutput {
        value: vals,
        grad: Some(grad),
    };
    point_errors(spec, batch, &out, &term, false)
}

/// Hard-max uniform loss of the network on a batch.
pub fn sampled_uniform_loss(net: &Network, theta: &ParameterVector, spec: &MfcpSpec, batch: &CollocationBatch) -> Result<LossParts> {
    Ok(report_parts(LossKind::Uniform, &network_errors(net, theta, spec, batch)?))
}

/// Mean-square residual plus mean-square terminal mismatch of the network.
pub fn sampled_l2_loss(net: &Network, theta: &ParameterVector, spec: &MfcpSpec, batch: &CollocationBatch) -> Result<LossParts> {
    Ok(report_parts(LossKind::L2, &network_errors(net, theta, spec, batch)?))
}

/// [`sampled_uniform_loss`] for any value function with derivatives.
pub fn uniform_loss_of(value: &dyn ValueFunction, spec: &MfcpSpec, batch: &CollocationBatch) -> Result<LossParts> {
    Ok(report_parts(LossKind::Uniform, &value_function_errors(value, spec, batch)?))
}

/// [`sampled_l2_loss`] for any value function with derivatives.
pub fn l2_loss_of(value: &dyn ValueFunction, spec: &MfcpSpec, batch: &CollocationBatch) -> Result<LossParts> {
    Ok(report_parts(LossKind::L2, &value_function_errors(value, spec, batch)?))
}

/// Smoothed training objective and its parameter gradient on a batch.
pub fn objective_gradient(
    net: &Network,
    theta: &ParameterVector,
    spec: &MfcpSpec,
    batch: &CollocationBatch,
    kind: LossKind,
    temperature: Temperature,
) -> Result<(f64, ParameterVector, LossParts)> {
    check_arch(net.arch(), spec)?;
    let objective = BatchObjective {
        spec,
        batch,
        kind,
        temperature,
        reported: Mutex::new(None),
    };
    let (loss, grad) = net.loss_gradient(theta, batch.interior_inputs(), batch.terminal_inputs(), &objective)?;
    let parts = objective
        .reported
        .into_inner()
        .expect("loss record poisoned")
        .expect("loss was evaluated");
    Ok((loss, grad, parts))
}

fn check_arch(arch: &Architecture, spec: &MfcpSpec) -> Result<()> {
    if arch.dim != spec.dim {
        return Err(Error::Config(format!("network is built for d = {}, problem has d = {}", arch.dim, spec.dim)));
    }
    Ok(())
}

/// One-cycle rate at `step` of `total`: cosine warm-up from `peak/25` to
/// `peak` over the first `⌊0.3·total⌋` steps, then cosine decay to
/// `peak/(25·10⁴)` at the final step.
pub fn lr_schedule(step: usize, total: usize, peak: f64) -> f64 {
    const DIV: f64 = 25.0;
    const FINAL_DIV: f64 = 1e4;
    let start = peak / DIV;
    let end = start / FINAL_DIV;
    let warm = (0.3 * total as f64).floor() as usize;
    let cosine = |from: f64, to: f64, frac: f64| to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
    if step < warm {
        return cosine(start, peak, step as f64 / warm as f64);
    }
    let span = total.saturating_sub(1).saturating_sub(warm);
    if span == 0 {
        return if step == 0 { start } else { end };
    }
    cosine(peak, end, ((step - warm) as f64 / span as f64).min(1.0))
}

/// Adaptive moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1,
            beta2,
            eps,
            weight_decay,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((w, g), m), v) in theta.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
            *w -= lr * (update + self.weight_decay * *w);
        }
    }
}

/// Rescales `grad` to global norm at most `max_norm`; returns the original norm.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub params: ParameterVector,
    pub history: Vec<LossReport>,
    pub stopped_early: bool,
}

/// Trains from the seeded initialization.
pub fn train(spec: &MfcpSpec, arch: &Architecture, cfg: &TrainingConfig) -> Result<TrainingRun> {
    train_with(spec, arch, cfg, None, &mut |_| {})
}

/// Trains from `init` (or the seeded initialization), calling `observer`
/// after every epoch.
pub fn train_with(
    spec: &MfcpSpec,
    arch: &Architecture,
    cfg: &TrainingConfig,
    init: Option<ParameterVector>,
    observer: &mut dyn FnMut(&LossReport),
) -> Result<TrainingRun> {
    spec.validate()?;
    cfg.validate()?;
    let net = Network::new(arch.clone())?;
    check_arch(arch, spec)?;
    let mut theta = init.unwrap_or_else(|| net.init_params(cfg.seed));
    if theta.len() != net.param_count() {
        return Err(Error::Config(format!(
            "initial parameters have length {}, architecture expects {}",
            theta.len(),
            net.param_count()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(theta.len(), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let total = cfg.epochs * cfg.steps_per_epoch;
    let start = Instant::now();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        let diverged = |e: Error| match e {
            Error::NonFinite(what) => Error::Divergence { epoch, reason: format!("non-finite {what}") },
            other => other,
        };
        let mut batch = CollocationBatch::sample(spec, cfg.samples, &mut rng)?;
        let mut parts = None;
        for s in 0..cfg.steps_per_epoch {
            if s > 0 && cfg.resampling == Resampling::PerStep {
                batch = CollocationBatch::sample(spec, cfg.samples, &mut rng)?;
            }
            let lr = match cfg.schedule {
                ScheduleKind::OneCycle => lr_schedule(step, total, cfg.peak_lr),
                ScheduleKind::Constant => cfg.peak_lr,
            };
            let (_, mut grad, reported) =
                objective_gradient(&net, &theta, spec, &batch, cfg.loss, cfg.temperature).map_err(diverged)?;
            if !grad.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    reason: "non-finite parameter gradient".into(),
                });
            }
            clip_global_norm(grad.as_mut_slice(), cfg.clip_norm);
            adam.step(theta.as_mut_slice(), grad.as_slice(), lr);
            if !theta.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    reason: "non-finite parameters".into(),
                });
            }
            parts = Some(reported);
            step += 1;
        }
        let parts = parts.expect("at least one step per epoch");
        let report = LossReport {
            epoch,
            pde: parts.pde,
            terminal: parts.terminal,
            combined: parts.combined,
            seconds: start.elapsed().as_secs_f64(),
        };
        observer(&report);
        history.push(report);
        if cfg.tolerance.is_some_and(|delta| parts.combined < delta) {
            return Ok(TrainingRun {
                params: theta,
                history,
                stopped_early: true,
            });
        }
    }
    Ok(TrainingRun {
        params: theta,
        history,
        stopped_early: false,
    })
}

/// A network with fixed parameters viewed as a value function.
#[derive(Debug, Clone)]
pub struct NetworkValue {
    pub network: Network,
    pub params: ParameterVector,
}

impl NetworkValue {
    pub fn new(network: Network, params: ParameterVector) -> Result<Self> {
        if params.len() != network.param_count() {
            return Err(Error::Config(format!(
                "parameter vector has length {}, architecture expects {}",
                params.len(),
                network.param_count()
            )));
        }
        Ok(Self { network, params })
    }
}

impl ValueFunction for NetworkValue {
    fn dim(&self) -> usize {
        self.network.arch().dim
    }

    fn eval(&self, t: f64, eta: &[f64]) -> Result<DualEvaluation> {
        self.network.evaluate(&self.params, t, eta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CostMatrix, StateCost, TerminalCost};
    use crate::network::LayerKind;

    fn small_arch(d: usize) -> Architecture {
        Architecture::new(d, LayerKind::Gated, 2, 6)
    }

    fn small_cfg() -> TrainingConfig {
        TrainingConfig {
            samples: 64,
            epochs: 5,
            steps_per_epoch: 3,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn smooth_max_examples() {
        assert_eq!(smooth_max(&[5.0], 0.3), 5.0);
        assert!((smooth_max(&[0.0, 0.0], 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!((smooth_max(&[0.0, 100.0], 1.0) - 100.0).abs() < 1e-10);
    }

    #[test]
    fn smooth_max_bounds_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let n = rng.random_range(1..50);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1e3..1e3)).collect();
            let tau = rng.random_range(1e-3..10.0);
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s = smooth_max(&v, tau);
            assert!(s >= max && s <= max + tau * (n as f64).ln() + 1e-9);
            let mut w = v.clone();
            let k = rng.random_range(0..n);
            w[k] += rng.random_range(0.0..1.0);
            assert!(smooth_max(&w, tau) >= s);
        }
    }

    #[test]
    fn smooth_abs_max_gradient_matches_finite_differences() {
        let v = [0.3, -0.8, 0.75, 0.1, -0.79];
        let temp = Temperature::Absolute(0.05);
        let (_, g) = smooth_abs_max(&v, temp);
        for k in 0..v.len() {
            let h = 1e-7;
            let (mut up, mut dn) = (v, v);
            up[k] += h;
            dn[k] -= h;
            let fd = (smooth_abs_max(&up, temp).0 - smooth_abs_max(&dn, temp).0) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn lr_schedule_examples() {
        let peak = 8e-4;
        let total = 2000;
        assert_eq!(lr_schedule(600, total, peak), peak);
        assert!((lr_schedule(0, total, peak) - peak / 25.0).abs() < 1e-18);
        assert!(lr_schedule(total - 1, total, peak) <= peak / 1e4);
        let mut prev = 0.0;
        for s in 0..=600 {
            let lr = lr_schedule(s, total, peak);
            assert!(lr >= prev);
            prev = lr;
        }
        for s in 601..total {
            let lr = lr_schedule(s, total, peak);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut adam = Adam::new(2, 0.9, 0.999, 1e-8, 0.0);
        let mut w = [1.0, -1.0];
        adam.step(&mut w, &[3.0, -0.5], 0.1);
        assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = [3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut small = [0.1, 0.2];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, [0.1, 0.2]);
    }

    fn single_point_batch(spec: &MfcpSpec) -> CollocationBatch {
        let m = SimplexPoint::new(vec![0.3, 0.7]).unwrap();
        let p = SimplexPoint::new(vec![0.6, 0.4]).unwrap();
        CollocationBatch::new(spec, &[(0.25, m)], &[p]).unwrap()
    }

    #[test]
    fn single_point_uniform_loss_is_residual_plus_mismatch() {
        let spec = MfcpSpec::example(2);
        let net = Network::new(small_arch(2)).unwrap();
        let theta = net.init_params(3);
        let batch = single_point_batch(&spec);
        let loss = sampled_uniform_loss(&net, &theta, &spec, &batch).unwrap();
        let m = SimplexPoint::new(vec![0.3, 0.7]).unwrap();
        let ev = net.evaluate(&theta, 0.25, &[0.3]).unwrap();
        let r = spec.hjb_residual(&ev, 0.25, &m.project());
        let e = net.evaluate(&theta, 1.0, &[0.6]).unwrap().value - (0.36 + 0.16);
        assert!((loss.combined - (r.abs() + e.abs())).abs() < 1e-14);
        assert!((loss.pde - r.abs()).abs() < 1e-14);
    }

    #[test]
    fn duplicated_batch_keeps_hard_max_and_mean() {
        let spec = MfcpSpec::example(3);
        let net = Network::new(small_arch(3)).unwrap();
        let theta = net.init_params(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let interior: Vec<_> = (0..20).map(|_| (rng.random_range(0.0..1.0), sample_uniform(3, &mut rng))).collect();
        let terminal: Vec<_> = (0..20).map(|_| sample_uniform(3, &mut rng)).collect();
        let batch = CollocationBatch::new(&spec, &interior, &terminal).unwrap();
        let doubled = CollocationBatch::new(&spec, &[interior.clone(), interior.clone()].concat(), &[terminal.clone(), terminal.clone()].concat()).unwrap();
        assert_eq!(
            sampled_uniform_loss(&net, &theta, &spec, &batch).unwrap(),
            sampled_uniform_loss(&net, &theta, &spec, &doubled).unwrap()
        );
        let mut rev_i = interior.clone();
        rev_i.reverse();
        let mut rev_t = terminal.clone();
        rev_t.reverse();
        let permuted = CollocationBatch::new(&spec, &rev_i, &rev_t).unwrap();
        let a = sampled_l2_loss(&net, &theta, &spec, &batch).unwrap();
        let b = sampled_l2_loss(&net, &theta, &spec, &permuted).unwrap();
        assert!((a.combined - b.combined).abs() <= 1e-15 * a.combined.max(1.0));
        assert!(a.pde >= 0.0 && a.terminal >= 0.0);
    }

    /// `f ≡ 0`, `g ≡ c`: `V ≡ c` is exact and a bias-only network represents it.
    #[test]
    fn uniform_loss_vanishes_exactly_for_exact_solution() {
        let c = 0.4;
        let spec = MfcpSpec::new(3, 1.0, 1.0, CostMatrix::ones(3), StateCost::Zero, TerminalCost::Constant(c)).unwrap();
        for kind in [LayerKind::Gated, LayerKind::Plain] {
            let net = Network::new(Architecture::new(3, kind, 2, 5)).unwrap();
            let mut theta = ParameterVector::zeros(net.param_count());
            let last = theta.len() - 1;
            theta.as_mut_slice()[last] = c;
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let batch = CollocationBatch::sample(&spec, 100, &mut rng).unwrap();
            let loss = sampled_uniform_loss(&net, &theta, &spec, &batch).unwrap();
            // G = c Σ m_i carries one rounding of the mass sum
            assert_eq!(loss.pde, 0.0);
            assert!(loss.terminal <= 4.0 * f64::EPSILON);
            theta.as_mut_slice()[last] = c + 0.1;
            let loss = sampled_uniform_loss(&net, &theta, &spec, &batch).unwrap();
            assert_eq!(loss.pde, 0.0);
            assert!((loss.terminal - 0.1).abs() < 1e-14);
        }
    }

    #[test]
    fn l2_loss_of_constant_errors() {
        // V ≡ b with f ≡ 0 and g ≡ c gives residual 0 and terminal error b − c everywhere.
        let spec = MfcpSpec::new(2, 1.0, 1.0, CostMatrix::ones(2), StateCost::Zero, TerminalCost::Constant(0.0)).unwrap();
        let net = Network::new(small_arch(2)).unwrap();
        let mut theta = ParameterVector::zeros(net.param_count());
        let last = theta.len() - 1;
        theta.as_mut_slice()[last] = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = CollocationBatch::sample(&spec, 50, &mut rng).unwrap();
        let loss = sampled_l2_loss(&net, &theta, &spec, &batch).unwrap();
        assert!((loss.combined - 0.09).abs() < 1e-15);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let spec = MfcpSpec::example(3);
        let net = Network::new(small_arch(3)).unwrap();
        let theta = net.init_params(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = CollocationBatch::sample(&spec, 40, &mut rng).unwrap();
        let temp = Temperature::Absolute(0.05);
        for kind in [LossKind::Uniform, LossKind::L2] {
            let (_, grad, _) = objective_gradient(&net, &theta, &spec, &batch, kind, temp).unwrap();
            let dir: Vec<f64> = (0..theta.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h = 1e-6;
            let shifted = |sign: f64| {
                let v: Vec<f64> = theta.as_slice().iter().zip(&dir).map(|(w, d)| w + sign * h * d).collect();
                objective_gradient(&net, &ParameterVector::new(v), &spec, &batch, kind, temp).unwrap().0
            };
            let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
            let analytic: f64 = grad.as_slice().iter().zip(&dir).map(|(g, d)| g * d).sum();
            assert!((fd - analytic).abs() <= 1e-5 * analytic.abs().max(1.0), "{kind:?}: fd {fd} analytic {analytic}");
        }
    }

    #[test]
    fn zero_epochs_return_initial_parameters() {
        let spec = MfcpSpec::example(2);
        let arch = small_arch(2);
        let cfg = TrainingConfig { epochs: 0, ..small_cfg() };
        let run = train(&spec, &arch, &cfg).unwrap();
        assert!(run.history.is_empty());
        assert_eq!(run.params, Network::new(arch).unwrap().init_params(cfg.seed));
    }

    #[test]
    fn training_is_deterministic() {
        let spec = MfcpSpec::example(3);
        let arch = small_arch(3);
        let a = train(&spec, &arch, &small_cfg()).unwrap();
        let b = train(&spec, &arch, &small_cfg()).unwrap();
        let strip = |h: &[LossReport]| h.iter().map(|r| (r.epoch, r.pde, r.terminal, r.combined)).collect::<Vec<_>>();
        assert_eq!(strip(&a.history), strip(&b.history));
        assert_eq!(a.params, b.params);
        let c = train(&spec, &arch, &TrainingConfig { seed: 1, ..small_cfg() }).unwrap();
        assert_ne!(a.params, c.params);
        assert_eq!(a.history.len(), 5);
    }

    #[test]
    fn tolerance_stops_at_epoch_boundary() {
        let spec = MfcpSpec::example(2);
        let cfg = TrainingConfig {
            tolerance: Some(0.999_999),
            ..small_cfg()
        };
        // the early-stopped history must be a prefix of the full one
        let full = train(&spec, &small_arch(2), &small_cfg()).unwrap();
        let run = train(&spec, &small_arch(2), &cfg).unwrap();
        let first_below = full.history.iter().position(|r| r.combined < 0.999_999);
        match first_below {
            Some(k) => {
                assert!(run.stopped_early);
                assert_eq!(run.history.len(), k + 1);
            }
            None => {
                assert!(!run.stopped_early);
                assert_eq!(run.history.len(), full.history.len());
            }
        }
    }

    #[test]
    fn per_step_resampling_changes_the_trajectory() {
        let spec = MfcpSpec::example(2);
        let a = train(&spec, &small_arch(2), &small_cfg()).unwrap();
        let cfg = TrainingConfig {
            resampling: Resampling::PerStep,
            ..small_cfg()
        };
        let b = train(&spec, &small_arch(2), &cfg).unwrap();
        assert_ne!(a.params, b.params);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            TrainingConfig { samples: 0, ..small_cfg() },
            TrainingConfig { steps_per_epoch: 0, ..small_cfg() },
            TrainingConfig { temperature: Temperature::Relative(0.0), ..small_cfg() },
            TrainingConfig { tolerance: Some(1.0), ..small_cfg() },
            TrainingConfig { peak_lr: -1.0, ..small_cfg() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn csv_row_format() {
        let r = LossReport {
            epoch: 3,
            pde: 0.5,
            terminal: 0.25,
            combined: 0.75,
            seconds: 1.23456,
        };
        assert_eq!(r.csv_row(), "3,0.5,0.25,0.75,1.235");
    }
}
