//! Acceptance checks 1–10. Each test prints one `criterion N: PASS|FAIL` line
//! straight to the process stdout so it shows up without `--nocapture`.
//!
//! Trained networks are shared between criteria through `OnceLock`s, so the
//! whole target costs a handful of full training runs.

use std::io::Write as _;
use std::sync::OnceLock;
use std::time::Instant;

use mfc_dgm::model::{ControlMatrix, MfcpSpec, ValueFunction};
use mfc_dgm::network::{Architecture, LayerKind, Network, ParameterVector};
use mfc_dgm::oracle::{self, ConstantPolicy, FeedbackPolicy, OpenLoopConfig, ValueGrid};
use mfc_dgm::simplex::{sample_uniform, SimplexPoint};
use mfc_dgm::solver::{self, CollocationBatch, LossKind, LossReport, Temperature, TrainingRun};
use mfc_dgm_cli::commands::{compare_with_grid, grid_oracle, COMPARE_BAND};
use mfc_dgm_cli::{Checkpoint, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: usize, pass: bool, detail: String) {
    let line = format!("criterion {n:>2}: {} | {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "criterion {n} failed: {detail}");
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

struct Trained {
    cfg: RunConfig,
    run: TrainingRun,
    seconds: f64,
}

impl Trained {
    fn final_loss(&self) -> f64 {
        self.run.history.last().expect("at least one epoch").combined
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.cfg.arch.clone(), self.cfg.problem.clone(), self.run.params.clone()).unwrap()
    }
}

fn train(d: usize, samples: usize, loss: LossKind, seed: u64) -> Trained {
    let mut cfg = RunConfig::default_for(d).with_seed(seed);
    cfg.train.samples = samples;
    cfg.train.loss = loss;
    let started = Instant::now();
    let run = solver::train(&cfg.problem, &cfg.arch, &cfg.training()).expect("training completes");
    Trained {
        cfg,
        run,
        seconds: started.elapsed().as_secs_f64(),
    }
}

/// Default d = 2 runs, seeds 0..3; seed 0 is the reference network.
fn default_d2(seed: usize) -> &'static Trained {
    static RUNS: [OnceLock<Trained>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    RUNS[seed].get_or_init(|| train(2, 10_000, LossKind::Uniform, seed as u64))
}

fn reference_grid() -> &'static ValueGrid {
    static GRID: OnceLock<ValueGrid> = OnceLock::new();
    GRID.get_or_init(|| grid_oracle(&MfcpSpec::example(2), 200).unwrap())
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn criterion_01_gradient_exactness() {
    let started = Instant::now();
    let mut worst_input: f64 = 0.0;
    let mut worst_param: f64 = 0.0;
    let mut failures = Vec::new();
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + case);
        let d = rng.random_range(2..=5);
        let kind = if rng.random_bool(0.5) { LayerKind::Gated } else { LayerKind::Plain };
        let arch = Architecture::new(d, kind, rng.random_range(1..=3), rng.random_range(2..=8));
        let net = Network::new(arch).unwrap();
        let mut theta = net.init_params(case);
        for w in theta.as_mut_slice() {
            *w += rng.random_range(-0.1..0.1);
        }
        let spec = MfcpSpec::example(d);

        let t = rng.random_range(0.0..1.0);
        let m = sample_uniform(d, &mut rng);
        let eta = m.coords()[..d - 1].to_vec();
        let e = net.evaluate(&theta, t, &eta).unwrap();
        let f = |t: f64, eta: &[f64]| net.evaluate(&theta, t, eta).unwrap().value;
        let h = 1e-5;
        let fd_t = (f(t + h, &eta) - f(t - h, &eta)) / (2.0 * h);
        let mut pairs = vec![(e.dt, fd_t)];
        for c in 0..d - 1 {
            let (mut up, mut dn) = (eta.clone(), eta.clone());
            up[c] += h;
            dn[c] -= h;
            pairs.push((e.deta[c], (f(t, &up) - f(t, &dn)) / (2.0 * h)));
        }
        for (an, fd) in pairs {
            worst_input = worst_input.max((an - fd).abs() / an.abs().max(fd.abs()).max(1.0));
            if !rel_close(an, fd, 1e-6) {
                failures.push(format!("case {case}: input gradient {an} vs {fd}"));
            }
        }

        let batch = CollocationBatch::sample(&spec, 16, &mut rng).unwrap();
        let loss = if case % 2 == 0 { LossKind::Uniform } else { LossKind::L2 };
        let temp = Temperature::Absolute(0.05);
        let (_, grad, _) = solver::objective_gradient(&net, &theta, &spec, &batch, loss, temp).unwrap();
        let dir: Vec<f64> = (0..theta.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hp = 1e-6;
        let shifted = |sign: f64| {
            let v: Vec<f64> = theta.as_slice().iter().zip(&dir).map(|(w, d)| w + sign * hp * d).collect();
            solver::objective_gradient(&net, &ParameterVector::new(v), &spec, &batch, loss, temp).unwrap().0
        };
        let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * hp);
        let an: f64 = grad.as_slice().iter().zip(&dir).map(|(g, d)| g * d).sum();
        worst_param = worst_param.max((an - fd).abs() / an.abs().max(fd.abs()).max(1.0));
        if !rel_close(an, fd, 1e-5) {
            failures.push(format!("case {case}: directional parameter derivative {an} vs {fd}"));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    report(
        1,
        failures.is_empty() && secs < 60.0,
        format!("worst input rel err {worst_input:.2e} (tol 1e-6), worst parameter rel err {worst_param:.2e} (tol 1e-5), {secs:.1}s; {failures:?}"),
    );
}

/// `sup` over a joint action grid of `−Σ a_j z_j − running cost`.
fn brute_force_hamiltonian(spec: &MfcpSpec, i: usize, m: &SimplexPoint, z: &[f64], step: f64) -> f64 {
    let d = spec.dim;
    let others: Vec<usize> = (0..d).filter(|&j| j != i).collect();
    let n = (spec.max_rate / step).round() as usize;
    let mut idx = vec![0usize; others.len()];
    let mut best = f64::NEG_INFINITY;
    loop {
        let mut a = vec![0.0; d];
        for (k, &j) in others.iter().enumerate() {
            a[j] = idx[k] as f64 * step;
        }
        let drift: f64 = others.iter().map(|&j| a[j] * z[j]).sum();
        best = best.max(-drift - spec.running_cost(0.0, i, &a, m));
        let mut k = 0;
        loop {
            if k == idx.len() {
                return best;
            }
            idx[k] += 1;
            if idx[k] <= n {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

#[test]
fn criterion_02_hamiltonian_matches_brute_force() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for n in 0..1000 {
        let d = if n % 2 == 0 { 2 } else { 3 };
        let spec = MfcpSpec::example(d);
        let m = sample_uniform(d, &mut rng);
        let i = rng.random_range(0..d);
        let mut z: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        z[i] = 0.0;
        let closed = spec.hamiltonian(i, 0.0, &m, &z);
        let brute = brute_force_hamiltonian(&spec, i, &m, &z, 0.01);
        worst = worst.max((closed - brute).abs());
    }
    let secs = started.elapsed().as_secs_f64();
    report(2, worst <= 1e-4 && secs < 60.0, format!("max |closed form − action grid| = {worst:.2e} over 1000 inputs (tol 1e-4), {secs:.1}s"));
}

#[test]
fn criterion_03_fokker_planck_closed_form() {
    let spec = MfcpSpec::example(2);
    let mut worst: f64 = 0.0;
    for c in [0.25, 0.6, 1.0] {
        for mu0 in [0.05, 0.5, 0.9] {
            let rates = ControlMatrix::new(2, vec![0.0, c, c, 0.0], spec.max_rate).unwrap();
            let m0 = SimplexPoint::new(vec![mu0, 1.0 - mu0]).unwrap();
            let path = oracle::integrate_forward(&m0, &ConstantPolicy(rates), 0.0, spec.horizon, 1000).unwrap();
            for (k, m) in path.iter().enumerate() {
                let t = spec.horizon * k as f64 / 1000.0;
                let exact = 0.5 + (mu0 - 0.5) * (-2.0 * c * t).exp();
                worst = worst.max((m.coords()[0] - exact).abs());
            }
        }
    }
    report(3, worst <= 1e-8, format!("max |μ₁ − closed form| = {worst:.2e} at 1000 RK4 steps (tol 1e-8)"));
}

#[test]
fn criterion_04_grid_oracle_self_consistency() {
    let started = Instant::now();
    let spec = MfcpSpec::example(2);
    let grids: Vec<ValueGrid> = [25, 50, 100].iter().map(|&n| grid_oracle(&spec, n).unwrap()).collect();
    // sup differences at t = 0 on the coarsest lattice
    let coarse = &grids[0];
    let diff = |a: &ValueGrid, b: &ValueGrid| {
        (0..coarse.node_count())
            .map(|node| {
                let m = coarse.node_mass(node);
                let va = a.value(0, a.node_at(&m).unwrap());
                let vb = b.value(0, b.node_at(&m).unwrap());
                (va - vb).abs()
            })
            .fold(0.0, f64::max)
    };
    let (d1, d2) = (diff(&grids[0], &grids[1]), diff(&grids[1], &grids[2]));
    let ratio = d1 / d2;

    let fine = reference_grid();
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    for m1 in [0.5, 0.8] {
        let m0 = SimplexPoint::new(vec![m1, 1.0 - m1]).unwrap();
        let open_loop = oracle::optimize_open_loop(&spec, &m0, 0.0, &OpenLoopConfig::default()).unwrap().cost;
        let grid = fine.eval(0.0, &[m1]).unwrap().value;
        worst = worst.max((open_loop - grid).abs());
        notes.push(format!("m₁={m1}: grid {grid:.5} vs open loop {open_loop:.5}"));
    }
    let secs = started.elapsed().as_secs_f64();
    report(
        4,
        (1.5..=3.0).contains(&ratio) && worst <= 5e-3 && secs < 300.0,
        format!("refinement ratio {ratio:.3} (diffs {d1:.2e}, {d2:.2e}); {}; max gap {worst:.2e} (tol 5e-3); {secs:.1}s", notes.join(", ")),
    );
}

#[test]
fn criterion_05_d2_default_training_loss() {
    let run = default_d2(0);
    let loss = run.final_loss();
    // ten times the reported 47.5 s
    let budget = 475.0;
    report(
        5,
        loss <= 1.6 && run.seconds <= budget,
        format!("final combined loss {loss:.4} (≤ 1.6; reference 1.2134), wall {:.1}s (budget {budget}s)", run.seconds),
    );
}

#[test]
fn criterion_06_dimension_trend() {
    // Reduced sample count so nine runs fit the time budget; see README.
    const SAMPLES: usize = 2000;
    let started = Instant::now();
    let mut medians = Vec::new();
    for d in [2, 5, 10] {
        let losses: Vec<f64> = (0..3).map(|seed| train(d, SAMPLES, LossKind::Uniform, seed).final_loss()).collect();
        medians.push((d, median(losses.clone()), losses));
    }
    let secs = started.elapsed().as_secs_f64();
    let monotone = medians.windows(2).all(|w| w[1].1 <= w[0].1);
    let detail: Vec<String> = medians.iter().map(|(d, med, all)| format!("d={d}: median {med:.4} of {all:.4?}")).collect();
    report(
        6,
        monotone && secs < 1800.0,
        format!("{} (K = {SAMPLES}); nonincreasing: {monotone}; {secs:.0}s", detail.join("; ")),
    );
}

#[test]
fn criterion_07_uniform_gap_to_grid_oracle() {
    let r = compare_with_grid(&default_d2(0).checkpoint(), reference_grid(), COMPARE_BAND).unwrap();
    report(
        7,
        r.sup_gap <= 5e-2,
        format!("interior sup gap {:.4} (tol 5e-2), mean {:.4}, {} points, band {}", r.sup_gap, r.mean_gap, r.nodes, r.band),
    );
}

#[test]
fn criterion_08_n_agent_gap_trend() {
    const NS: [usize; 3] = [10, 100, 1000];
    const REPS: usize = 200;
    let trained = default_d2(0);
    let started = Instant::now();
    let spec = trained.cfg.problem.clone();
    let value = trained.checkpoint().value_function().unwrap();
    let m0 = SimplexPoint::new(vec![0.8, 0.2]).unwrap();
    let phi0 = value.eval(0.0, &[0.8]).unwrap().value;
    let policy = FeedbackPolicy::new(spec.clone(), &value).unwrap();
    let mut medians = Vec::new();
    for n in NS {
        let gaps: Vec<f64> = (0..5)
            .map(|seed| (oracle::simulate_n_agents(&spec, &policy, n, &m0, REPS, seed).unwrap().mean - phi0).abs())
            .collect();
        medians.push(median(gaps));
    }
    let secs = started.elapsed().as_secs_f64();
    let decreasing = medians.windows(2).all(|w| w[1] < w[0]);
    report(
        8,
        decreasing && secs < 600.0,
        format!("median |J^N − φ(0,m0)| for N = {NS:?}: {} (φ = {phi0:.5}, {REPS} reps × 5 seeds); {secs:.0}s", sci(&medians)),
    );
}

/// Standard deviation of successive differences of the last 50 epoch losses.
fn late_jitter(history: &[LossReport]) -> f64 {
    let tail: Vec<f64> = history[history.len() - 50..].iter().map(|r| r.combined).collect();
    let diffs: Vec<f64> = tail.windows(2).map(|w| w[1] - w[0]).collect();
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    (diffs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64).sqrt()
}

#[test]
fn criterion_09_sample_size_stability() {
    let large: Vec<f64> = (0..3).map(|s| late_jitter(&default_d2(s).run.history)).collect();
    let small: Vec<f64> = (0..3).map(|s| late_jitter(&train(2, 100, LossKind::Uniform, s as u64).run.history)).collect();
    let (ml, ms) = (median(large.clone()), median(small.clone()));
    report(
        9,
        ml < ms,
        format!("median late-epoch loss jitter K=10000: {ml:.3e} {}; K=100: {ms:.3e} {}", sci(&large), sci(&small)),
    );
}

#[test]
fn criterion_10_l2_pathway() {
    let run = train(2, 10_000, LossKind::L2, 0);
    let r = compare_with_grid(&run.checkpoint(), reference_grid(), COMPARE_BAND).unwrap();
    report(
        10,
        r.sup_gap <= 1e-1,
        format!("L2-trained interior sup gap {:.4} (tol 1e-1), mean {:.4}; final L2 loss {:.3e}", r.sup_gap, r.mean_gap, run.final_loss()),
    );
}
