//! The five subcommands. Each writes its artifacts plus `manifest.txt` into
//! an output directory and returns a summary for callers and tests.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use mfc_dgm::model::{MfcpSpec, ValueFunction};
use mfc_dgm::network::{Network, ParameterVector};
use mfc_dgm::oracle::{self, FeedbackPolicy, ValueGrid, ZeroPolicy};
use mfc_dgm::simplex::SimplexPoint;
use mfc_dgm::solver::{self, LossReport};
use mfc_dgm::Error;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::CliError;

pub const LOSS_FILE: &str = "loss.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const SURFACE_FILE: &str = "surface.csv";
pub const COMPARE_FILE: &str = "compare.csv";
pub const NAGENT_FILE: &str = "nagent.csv";
pub const ORACLE_FILE: &str = "oracle.csv";

/// Boundary band excluded from network/oracle comparisons.
pub const COMPARE_BAND: f64 = 0.05;

pub fn version() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

struct Manifest<'a> {
    command: &'a str,
    seed: Option<u64>,
    config: String,
    outputs: Vec<&'a str>,
    status: String,
}

impl Manifest<'_> {
    fn write(&self, dir: &Path, started: Instant) -> Result<(), CliError> {
        let mut s = String::new();
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "version = {}", version());
        match self.seed {
            Some(seed) => {
                let _ = writeln!(s, "seed = {seed}");
            }
            None => {
                let _ = writeln!(s, "seed = none");
            }
        }
        let _ = writeln!(s, "status = {}", self.status);
        let _ = writeln!(s, "wall_seconds = {:.3}", started.elapsed().as_secs_f64());
        let _ = writeln!(s, "outputs = {}", self.outputs.join(","));
        let _ = writeln!(s, "[config]");
        s.push_str(&self.config);
        write_file(&dir.join(MANIFEST_FILE), &s)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<LossReport>,
    pub wall_seconds: f64,
}

/// Trains per `cfg`, streaming `loss.csv` and then writing the checkpoint,
/// the resolved config and the manifest. A diverged run still leaves the
/// partial loss history and a manifest recording the failure.
pub fn cmd_train(cfg: &RunConfig, out: &Path, progress: bool) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    create_dir(out)?;
    let started = Instant::now();
    let config_text = cfg.render();
    write_file(&out.join(CONFIG_FILE), &config_text)?;
    let loss_path = out.join(LOSS_FILE);
    let file = fs::File::create(&loss_path).map_err(|e| CliError::io(&loss_path, e))?;
    let mut loss_csv = BufWriter::new(file);
    writeln!(loss_csv, "{}", LossReport::CSV_HEADER).map_err(|e| CliError::io(&loss_path, e))?;
    let mut io_error = None;
    let epochs = cfg.train.epochs;
    let result = solver::train_with(&cfg.problem, &cfg.arch, &cfg.training(), None, &mut |r| {
        if let Err(e) = writeln!(loss_csv, "{}", r.csv_row()).and_then(|_| loss_csv.flush()) {
            io_error.get_or_insert(e);
        }
        if progress && (r.epoch % 10 == 0 || r.epoch == epochs) {
            eprintln!(
                "epoch {:>4}/{epochs}  pde {:.4}  terminal {:.4}  combined {:.4}  ({:.1}s)",
                r.epoch, r.pde, r.terminal, r.combined, r.seconds
            );
        }
    });
    drop(loss_csv);
    if let Some(e) = io_error {
        return Err(CliError::io(&loss_path, e));
    }
    let mut manifest = Manifest {
        command: "train",
        seed: Some(cfg.seed),
        config: config_text,
        outputs: vec![CONFIG_FILE, LOSS_FILE],
        status: "ok".into(),
    };
    let run = match result {
        Ok(run) => run,
        Err(e) => {
            manifest.status = format!("failed: {e}");
            manifest.write(out, started)?;
            return Err(e.into());
        }
    };
    let checkpoint = Checkpoint::new(cfg.arch.clone(), cfg.problem.clone(), run.params)?;
    checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    manifest.outputs.push(CHECKPOINT_FILE);
    if run.stopped_early {
        manifest.status = "ok (tolerance reached)".into();
    }
    manifest.write(out, started)?;
    Ok(TrainOutcome {
        checkpoint,
        history: run.history,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Problem used by evaluation commands: the checkpoint's own, or the one
/// from a config, which must have the same dimension.
fn resolve_problem(ck: &Checkpoint, cfg: Option<&RunConfig>) -> Result<MfcpSpec, CliError> {
    match cfg {
        Some(cfg) if cfg.problem.dim != ck.arch.dim => Err(CliError::Config(format!(
            "checkpoint network is built for d = {}, but the requested problem has d = {}",
            ck.arch.dim, cfg.problem.dim
        ))),
        Some(cfg) => Ok(cfg.problem.clone()),
        None => Ok(ck.problem.clone()),
    }
}

fn evaluation_echo(ck_path: Option<&Path>, problem: &MfcpSpec, extra: &[(&str, String)]) -> String {
    let mut s = String::new();
    if let Some(p) = ck_path {
        let _ = writeln!(s, "checkpoint = {}", p.display());
    }
    let _ = writeln!(s, "problem.d = {}", problem.dim);
    let _ = writeln!(s, "problem.T = {}", problem.horizon);
    let _ = writeln!(s, "problem.M = {}", problem.max_rate);
    let _ = writeln!(s, "problem.c = {}", crate::config::render_costs(&problem.cost));
    for (k, v) in extra {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

/// Points of the exported surface as network input rows `(η, t)`.
///
/// `d = 2`: the full `(t, η₁)` lattice. `d = 3`: times × the triangular
/// lattice of spacing `1/(R−1)`. `d ≥ 4`: times × the segment
/// `m = (s, (1−s)/(d−1), …)`.
pub fn surface_points(problem: &MfcpSpec, resolution: usize) -> Vec<Vec<f64>> {
    let d = problem.dim;
    let r = resolution;
    let step = |k: usize| if r == 1 { 0.0 } else { k as f64 / (r - 1) as f64 };
    let mut etas: Vec<Vec<f64>> = Vec::new();
    match d {
        2 => etas.extend((0..r).map(|j| vec![step(j)])),
        3 => {
            for a in 0..r {
                for b in 0..r - a {
                    etas.push(vec![step(a), step(b)]);
                }
            }
        }
        _ => {
            for j in 0..r {
                let s = step(j);
                let mut eta = vec![(1.0 - s) / (d - 1) as f64; d - 1];
                eta[0] = s;
                etas.push(eta);
            }
        }
    }
    let mut rows = Vec::with_capacity(r * etas.len());
    for k in 0..r {
        let t = step(k) * problem.horizon;
        for eta in &etas {
            let mut row = eta.clone();
            row.push(t);
            rows.push(row);
        }
    }
    rows
}

#[derive(Debug, Clone)]
pub struct SurfaceSummary {
    pub rows: usize,
    /// `max |φ(T, η) − G(m)|` over the exported terminal slice.
    pub terminal_gap: f64,
}

fn chart_point(eta: &[f64]) -> Result<SimplexPoint, CliError> {
    let mut m = eta.to_vec();
    m.push(1.0 - eta.iter().sum::<f64>());
    Ok(SimplexPoint::renormalized(m, 1e-9)?)
}

fn batch_values(ck: &Checkpoint, rows: &[Vec<f64>]) -> Result<Vec<f64>, CliError> {
    let net = Network::new(ck.arch.clone())?;
    let k = ck.arch.dim;
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let x = ndarray_view(&flat, rows.len(), k);
    Ok(net.forward(&ck.params, x, false)?.value.to_vec())
}

fn ndarray_view(flat: &[f64], rows: usize, cols: usize) -> ndarray::ArrayView2<'_, f64> {
    ndarray::ArrayView2::from_shape((rows, cols), flat).expect("row-major buffer of matching size")
}

pub fn cmd_surface(ck: &Checkpoint, ck_path: Option<&Path>, cfg: Option<&RunConfig>, resolution: usize, out: &Path) -> Result<SurfaceSummary, CliError> {
    let started = Instant::now();
    if resolution < 2 {
        return Err(CliError::Config("--resolution must be at least 2".into()));
    }
    let problem = resolve_problem(ck, cfg)?;
    create_dir(out)?;
    let rows = surface_points(&problem, resolution);
    let values = batch_values(ck, &rows)?;
    let d = problem.dim;
    let mut s = String::with_capacity(rows.len() * 32);
    let etas: Vec<String> = (1..d).map(|c| format!("eta_{c}")).collect();
    let _ = writeln!(s, "t,{},value", etas.join(","));
    let mut terminal_gap: f64 = 0.0;
    for (row, v) in rows.iter().zip(&values) {
        let t = row[d - 1];
        let eta: Vec<String> = row[..d - 1].iter().map(|e| e.to_string()).collect();
        let _ = writeln!(s, "{t},{},{v}", eta.join(","));
        if t == problem.horizon {
            let m = chart_point(&row[..d - 1])?;
            terminal_gap = terminal_gap.max((v - problem.terminal_value(&m)).abs());
        }
    }
    write_file(&out.join(SURFACE_FILE), &s)?;
    Manifest {
        command: "surface",
        seed: None,
        config: evaluation_echo(ck_path, &problem, &[("resolution", resolution.to_string())]),
        outputs: vec![SURFACE_FILE],
        status: "ok".into(),
    }
    .write(out, started)?;
    Ok(SurfaceSummary {
        rows: rows.len(),
        terminal_gap,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComparisonReport {
    pub sup_gap: f64,
    pub mean_gap: f64,
    pub nodes: usize,
    pub band: f64,
}

impl ComparisonReport {
    pub const CSV_HEADER: &'static str = "sup_gap,mean_gap,nodes,band";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.sup_gap, self.mean_gap, self.nodes, self.band)
    }
}

/// Lattice cells per unit used by `compare` and `oracle` when none is given.
pub fn default_oracle_resolution(d: usize) -> usize {
    if d == 2 {
        200
    } else {
        50
    }
}

/// Grid oracle with `n` cells per unit and the largest stable time step.
pub fn grid_oracle(problem: &MfcpSpec, n: usize) -> Result<ValueGrid, CliError> {
    if n == 0 {
        return Err(CliError::Config("--resolution must be positive".into()));
    }
    let h = 1.0 / n as f64;
    let bound = h / (2.0 * problem.max_rate * problem.dim as f64);
    let steps = (problem.horizon / bound).ceil() as usize;
    Ok(oracle::solve_grid_hjb(problem, steps.max(1), h)?)
}

/// Sup and mean of `|φ − V_grid|` over every time slice and every lattice
/// node whose masses are all at least `band`.
pub fn compare_with_grid(ck: &Checkpoint, grid: &ValueGrid, band: f64) -> Result<ComparisonReport, CliError> {
    let d = ck.arch.dim;
    let nodes = grid.interior_nodes(band);
    if nodes.is_empty() {
        return Err(CliError::Config(format!("no lattice nodes at distance >= {band} from the boundary")));
    }
    let mut rows = Vec::with_capacity(nodes.len() * (grid.time_steps() + 1));
    let mut reference = Vec::with_capacity(rows.capacity());
    for k in 0..=grid.time_steps() {
        for &node in &nodes {
            let mut row = grid.node_eta(node);
            row.push(grid.time(k));
            rows.push(row);
            reference.push(grid.value(k, node));
        }
    }
    debug_assert!(rows.iter().all(|r| r.len() == d));
    let values = batch_values(ck, &rows)?;
    let gaps: Vec<f64> = values.iter().zip(&reference).map(|(a, b)| (a - b).abs()).collect();
    Ok(ComparisonReport {
        sup_gap: gaps.iter().copied().fold(0.0, f64::max),
        mean_gap: gaps.iter().sum::<f64>() / gaps.len() as f64,
        nodes: gaps.len(),
        band,
    })
}

pub fn cmd_compare(ck: &Checkpoint, ck_path: Option<&Path>, cfg: Option<&RunConfig>, resolution: Option<usize>, out: &Path) -> Result<ComparisonReport, CliError> {
    let started = Instant::now();
    let problem = resolve_problem(ck, cfg)?;
    if !(2..=3).contains(&problem.dim) {
        return Err(Error::Config(format!("comparison needs d in {{2, 3}}, got {}", problem.dim)).into());
    }
    let n = resolution.unwrap_or_else(|| default_oracle_resolution(problem.dim));
    let grid = grid_oracle(&problem, n)?;
    let report = compare_with_grid(ck, &grid, COMPARE_BAND)?;
    create_dir(out)?;
    write_file(&out.join(COMPARE_FILE), &format!("{}\n{}\n", ComparisonReport::CSV_HEADER, report.csv_row()))?;
    Manifest {
        command: "compare",
        seed: None,
        config: evaluation_echo(ck_path, &problem, &[("resolution", n.to_string()), ("time_steps", grid.time_steps().to_string())]),
        outputs: vec![COMPARE_FILE],
        status: "ok".into(),
    }
    .write(out, started)?;
    Ok(report)
}

/// `(0.8, 0.2/(d−1), …, 0.2/(d−1))`.
pub fn default_m0(d: usize) -> SimplexPoint {
    let mut m = vec![0.2 / (d - 1) as f64; d];
    m[0] = 0.8;
    SimplexPoint::renormalized(m, 1e-12).expect("valid simplex point")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NAgentRow {
    pub n: usize,
    pub mean: f64,
    pub std_err: f64,
    /// `|mean − φ(0, m0)|`
    pub gap: f64,
}

impl NAgentRow {
    pub const CSV_HEADER: &'static str = "N,mean_cost,std_err,gap";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.n, self.mean, self.std_err, self.gap)
    }
}

/// Simulates the N-agent system for each `N` under the control recovered
/// from the network (or the zero control) and reports the gap to `φ(0, m0)`.
pub fn nagent_rows(ck: &Checkpoint, problem: &MfcpSpec, ns: &[usize], reps: usize, seed: u64, m0: &SimplexPoint, zero_policy: bool) -> Result<Vec<NAgentRow>, CliError> {
    if m0.dim() != problem.dim {
        return Err(CliError::Config(format!("m0 has {} entries, problem has d = {}", m0.dim(), problem.dim)));
    }
    let value = ck.value_function()?;
    let reference = value.eval(0.0, &m0.coords()[..problem.dim - 1])?.value;
    let feedback = FeedbackPolicy::new(problem.clone(), &value)?;
    let zero = ZeroPolicy { dim: problem.dim };
    let policy: &dyn oracle::ControlPolicy = if zero_policy { &zero } else { &feedback };
    ns.iter()
        .map(|&n| {
            let est = oracle::simulate_n_agents(problem, policy, n, m0, reps, seed)?;
            Ok(NAgentRow {
                n,
                mean: est.mean,
                std_err: est.std_err,
                gap: (est.mean - reference).abs(),
            })
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_nagent(
    ck: &Checkpoint,
    ck_path: Option<&Path>,
    cfg: Option<&RunConfig>,
    ns: &[usize],
    reps: usize,
    seed: u64,
    m0: Option<SimplexPoint>,
    zero_policy: bool,
    out: &Path,
) -> Result<Vec<NAgentRow>, CliError> {
    let started = Instant::now();
    let problem = resolve_problem(ck, cfg)?;
    if ns.is_empty() {
        return Err(CliError::Config("--n-list must name at least one N".into()));
    }
    let m0 = m0.unwrap_or_else(|| default_m0(problem.dim));
    let rows = nagent_rows(ck, &problem, ns, reps, seed, &m0, zero_policy)?;
    create_dir(out)?;
    let mut s = format!("{}\n", NAgentRow::CSV_HEADER);
    for r in &rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    write_file(&out.join(NAGENT_FILE), &s)?;
    let m0_text: Vec<String> = m0.coords().iter().map(|x| x.to_string()).collect();
    let ns_text: Vec<String> = ns.iter().map(|n| n.to_string()).collect();
    Manifest {
        command: "nagent",
        seed: Some(seed),
        config: evaluation_echo(
            ck_path,
            &problem,
            &[
                ("n_list", ns_text.join(",")),
                ("reps", reps.to_string()),
                ("m0", m0_text.join(",")),
                ("policy", if zero_policy { "zero" } else { "recovered" }.into()),
            ],
        ),
        outputs: vec![NAGENT_FILE],
        status: "ok".into(),
    }
    .write(out, started)?;
    Ok(rows)
}

pub fn cmd_oracle(cfg: &RunConfig, resolution: Option<usize>, out: &Path) -> Result<ValueGrid, CliError> {
    let started = Instant::now();
    let problem = &cfg.problem;
    let n = resolution.unwrap_or_else(|| default_oracle_resolution(problem.dim));
    let grid = grid_oracle(problem, n)?;
    create_dir(out)?;
    let path = out.join(ORACLE_FILE);
    let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    grid.write_csv(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(&path, e))?;
    Manifest {
        command: "oracle",
        seed: None,
        config: evaluation_echo(None, problem, &[("resolution", n.to_string()), ("time_steps", grid.time_steps().to_string())]),
        outputs: vec![ORACLE_FILE],
        status: "ok".into(),
    }
    .write(out, started)?;
    Ok(grid)
}

/// `out` flag, else the config's `out`, else `runs/<command>`.
pub fn output_dir(flag: Option<PathBuf>, cfg: Option<&RunConfig>, command: &str) -> PathBuf {
    flag.or_else(|| cfg.and_then(|c| c.out.clone()))
        .unwrap_or_else(|| PathBuf::from("runs").join(command))
}

/// Parameters of a network that is constant `c` everywhere.
pub fn constant_params(ck_arch: &mfc_dgm::network::Architecture, c: f64) -> ParameterVector {
    let mut p = ParameterVector::zeros(ck_arch.param_count());
    let last = p.len() - 1;
    p.as_mut_slice()[last] = c;
    p
}
