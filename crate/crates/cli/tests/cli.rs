use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mfc_dgm::model::MfcpSpec;
use mfc_dgm::network::{Architecture, LayerKind, Network, ParameterVector};
use mfc_dgm::oracle::{self, ZeroPolicy};
use mfc_dgm::simplex::SimplexPoint;
use mfc_dgm_cli::commands::{self, constant_params};
use mfc_dgm_cli::Checkpoint;
use tempfile::TempDir;

const TINY: &str = "\
problem.d = 2
arch.depth = 2
arch.width = 4
train.samples = 64
train.epochs = 3
train.steps = 2
seed = 7
";

fn mfcdgm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfcdgm"))
        .args(args)
        .env("DGM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn train_tiny(dir: &Path, text: &str, name: &str) -> PathBuf {
    let cfg = write_config(dir, &format!("{name}.cfg"), text);
    let out = dir.join(name);
    let o = mfcdgm(&["train", "--config", path_str(&cfg), "--out", path_str(&out), "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn save_checkpoint(dir: &Path, arch: Architecture, problem: MfcpSpec, params: ParameterVector) -> PathBuf {
    let p = dir.join(format!("ck_d{}.txt", arch.dim));
    Checkpoint::new(arch, problem, params).unwrap().save(&p).unwrap();
    p
}

fn random_checkpoint(dir: &Path, d: usize) -> PathBuf {
    let arch = Architecture::new(d, LayerKind::Gated, 2, 4);
    let params = Network::new(arch.clone()).unwrap().init_params(3);
    save_checkpoint(dir, arch, MfcpSpec::example(d), params)
}

fn csv_lines(p: &Path) -> Vec<String> {
    fs::read_to_string(p).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn train_writes_one_row_per_epoch_and_a_complete_manifest() {
    let dir = TempDir::new().unwrap();
    let out = train_tiny(dir.path(), TINY, "run");
    let loss = csv_lines(&out.join("loss.csv"));
    assert_eq!(loss[0], "epoch,pde_loss,terminal_loss,combined_loss,seconds");
    assert_eq!(loss.len(), 3 + 1);
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed = 7"));
    assert!(manifest.contains("version = v"));
    assert!(manifest.contains("wall_seconds = "));
    assert!(manifest.contains("train.epochs = 3"));
    let outputs = manifest.lines().find_map(|l| l.strip_prefix("outputs = ")).unwrap();
    for f in outputs.split(',') {
        assert!(out.join(f).is_file(), "manifest lists missing file {f}");
    }
    Checkpoint::load(&out.join("checkpoint.txt")).unwrap();
}

#[test]
fn identical_config_and_seed_reproduce_artifacts() {
    let dir = TempDir::new().unwrap();
    let a = train_tiny(dir.path(), TINY, "a");
    let b = train_tiny(dir.path(), TINY, "b");
    let strip = |p: &Path| -> Vec<String> {
        csv_lines(&p.join("loss.csv"))
            .iter()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(fs::read(a.join("checkpoint.txt")).unwrap(), fs::read(b.join("checkpoint.txt")).unwrap());

    let c = train_tiny(dir.path(), &TINY.replace("seed = 7", "seed = 8"), "c");
    assert_ne!(strip(&a), strip(&c));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "t.cfg", TINY);
    let out = dir.path().join("s");
    let o = mfcdgm(&["train", "--config", path_str(&cfg), "--out", path_str(&out), "--seed", "11", "--quiet"]);
    assert!(o.status.success());
    assert!(fs::read_to_string(out.join("manifest.txt")).unwrap().contains("seed = 11"));
}

#[test]
fn malformed_config_key_exits_2_naming_the_key() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "bad.cfg", &format!("{TINY}train.epoch = 5\n"));
    let o = mfcdgm(&["train", "--config", path_str(&cfg), "--out", path_str(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.epoch"));

    let cfg = write_config(dir.path(), "bad2.cfg", "arch.width = wide\n");
    let o = mfcdgm(&["train", "--config", path_str(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("arch.width"));
}

#[test]
fn divergent_training_exits_3_and_keeps_partial_history() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "hot.cfg", &format!("{TINY}train.lr = 1e300\ntrain.clip_norm = 1e308\n"));
    let out = dir.path().join("hot");
    let o = mfcdgm(&["train", "--config", path_str(&cfg), "--out", path_str(&out), "--quiet"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("status = failed"));
    assert!(!out.join("checkpoint.txt").exists());
}

#[test]
fn surface_d2_is_a_full_lattice() {
    let dir = TempDir::new().unwrap();
    let ck = random_checkpoint(dir.path(), 2);
    let out = dir.path().join("surf");
    let o = mfcdgm(&["surface", "--checkpoint", path_str(&ck), "--resolution", "101", "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines = csv_lines(&out.join("surface.csv"));
    assert_eq!(lines[0], "t,eta_1,value");
    assert_eq!(lines.len(), 101 * 101 + 1);
    assert!(out.join("manifest.txt").is_file());
}

#[test]
fn surface_row_counts_for_higher_dimensions() {
    let dir = TempDir::new().unwrap();
    let ck3 = Checkpoint::load(&random_checkpoint(dir.path(), 3)).unwrap();
    let s = commands::cmd_surface(&ck3, None, None, 11, &dir.path().join("s3")).unwrap();
    assert_eq!(s.rows, 11 * (11 * 12 / 2));
    let ck5 = Checkpoint::load(&random_checkpoint(dir.path(), 5)).unwrap();
    let s = commands::cmd_surface(&ck5, None, None, 11, &dir.path().join("s5")).unwrap();
    assert_eq!(s.rows, 11 * 11);
    assert_eq!(csv_lines(&dir.path().join("s5/surface.csv"))[0], "t,eta_1,eta_2,eta_3,eta_4,value");
}

#[test]
fn constant_network_gives_constant_surface() {
    let dir = TempDir::new().unwrap();
    let arch = Architecture::new(2, LayerKind::Gated, 3, 5);
    let ck = save_checkpoint(dir.path(), arch.clone(), MfcpSpec::example(2), constant_params(&arch, 0.625));
    let out = dir.path().join("c");
    assert!(mfcdgm(&["surface", "--checkpoint", path_str(&ck), "--resolution", "21", "--out", path_str(&out)]).status.success());
    for line in &csv_lines(&out.join("surface.csv"))[1..] {
        let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(v, 0.625);
    }
}

#[test]
fn surface_terminal_gap_is_exact_for_a_constant_network() {
    // φ ≡ 1 against G = m₁² + m₂² ∈ [½, 1].
    let dir = TempDir::new().unwrap();
    let arch = Architecture::new(2, LayerKind::Gated, 2, 3);
    let ck = Checkpoint::new(arch.clone(), MfcpSpec::example(2), constant_params(&arch, 1.0)).unwrap();
    let s = commands::cmd_surface(&ck, None, None, 101, &dir.path().join("g")).unwrap();
    assert!((s.terminal_gap - 0.5).abs() < 1e-12);
}

#[test]
fn surface_rejects_dimension_mismatch() {
    let dir = TempDir::new().unwrap();
    let ck = random_checkpoint(dir.path(), 3);
    let cfg = write_config(dir.path(), "d2.cfg", "problem.d = 2\n");
    let o = mfcdgm(&["surface", "--checkpoint", path_str(&ck), "--config", path_str(&cfg), "--out", path_str(&dir.path().join("m"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compare_reports_gap_for_untrained_network() {
    let dir = TempDir::new().unwrap();
    let ck = random_checkpoint(dir.path(), 2);
    let out = dir.path().join("cmp");
    let o = mfcdgm(&["compare", "--checkpoint", path_str(&ck), "--resolution", "40", "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("sup_gap"));
    let lines = csv_lines(&out.join("compare.csv"));
    assert_eq!(lines[0], "sup_gap,mean_gap,nodes,band");
    let f: Vec<f64> = lines[1].split(',').map(|x| x.parse().unwrap()).collect();
    assert!(f[0] >= f[1] && f[1] >= 0.0 && f[2] >= 1.0 && f[3] == 0.05);
}

#[test]
fn compare_gap_against_a_known_value_function() {
    // With M ≈ 0 nothing moves, so V(t, m) = (2 − t)·Σm²; the zero network
    // misses it by exactly that.
    let mut spec = MfcpSpec::example(2);
    spec.max_rate = 1e-12;
    let arch = Architecture::new(2, LayerKind::Gated, 2, 3);
    let ck = Checkpoint::new(arch.clone(), spec.clone(), constant_params(&arch, 0.0)).unwrap();
    let grid = commands::grid_oracle(&spec, 20).unwrap();
    let r = commands::compare_with_grid(&ck, &grid, 0.05).unwrap();
    // sup at t = 0, m = (0.05, 0.95): 2·(0.0025 + 0.9025)
    assert!((r.sup_gap - 1.81).abs() < 1e-6, "{}", r.sup_gap);
    assert_eq!(r.nodes, 19 * (grid.time_steps() + 1));
}

#[test]
fn compare_rejects_mismatched_or_unsupported_dimension() {
    let dir = TempDir::new().unwrap();
    let ck3 = random_checkpoint(dir.path(), 3);
    let cfg = write_config(dir.path(), "d2.cfg", "problem.d = 2\n");
    let o = mfcdgm(&["compare", "--checkpoint", path_str(&ck3), "--config", path_str(&cfg), "--out", path_str(&dir.path().join("a"))]);
    assert_eq!(o.status.code(), Some(2));
    let ck5 = random_checkpoint(dir.path(), 5);
    let o = mfcdgm(&["compare", "--checkpoint", path_str(&ck5), "--out", path_str(&dir.path().join("b"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn nagent_single_rep_reports_zero_standard_error() {
    let dir = TempDir::new().unwrap();
    let ck = random_checkpoint(dir.path(), 2);
    let out = dir.path().join("na");
    let o = mfcdgm(&["nagent", "--checkpoint", path_str(&ck), "--n-list", "1", "--reps", "1", "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines = csv_lines(&out.join("nagent.csv"));
    assert_eq!(lines[0], "N,mean_cost,std_err,gap");
    let f: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(f[0], "1");
    assert_eq!(f[2].parse::<f64>().unwrap(), 0.0);
    assert!(f[1].parse::<f64>().unwrap().is_finite());
}

#[test]
fn nagent_zero_policy_matches_deterministic_cost() {
    let dir = TempDir::new().unwrap();
    let ck = Checkpoint::load(&random_checkpoint(dir.path(), 2)).unwrap();
    let m0 = SimplexPoint::new(vec![0.8, 0.2]).unwrap();
    let rows = commands::cmd_nagent(&ck, None, None, &[10, 100], 20, 5, Some(m0.clone()), true, &dir.path().join("z")).unwrap();
    let exact = oracle::evaluate_cost(&ck.problem, &m0, &ZeroPolicy { dim: 2 }, 0.0, 1000).unwrap();
    for r in rows {
        assert!((r.mean - exact).abs() <= (3.0 * r.std_err).max(1e-9), "N = {}: {} vs {exact}", r.n, r.mean);
    }
}

#[test]
fn nagent_output_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let ck = random_checkpoint(dir.path(), 2);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = mfcdgm(&["nagent", "--checkpoint", path_str(&ck), "--n-list", "5,20", "--reps", "8", "--seed", "4", "--out", path_str(&out)]);
        assert!(o.status.success());
        fs::read(out.join("nagent.csv")).unwrap()
    };
    assert_eq!(run("r1"), run("r2"));
}

#[test]
fn nagent_rejects_bad_initial_distribution() {
    let dir = TempDir::new().unwrap();
    let ck = random_checkpoint(dir.path(), 2);
    let o = mfcdgm(&["nagent", "--checkpoint", path_str(&ck), "--m0", "0.5,0.6", "--out", path_str(&dir.path().join("b"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = mfcdgm(&["nagent", "--checkpoint", path_str(&ck), "--m0", "0.2,0.3,0.5", "--out", path_str(&dir.path().join("c"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn oracle_exports_grid_csv() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "d3.cfg", "problem.d = 3\n");
    let out = dir.path().join("o");
    let o = mfcdgm(&["oracle", "--config", path_str(&cfg), "--resolution", "8", "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines = csv_lines(&out.join("oracle.csv"));
    assert_eq!(lines[0], "t,eta_1,eta_2,value");
    let steps: usize = fs::read_to_string(out.join("manifest.txt"))
        .unwrap()
        .lines()
        .find_map(|l| l.strip_prefix("time_steps = ").map(|v| v.parse().unwrap()))
        .unwrap();
    assert_eq!(lines.len(), 1 + (steps + 1) * 45);
}

#[test]
fn oracle_rejects_high_dimension() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "d5.cfg", "problem.d = 5\n");
    let o = mfcdgm(&["oracle", "--config", path_str(&cfg), "--resolution", "4", "--out", path_str(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(root).unwrap() {
        let p = entry.unwrap().path();
        mfc_dgm_cli::RunConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        n += 1;
    }
    assert!(n >= 5);
}
