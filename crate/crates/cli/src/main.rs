use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mfc_dgm::simplex::SimplexPoint;
use mfc_dgm_cli::commands::{self, output_dir};
use mfc_dgm_cli::{Checkpoint, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "mfcdgm", version, about = "Deep Galerkin solver for finite-state mean field control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a value network and write loss.csv, checkpoint.txt and manifest.txt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on a regular lattice and write surface.csv.
    Surface {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config whose problem must match the checkpoint's dimension.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 101)]
        resolution: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gap between a checkpoint and the grid oracle (d = 2 or 3).
    Compare {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Lattice cells per unit mass.
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate the N-agent system under the recovered control.
    Nagent {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "10,100,1000")]
        n_list: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Initial distribution, comma separated.
        #[arg(long, value_delimiter = ',')]
        m0: Option<Vec<f64>>,
        /// Simulate with the zero control instead.
        #[arg(long)]
        zero_policy: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the HJB equation on a lattice and write oracle.csv.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_optional(path: Option<&PathBuf>) -> Result<Option<RunConfig>, CliError> {
    path.map(|p| RunConfig::load(p)).transpose()
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out, seed, quiet } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg = cfg.with_seed(seed);
            }
            let dir = output_dir(out, Some(&cfg), "train");
            let outcome = commands::cmd_train(&cfg, &dir, !quiet)?;
            if let Some(last) = outcome.history.last() {
                println!(
                    "epochs {}  pde {:.6}  terminal {:.6}  combined {:.6}  wall {:.1}s",
                    last.epoch, last.pde, last.terminal, last.combined, outcome.wall_seconds
                );
            }
            println!("wrote {}", dir.display());
        }
        Command::Surface { checkpoint, config, resolution, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = load_optional(config.as_ref())?;
            let dir = output_dir(out, None, "surface");
            let s = commands::cmd_surface(&ck, Some(&checkpoint), cfg.as_ref(), resolution, &dir)?;
            println!("rows {}  terminal_gap {:.6}", s.rows, s.terminal_gap);
            println!("wrote {}", dir.join(commands::SURFACE_FILE).display());
        }
        Command::Compare { checkpoint, config, resolution, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = load_optional(config.as_ref())?;
            let dir = output_dir(out, None, "compare");
            let r = commands::cmd_compare(&ck, Some(&checkpoint), cfg.as_ref(), resolution, &dir)?;
            println!("sup_gap {:.6}  mean_gap {:.6}  points {}  band {}", r.sup_gap, r.mean_gap, r.nodes, r.band);
        }
        Command::Nagent { checkpoint, config, n_list, reps, seed, m0, zero_policy, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = load_optional(config.as_ref())?;
            let m0 = m0
                .map(|v| SimplexPoint::new(v).map_err(|e| CliError::Config(format!("--m0: {e}"))))
                .transpose()?;
            let dir = output_dir(out, None, "nagent");
            let rows = commands::cmd_nagent(&ck, Some(&checkpoint), cfg.as_ref(), &n_list, reps, seed, m0, zero_policy, &dir)?;
            println!("{}", commands::NAgentRow::CSV_HEADER);
            for r in rows {
                println!("{}", r.csv_row());
            }
        }
        Command::Oracle { config, resolution, out } => {
            let cfg = RunConfig::load(&config)?;
            let dir = output_dir(out, Some(&cfg), "oracle");
            let grid = commands::cmd_oracle(&cfg, resolution, &dir)?;
            println!("nodes {}  time_steps {}  mesh {}", grid.node_count(), grid.time_steps(), grid.mesh());
            println!("wrote {}", dir.join(commands::ORACLE_FILE).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = std::env::var("DGM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
