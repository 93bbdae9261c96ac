//! Command-line front end for fedgraph experiments.

pub mod plot;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use fedgraph::config::{ConfigError, ExperimentConfig};
use fedgraph::experiment::{
    attack_sweep, noise_sweep, run_recipe, scaling_run, train, write_federation, ExperimentError, MALICIOUS_FRACTIONS,
    NOISE_LEVELS, SCALING_ROUNDS, SCALING_SIZES,
};
use fedgraph::secagg::Backend;
use fedgraph::threat::RobustMode;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "fedgraph", version, about = "Federated graph attention training with privacy, secure aggregation and robustness experiments")]
pub struct Cli {
    /// Experiment config (JSON). Without it the desk-scale defaults apply.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for graph generation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_backend)]
    pub backend: Option<Backend>,
    #[arg(long, global = true, value_parser = parse_robust)]
    pub robust: Option<RobustMode>,
    /// Full-scale settings: 100 rounds, σ = 1.1, masked aggregation, 2k to 10k nodes per client.
    #[arg(long, global = true)]
    pub paper_scale: bool,
    #[arg(long, global = true)]
    pub rounds: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    s.parse()
}

fn parse_robust(s: &str) -> Result<RobustMode, String> {
    s.parse()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Noise,
    Attack,
    Scale,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the client graphs and a manifest.
    Gen,
    /// Train and write metrics.csv, timing.csv and model.ckpt.
    Train,
    /// Run a parameter sweep.
    Sweep {
        #[arg(value_enum)]
        kind: SweepKind,
    },
    /// Render SVG charts and a summary from a run directory.
    Report { dir: PathBuf },
    /// Run a named figure recipe (fig1 to fig7).
    Recipe { name: String },
}

/// Base config, then `--paper-scale`, then the individual flag overrides.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::desk(),
    };
    if cli.paper_scale {
        cfg = cfg.to_paper_scale();
    }
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(b) = cli.backend {
        cfg.fed.backend = b;
    }
    if let Some(r) = cli.robust {
        cfg.fed.robust_mode = r;
    }
    if let Some(r) = cli.rounds {
        cfg.fed.rounds = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(e: &ExperimentError) -> i32 {
    if e.is_config() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

/// Executes a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    if let Command::Report { dir } = &cli.command {
        return match report::report(dir) {
            Ok(out) => {
                for c in &out.charts {
                    println!("wrote {}", c.display());
                }
                print!("{}", out.summary);
                EXIT_OK
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_RUNTIME
            }
        };
    }
    let cfg = match resolve_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let out = cfg.out_dir.clone();
    let result: Result<String, ExperimentError> = match &cli.command {
        Command::Gen => write_federation(&cfg, &out)
            .map(|m| format!("wrote {} client graphs and manifest.json to {}\n", m.num_clients, out.display())),
        Command::Train => train(&cfg, Some(&out)).map(|o| {
            format!(
                "{} rounds, final test accuracy {:.4}, final train loss {:.4}; outputs in {}\n",
                o.log.records.len(),
                o.final_accuracy(),
                o.final_loss(),
                out.display()
            )
        }),
        Command::Sweep { kind } => match kind {
            SweepKind::Noise => noise_sweep(&cfg, &NOISE_LEVELS, Some(&out)).map(|rows| {
                rows.iter().map(|r| format!("sigma {}: accuracy {:.4}\n", r.sigma, r.final_accuracy)).collect()
            }),
            SweepKind::Attack => attack_sweep(&cfg, &MALICIOUS_FRACTIONS, &[RobustMode::Off, RobustMode::NormFilter], Some(&out))
                .map(|rows| {
                    rows.iter()
                        .map(|r| format!("malicious {} defense {}: accuracy {:.4}\n", r.malicious_fraction, r.robust_mode, r.final_accuracy))
                        .collect()
                }),
            SweepKind::Scale => scaling_run(&cfg, &SCALING_SIZES, SCALING_ROUNDS, Some(&out)).map(|(points, fit)| {
                let mut s: String = points.iter().map(|p| format!("{} nodes: {:.0} ms\n", p.num_nodes, p.wall_ms)).collect();
                s.push_str(&format!("r_squared {:.4}\n", fit.r_squared));
                s
            }),
        },
        Command::Recipe { name } => run_recipe(name, &cfg, &out.join(name)),
        Command::Report { .. } => unreachable!("handled above"),
    };
    match result {
        Ok(s) => {
            print!("{s}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
