use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use brcdf::experiment::{self, AttackState, DesignMode, ExperimentConfig};
use brcdf::{model, Error};
use clap::{Parser, Subcommand};
use tracing_subscriber::filter::LevelFilter;

/// Distributed Kalman filtering with partial sharing under Byzantine attacks.
#[derive(Parser)]
#[command(name = "brcdf", version)]
struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate the series of one of the named presets.
    Reproduce {
        /// fig2, fig3, fig5, fig6, fig7, fig8 or fig9.
        preset: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Monte Carlo runs; the preset value when absent.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Design the attack covariance and/or selections from a saved state.
    DesignAttack {
        #[arg(long)]
        state: PathBuf,
        /// cov, select or both.
        #[arg(long, default_value = "both")]
        mode: String,
        /// Write the artifact here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the consensus step-size bound for a configuration.
    GammaBound {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the communication graph in Graphviz format.
    ExportGraph {
        #[arg(long)]
        dot: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load(config: Option<&PathBuf>) -> brcdf::Result<ExperimentConfig> {
    match config {
        Some(p) => ExperimentConfig::from_file(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run_and_write(cfg: &ExperimentConfig, dir: &PathBuf) -> brcdf::Result<()> {
    let out = experiment::run_scenario(cfg)?;
    experiment::write_artifacts(&out, dir)?;
    for cell in &out.cells {
        println!(
            "{:<40} steady MSE empirical {:.6e}  prime {:.6e}  analytic {:.6e}",
            cell.key.label(),
            cell.steady_empirical,
            cell.steady_prime,
            cell.steady_analytic
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> brcdf::Result<()> {
    match cli.command {
        Command::Simulate { config, out } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let dir = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
            run_and_write(&cfg, &dir)
        }
        Command::Reproduce { preset, out, seed, runs } => {
            let mut cfg = ExperimentConfig::preset(&preset)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(r) = runs {
                cfg.runs = r;
            }
            cfg.validate()?;
            run_and_write(&cfg, &out.join(&preset))
        }
        Command::DesignAttack { state, mode, out } => {
            let mode: DesignMode = mode.parse()?;
            let state = AttackState::from_json(&fs::read_to_string(&state)?)?;
            let text = state.design(mode)?.to_text();
            match out {
                Some(p) => fs::write(p, text)?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::GammaBound { config } => {
            let cfg = load(config.as_ref())?;
            let r = experiment::gamma_report(&cfg)?;
            println!("lambda_min_information = {:.6e}", r.lambda_i_min);
            println!("lambda_max_coupled = {:.6e}", r.coupled_max);
            println!("gamma_star_full_sharing = {:.6e}", r.gamma_star_full);
            println!("transition_invertible = {}", r.transition_invertible);
            for (l, star, gamma, ok) in r.rows {
                println!("l = {l}: gamma_star = {star:.6e} gamma = {gamma:.6e} within_bound = {ok}");
            }
            Ok(())
        }
        Command::ExportGraph { dot, config, seed } => {
            let mut cfg = load(config.as_ref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let graph = model::build_network(cfg.seed, cfg.agents, cfg.edge_prob)?;
            fs::write(&dot, graph.to_dot())?;
            println!("wrote {}", dot.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level: LevelFilter = match cli.log.parse() {
        Ok(l) => l,
        Err(_) => {
            eprintln!("error: unknown log level `{}`", cli.log);
            return ExitCode::from(2);
        }
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config { .. } | Error::Parse(_) => 2,
                ref e if e.is_numeric() => 3,
                _ => 1,
            })
        }
    }
}
