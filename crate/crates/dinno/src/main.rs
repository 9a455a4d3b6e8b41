use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dinno::config::{ExperimentConfig, Scenario};
use dinno::experiment::{self, DistReport, SingleReport};
use dinno::io;

#[derive(Parser)]
#[command(name = "dinno", version, about = "Decentralized Bayesian occupancy mapping experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Runs the scenario named in the configuration.
    Run(Common),
    /// Trains one agent on its full path.
    Single(Common),
    /// Sweeps the KL weight for one agent.
    Sweep(Common),
    /// Trains one agent over streamed communication rounds.
    Online(Common),
    /// Runs decentralized consensus among all agents.
    Dist(Common),
    /// Writes the floorplan, paths and per-agent datasets.
    Export(Common),
    /// Prints the default configuration.
    DefaultConfig,
    /// One peer of a socket-mode run.
    Agent {
        #[command(flatten)]
        common: Common,
        /// Peer id.
        #[arg(long)]
        id: usize,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_single(r: &SingleReport) {
    let s = r.summary;
    println!(
        "kl_weight={:e} final_loss={:.5} validation_loss={:.5} explored_std={:.5} unexplored_std={:.5} ratio={:.3} global_std={:.5}",
        r.kl_weight,
        r.steps.last().map_or(f64::NAN, |s| s.pred_loss),
        r.validation_loss,
        s.explored_std,
        s.unexplored_std,
        s.ratio(),
        s.global_std
    );
}

fn print_dist(r: &DistReport) {
    for (k, (res, val)) in r.round_residual.iter().zip(&r.round_validation).enumerate() {
        println!("round {k:3} residual={res:.5} validation_loss={val:.5}");
    }
    println!("final residual={:.5} validation_loss={:.5}", r.residual, r.final_validation);
    if let Some(rho) = r.spearman {
        println!("spearman(std, 1/density)={rho:.4}");
    }
}

fn run(cfg: &ExperimentConfig, scenario: Scenario, out: Option<&Path>) -> Result<()> {
    match scenario {
        Scenario::SingleAgent => print_single(&experiment::run_single_agent(cfg, out)?),
        Scenario::KlSweep => {
            for r in experiment::run_kl_sweep(cfg, out)? {
                print_single(&r);
            }
        }
        Scenario::Online => {
            let r = experiment::run_online(cfg, out)?;
            for (k, v) in r.round_validation.iter().enumerate() {
                println!("round {k:3} validation_loss={v:.5}");
            }
            println!("final validation_loss={:.5}", r.final_validation);
        }
        Scenario::Distributed => {
            let exe = std::env::current_exe().context("locating the dinno executable")?;
            print_dist(&experiment::run_distributed(cfg, out, Some(&exe))?);
        }
    }
    Ok(())
}

fn export(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let world = experiment::build_world(cfg)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    io::save_floorplan(&out.join("floorplan.pgm"), &world.fp)?;
    io::write_paths(&out.join("paths.csv"), &world.paths)?;
    for agent in 0..world.paths.len() {
        let split = experiment::agent_split(&world, cfg, agent)?;
        io::write_points(&out.join(format!("agent_{agent}_train.csv")), &split.train)?;
        io::write_points(&out.join(format!("agent_{agent}_holdout.csv")), &split.holdout)?;
        println!("agent {agent}: {} train, {} holdout points", split.train.len(), split.holdout.len());
    }
    Ok(())
}

fn main_inner() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Cmd::DefaultConfig => print!("{}", ExperimentConfig::default().to_toml()),
        Cmd::Run(c) => {
            let cfg = load(&c)?;
            run(&cfg, cfg.scenario, c.out.as_deref())?;
        }
        Cmd::Single(c) => run(&load(&c)?, Scenario::SingleAgent, c.out.as_deref())?,
        Cmd::Sweep(c) => run(&load(&c)?, Scenario::KlSweep, c.out.as_deref())?,
        Cmd::Online(c) => run(&load(&c)?, Scenario::Online, c.out.as_deref())?,
        Cmd::Dist(c) => run(&load(&c)?, Scenario::Distributed, c.out.as_deref())?,
        Cmd::Export(c) => {
            let out = c.out.clone().context("export needs --out")?;
            export(&load(&c)?, &out)?;
        }
        Cmd::Agent { common, id } => {
            let out = common.out.clone().context("agent needs --out")?;
            experiment::run_agent_process(&load(&common)?, id, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match main_inner() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
