use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use mdscale::config::{self, LoadError};
use mdscale::output;
use mdscale_core::agents::AgentKind;
use mdscale_core::harness::{
    run_scenario1, run_scenario2, summarize, summarize_phases, RunReport, ScenarioConfig, ScenarioError,
};

#[derive(Parser)]
#[command(name = "mdscale", about = "Autoscaling simulator with learned local agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AgentArg {
    Lsa,
    Vpa,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Scenario file; the bundled default when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Run a single repetition with this seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// One service under changing thresholds and core limits.
    Scenario1 {
        #[command(flatten)]
        run: RunArgs,
        /// Agent supervising the service; the configured one when omitted.
        #[arg(long, value_enum)]
        agent: Option<AgentArg>,
    },
    /// Services competing for cores, with the global optimizer.
    Scenario2 {
        #[command(flatten)]
        run: RunArgs,
        /// Disable the global optimizer.
        #[arg(long)]
        no_gso: bool,
    },
    /// Aggregate a per-iteration fulfillment CSV across repetitions.
    Summarize {
        input: PathBuf,
        /// Per-iteration output; phase means go next to it.
        #[arg(long, default_value = "summary.csv")]
        out: PathBuf,
    },
}

enum Failure {
    Config(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Other(other.into()),
        }
    }
}

fn load(run: &RunArgs, default: fn() -> ScenarioConfig) -> Result<ScenarioConfig, Failure> {
    let cfg = match &run.config {
        Some(p) => config::load(p).map_err(|e| match e {
            LoadError::Io { .. } => Failure::Other(e.into()),
            _ => Failure::Config(e.to_string()),
        })?,
        None => default(),
    };
    Ok(match run.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn report(out: &Path, reports: &[RunReport]) -> Result<()> {
    output::write_run(out, reports)?;
    for r in reports {
        let means: Vec<String> = r
            .phase_means()
            .iter()
            .map(|m| format!("p{}:{}={:.3}", m.phase + 1, m.service, m.mean))
            .collect();
        println!("rep {} seed {} swaps {} | {}", r.rep, r.seed, r.swaps.len(), means.join(" "));
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Scenario1 { run, agent } => {
            let mut cfg = load(&run, config::scenario1)?;
            if let Some(a) = agent {
                cfg = cfg.with_agent(match a {
                    AgentArg::Lsa => AgentKind::Lsa,
                    AgentArg::Vpa => AgentKind::Vpa,
                });
            }
            let reports = run_scenario1(&cfg)?;
            report(&run.out, &reports)?;
        }
        Command::Scenario2 { run, no_gso } => {
            let mut cfg = load(&run, config::scenario2)?;
            if no_gso {
                cfg = cfg.with_gso(false);
            }
            let reports = run_scenario2(&cfg)?;
            report(&run.out, &reports)?;
        }
        Command::Summarize { input, out } => {
            let rows = output::read_phi_csv(&input)?;
            let summary = summarize(&rows).map_err(anyhow::Error::from)?;
            output::write_summary_csv(&out, &summary)?;
            let phases = summarize_phases(&rows).map_err(anyhow::Error::from)?;
            let phase_out = out.with_file_name("phase_summary.csv");
            output::write_phase_summary_csv(&phase_out, &phases)?;
            for p in &phases {
                println!("{} {} phase {}: {:.4} ± {:.4}", p.agent, p.service, p.phase + 1, p.mean, p.std);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
