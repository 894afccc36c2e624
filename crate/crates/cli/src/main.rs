//! `fabimit`: collect exploration data, train priors, record demonstrations,
//! imitate, evaluate, ablate and report.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 missing artifact, 4 runtime
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fabric_imitation::harness::{self, ExperimentConfig, HarnessError};
use fabric_imitation::mpc::Method;
use fabric_imitation::ScenarioKind;

#[derive(Parser)]
#[command(name = "fabimit", version, about = "One-shot imitation of contact-rich fabric manipulation")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(short, long, global = true, default_value = "fabimit.toml")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default configuration.
    DefaultConfig,
    /// Random safe exploration in the contact-free scene.
    Collect,
    /// Train the dynamics and registration priors on the collected data.
    Train,
    /// Record the scripted demonstration(s) and adapt registration to them.
    RecordDemo {
        /// Scenario to record; all configured scenarios when omitted.
        #[arg(long)]
        scenario: Option<ScenarioKind>,
    },
    /// Run one trial and write its trace and planner telemetry.
    Imitate {
        #[arg(long)]
        scenario: ScenarioKind,
        #[arg(long, default_value = "full")]
        method: Method,
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
    /// Run every trial and write the summary table and Chamfer curves.
    Evaluate {
        /// Comma-separated controller variants.
        #[arg(long, default_value = "full")]
        methods: String,
    },
    /// Evaluate the three ablations.
    Ablate {
        #[arg(long, default_value = "no-mpc,no-prior,no-cost")]
        methods: String,
    },
    /// Merge all summaries of an output directory into one table.
    Report {
        /// Directory holding `summary-*.csv`; the configured output by default.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    if let Command::DefaultConfig = cli.command {
        print!("{}", ExperimentConfig::default().to_toml());
        return Ok(());
    }
    if let Command::Report { dir: Some(dir) } = &cli.command {
        print!("{}", harness::stage_report(dir)?.table());
        return Ok(());
    }
    let cfg = ExperimentConfig::load(&cli.config)?;
    log::info!("config {} hash {}", cli.config.display(), cfg.hash());
    match cli.command {
        Command::DefaultConfig => unreachable!(),
        Command::Collect => {
            let ds = harness::stage_collect(&cfg)?;
            println!("collected {} transitions -> {}", ds.len(), cfg.paths.dataset.display());
        }
        Command::Train => {
            harness::stage_train(&cfg)?;
            println!("models -> {}", cfg.paths.models.display());
        }
        Command::RecordDemo { scenario } => {
            let kinds = scenario.map_or_else(|| cfg.scenarios.clone(), |k| vec![k]);
            for kind in kinds {
                let demo = harness::stage_record_demo(&cfg, kind)?;
                println!("{}: {} states -> {}", kind.as_str(), demo.len(), cfg.demo_path(kind).display());
            }
        }
        Command::Imitate { scenario, method, trial } => {
            let out = harness::stage_imitate(&cfg, scenario, method, trial)?;
            let r = &out.row;
            println!(
                "{} {} trial {}: success={} steps={} termination={} final_iou={:.3} final_chamfer={:.6}",
                scenario.as_str(),
                method.as_str(),
                trial,
                r.success,
                r.steps,
                r.termination.as_str(),
                r.final_iou,
                r.final_chamfer
            );
        }
        Command::Evaluate { methods } | Command::Ablate { methods } => {
            let methods = harness::parse_methods(&methods)?;
            print!("{}", harness::stage_evaluate(&cfg, &methods)?.table());
        }
        Command::Report { dir } => {
            let dir = dir.unwrap_or_else(|| cfg.paths.output.clone());
            print!("{}", harness::stage_report(&dir)?.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fabimit: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
