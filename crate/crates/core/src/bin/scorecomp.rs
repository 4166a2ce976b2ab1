use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use scorecomp::harness::{run_all, run_scenario, write_reports, LoadedConfig, RunReport, Scenario};

#[derive(Parser)]
#[command(name = "scorecomp", version, about = "Composed-score sampling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Composed-vs-joint score error on random pivot-tree models.
    ValidateTheorem(Common),
    /// Composed sampling from a random pivot-tree model.
    Sample(Common),
    /// Rollback on/off on a mismatched mixture pair.
    AblateVrs(Common),
    /// Convex-combination error over a grid of scales.
    SweepS(Common),
    /// Conditioning preservation and coupling.
    ConditionCheck(Common),
    /// Every scenario, one combined report.
    Report(Common),
    /// Print the effective config as TOML, with its hash.
    PrintConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for report.csv, report.json, and snapshots/.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Record intermediate sampler states.
    #[arg(long)]
    snapshots: bool,
}

fn load(config: &Option<PathBuf>) -> anyhow::Result<LoadedConfig> {
    match config {
        Some(path) => {
            let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            LoadedConfig::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))
        }
        None => Ok(LoadedConfig::defaults()),
    }
}

fn run(cli: Cli) -> anyhow::Result<Vec<RunReport>> {
    let (scenario, common) = match cli.command {
        Command::ValidateTheorem(c) => (Some(Scenario::ValidateTheorem), c),
        Command::Sample(c) => (Some(Scenario::Sample), c),
        Command::AblateVrs(c) => (Some(Scenario::AblateVrs), c),
        Command::SweepS(c) => (Some(Scenario::SweepS), c),
        Command::ConditionCheck(c) => (Some(Scenario::ConditionCheck), c),
        Command::Report(c) => (None, c),
        Command::PrintConfig { config } => {
            let cfg = load(&config)?;
            eprintln!("config hash {}", cfg.hash);
            print!("{}", cfg.config.to_toml_string());
            return Ok(Vec::new());
        }
    };
    let cfg = load(&common.config)?;
    let reports = match scenario {
        Some(s) => vec![run_scenario(s, &cfg, common.seed, common.snapshots)?],
        None => run_all(&cfg, common.seed, common.snapshots)?,
    };
    write_reports(&common.out, &reports).with_context(|| format!("writing to {}", common.out.display()))?;
    Ok(reports)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(reports) => {
            let mut ok = true;
            for r in &reports {
                for m in r.failures() {
                    ok = false;
                    eprintln!("FAIL {} {} = {:e} (want {:?})", r.scenario, m.name, m.value, m.check);
                }
                println!("{}: {}", r.scenario, if r.passed() { "pass" } else { "fail" });
            }
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
