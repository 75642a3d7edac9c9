mod remote;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;
use tracehead::pipeline::{self, ErrorClass, PipelineConfig, PipelineError, ProviderKind};
use tracehead::provider::{LlmProvider, ScriptedProvider};

const EXIT_INPUT: u8 = 2;
const EXIT_PROVIDER: u8 = 3;
const EXIT_ACCEPTANCE: u8 = 4;

#[derive(Parser)]
#[command(name = "tracehead", version, about = "Train decision heads on logged agent traces")]
struct Cli {
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured provider.
    #[arg(long, global = true, value_enum)]
    provider: Option<ProviderArg>,
    /// Abort on the first malformed trajectory instead of skipping it.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderArg {
    Remote,
    Mock,
}

#[derive(Subcommand)]
enum Command {
    /// Parse trajectories and write labels.csv and parse_report.json.
    Ingest,
    /// Discover features and write the feature card and table.
    Extract,
    /// Augment the feature table with synthetic positives.
    Synth,
    /// Cross-validate and fit the decision head.
    Train,
    /// Score baselines and write the evaluation report.
    Eval,
    /// Per-read cost for runtimes given as NAME=SECONDS, or read from report.json.
    Cost {
        #[arg(long = "runtime", value_parser = parse_pair)]
        runtimes: Vec<(String, f64)>,
        /// Metered per-call charges as NAME=DOLLARS, listed as given.
        #[arg(long = "metered", value_parser = parse_pair)]
        metered: Vec<(String, f64)>,
    },
    /// Run ingest, extract, synth, train and eval.
    Pipeline,
    /// Write a planted corpus, catalogs, mock script and config.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        tasks: usize,
    },
}

fn parse_pair(s: &str) -> Result<(String, f64), String> {
    let (name, value) = s
        .split_once('=')
        .ok_or_else(|| format!("expected NAME=VALUE, got `{s}`"))?;
    let v: f64 = value.parse().map_err(|e| format!("`{value}`: {e}"))?;
    Ok((name.to_string(), v))
}

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let path = cli
        .config
        .as_ref()
        .context("--config is required for this command")?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(p) = cli.provider {
        cfg.provider.kind = match p {
            ProviderArg::Remote => ProviderKind::Remote,
            ProviderArg::Mock => ProviderKind::Mock,
        };
    }
    cfg.strict |= cli.strict;
    cfg.validate()?;
    Ok(cfg)
}

fn make_provider(cfg: &PipelineConfig) -> anyhow::Result<Box<dyn LlmProvider>> {
    Ok(match cfg.provider.kind {
        ProviderKind::Mock => {
            let m = cfg.provider.mock.as_ref().context("provider.mock is not configured")?;
            Box::new(ScriptedProvider::from_path(&m.script).map_err(PipelineError::from)?)
        }
        ProviderKind::Remote => {
            let r = cfg.provider.remote.clone().context("provider.remote is not configured")?;
            Box::new(remote::RemoteProvider::new(r).map_err(PipelineError::from)?)
        }
    })
}

fn print_report(report: &pipeline::FullReport) {
    for m in report
        .report
        .metrics
        .iter()
        .filter(|m| m.app == tracehead::eval::ALL)
    {
        println!(
            "{:<8} {:<9} {:.4} [{:.4}, {:.4}]",
            m.method, m.metric, m.mean, m.ci_lo, m.ci_hi
        );
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Generate { out, tasks } => {
            let path = pipeline::write_planted_workspace(out, *tasks, cli.seed.unwrap_or(0))?;
            println!("wrote {}", path.display());
        }
        Command::Cost { runtimes, metered } => {
            let (runtimes, params) = if runtimes.is_empty() && metered.is_empty() {
                let cfg = load_config(cli)?;
                (pipeline::report_runtimes(&cfg)?, cfg.eval.report.cost)
            } else {
                let params = match &cli.config {
                    Some(_) => load_config(cli)?.eval.report.cost,
                    None => Default::default(),
                };
                (runtimes.clone(), params)
            };
            println!("{:<16} {:>14} {:>12}  basis", "method", "runtime_s", "cost_usd");
            for line in pipeline::cost_table(&runtimes, metered, &params)? {
                let runtime = if line.metered {
                    "-".to_string()
                } else {
                    format!("{}", line.runtime_seconds)
                };
                let basis = if line.metered { "metered" } else { "modeled" };
                println!("{:<16} {:>14} {:>12.3e}  {basis}", line.method, runtime, line.cost);
            }
        }
        Command::Ingest => {
            let cfg = load_config(cli)?;
            let r = pipeline::ingest(&cfg)?;
            println!(
                "parsed {} trajectories, skipped {}, labeled {}",
                r.n_parsed, r.n_skipped, r.n_labeled
            );
            for (d, s) in &r.difficulty_shares {
                println!("{d:<8} {:.1}%", 100.0 * s);
            }
        }
        Command::Extract => {
            let cfg = load_config(cli)?;
            let provider = make_provider(&cfg)?;
            let card = pipeline::extract(&cfg, provider.as_ref())?;
            for e in &card.features {
                println!("{:<28} {:?}", e.spec.feature_name, e.final_decision);
            }
        }
        Command::Synth => {
            let cfg = load_config(cli)?;
            let provider = make_provider(&cfg)?;
            let s = pipeline::synth(&cfg, provider.as_ref())?;
            println!(
                "{} real rows, {} synthetic rows after {} round(s), final budget {}",
                s.n_real, s.n_synthetic, s.rounds, s.final_budget
            );
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Train => {
            let cfg = load_config(cli)?;
            let r = pipeline::train(&cfg)?;
            println!(
                "{} rows ({} synthetic), {} tasks, {} folds, out-of-fold ECE {:.4}",
                r.n_rows,
                r.n_synthetic,
                r.n_tasks,
                r.folds.len(),
                r.oof_ece
            );
        }
        Command::Eval => {
            let cfg = load_config(cli)?;
            print_report(&pipeline::evaluate(&cfg)?);
        }
        Command::Pipeline => {
            let cfg = load_config(cli)?;
            let provider = make_provider(&cfg)?;
            print_report(&pipeline::run_all(&cfg, provider.as_ref())?);
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<PipelineError>().map(PipelineError::class) {
        Some(ErrorClass::Provider) => EXIT_PROVIDER,
        Some(ErrorClass::Acceptance) => EXIT_ACCEPTANCE,
        _ => EXIT_INPUT,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
