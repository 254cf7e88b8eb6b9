use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use parsons_cli::cohort::{self, CohortSpec};
use parsons_cli::{cmd_ingest, cmd_report, cmd_serve, cmd_simulate, CliError, ReportOptions, SimInputs, SimScript};
use parsons_core::analytics::Metric;
use parsons_core::problem::ProblemBank;
use parsons_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "parsons", version, about = "Personalized Parsons-puzzle practice service")]
struct Cli {
    /// Service configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP API.
    Serve,
    /// Verify a problem bank and add it to the data directory.
    Ingest { bank: PathBuf },
    /// Play a scripted cohort against an in-process service.
    Simulate {
        /// Script to play. Without one, a synthetic cohort is generated.
        script: Option<PathBuf>,
        /// Event log to write.
        #[arg(long)]
        out: PathBuf,
        /// Problem bank, when the config has no ingested problems.
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Overrides the script's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Generated cohort sizes.
        #[arg(long, default_value_t = 51)]
        pc: usize,
        #[arg(long, default_value_t = 67)]
        cc: usize,
        /// Generated CC students who copy and submit straight away.
        #[arg(long, default_value_t = 6)]
        fast_cc: usize,
        /// Also write the generated script here.
        #[arg(long)]
        save_script: Option<PathBuf>,
    },
    /// Compare conditions on one metric of an event log.
    Report {
        log: PathBuf,
        #[arg(long, value_enum, default_value_t = MetricArg::PracticeTime)]
        metric: MetricArg,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    PracticeTime,
    Attempts,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

fn load_config(path: Option<&PathBuf>) -> Result<Option<ServiceConfig>, CliError> {
    Ok(match path {
        Some(p) => Some(ServiceConfig::load(p)?),
        None => None,
    })
}

fn write_or_print(out: Option<&PathBuf>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|source| CliError::Io {
            context: format!("cannot write {}", p.display()),
            source,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = load_config(cli.config.as_ref())?;
    match cli.command {
        Command::Serve => {
            let config = config.ok_or_else(|| CliError::Usage("serve needs --config".into()))?;
            let runtime = tokio::runtime::Runtime::new().map_err(|source| CliError::Io {
                context: "cannot start runtime".into(),
                source,
            })?;
            runtime.block_on(cmd_serve(
                config,
                |addr| tracing::info!(%addr, "listening"),
                async {
                    let _ = tokio::signal::ctrl_c().await;
                    tracing::info!("shutting down");
                },
            ))
        }
        Command::Ingest { bank } => {
            let config = config.ok_or_else(|| CliError::Usage("ingest needs --config".into()))?;
            let report = cmd_ingest(&config, &bank)?;
            println!("accepted: {}", report.accepted.join(", "));
            for r in &report.rejected {
                println!("rejected {}: {}", r.problem_id, r.reason);
            }
            Ok(())
        }
        Command::Simulate {
            script,
            out,
            bank,
            seed,
            pc,
            cc,
            fast_cc,
            save_script,
        } => {
            let inputs = SimInputs::resolve(config.as_ref(), bank.as_deref())?;
            let mut script = match script {
                Some(p) => SimScript::load(p)?,
                None => {
                    let spec = CohortSpec {
                        pc,
                        cc,
                        fast_cc: fast_cc.min(cc),
                        seed: seed.unwrap_or(CohortSpec::default().seed),
                        ..CohortSpec::default()
                    };
                    generate(&spec, &inputs.bank)
                }
            };
            if let Some(seed) = seed {
                script.seed = seed;
            }
            if let Some(p) = save_script {
                write_or_print(Some(&p), &script.to_json())?;
            }
            let summary = cmd_simulate(&inputs, &script, &out)?;
            print!("{}", summary.render());
            Ok(())
        }
        Command::Report {
            log,
            metric,
            format,
            out,
        } => {
            let mut options = ReportOptions {
                metric: match metric {
                    MetricArg::PracticeTime => Metric::PracticeTime,
                    MetricArg::Attempts => Metric::Attempts,
                },
                ..ReportOptions::default()
            };
            if let Some(c) = &config {
                options.timing = c.settings.timing;
                options.fast_finisher_minutes = c.settings.fast_finisher_minutes;
            }
            let report = cmd_report(&log, options)?;
            let text = match format {
                Format::Text => report.render_table(),
                Format::Json => serde_json::to_string_pretty(&report).expect("reports serialize") + "\n",
            };
            write_or_print(out.as_ref(), &text)
        }
    }
}

fn generate(spec: &CohortSpec, bank: &ProblemBank) -> SimScript {
    cohort::generate(spec, bank).script
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
