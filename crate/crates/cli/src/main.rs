use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use monitord_core::bench::{self, BenchMode, BenchOptions, BenchReport};
use monitord_core::bundle::Bundle;
use monitord_core::framework::ModuleManifest;
use monitord_core::middleware::{BootOptions, Stack, StackConfig};
use monitord_core::model::{Credentials, SHELL_UID};
use monitord_core::scenario::report::{emit_report, ReportFormat};
use monitord_core::scenario::runner::{run_scenario, RunError, RunFlags};
use monitord_core::scenario::Scenario;

const EXIT_EXPECT_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "monitord", version, about = "Reference-monitor simulator driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario against a stack and print the report.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        module: Option<PathBuf>,
        #[arg(long)]
        disable_hooks: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "text")]
        report: ReportFormat,
    },
    /// Time hooked operations in one mode and write per-hook stats.
    Bench {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        mode: BenchMode,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        stack: Option<PathBuf>,
        #[arg(long, default_value_t = bench::DEFAULT_WARMUP)]
        warmup: usize,
        /// Summary JSON destination.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Cumulative distribution CSV destination.
        #[arg(long)]
        cfd: Option<PathBuf>,
        /// Summary JSON of a hooks-disabled run to compute overhead against.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Compare two bench summaries (enabled vs disabled).
    Compare {
        #[arg(long)]
        enabled: PathBuf,
        #[arg(long)]
        disabled: PathBuf,
    },
    /// Send a request bundle to a module as the shell user.
    CallModule {
        #[arg(long)]
        module: PathBuf,
        /// Inline JSON object, or @path to a file holding one.
        #[arg(long)]
        bundle: String,
        #[arg(long)]
        stack: Option<PathBuf>,
    },
}

struct Failure(u8, String);

impl Failure {
    fn config(msg: impl Into<String>) -> Failure {
        Failure(EXIT_CONFIG, msg.into())
    }
}

fn init_logging() {
    let level = match std::env::var("MONITORD_LOG").as_deref() {
        Ok("trace") => log::LevelFilter::Trace,
        Ok("info") => log::LevelFilter::Info,
        Ok("off") => log::LevelFilter::Off,
        _ => log::LevelFilter::Warn,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn load_stack(path: Option<&Path>) -> Result<StackConfig, Failure> {
    match path {
        Some(p) => StackConfig::from_file(p).map_err(Failure::config),
        None => Ok(StackConfig::default()),
    }
}

fn load_manifest(path: &Path) -> Result<ModuleManifest, Failure> {
    ModuleManifest::from_file(path).map_err(Failure::config)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::config(format!("cannot write {}: {e}", path.display())))
}

fn read_summary(path: &Path) -> Result<BenchReport, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::config(format!("invalid summary {}: {e}", path.display())))
}

/// Prints to stdout; a closed pipe is not an error.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { scenario, stack, module, disable_hooks, seed, report } => {
            let scenario = Scenario::from_file(&scenario).map_err(|e| Failure::config(e.to_string()))?;
            let config = load_stack(Some(&stack))?;
            let manifest = module.as_deref().map(load_manifest).transpose()?;
            let flags = RunFlags { hooks_enabled: !disable_hooks, seed, ..RunFlags::default() };
            let outcome = run_scenario(&scenario, &config, manifest.as_ref(), &flags).map_err(|e| match e {
                RunError::Parse(p) => Failure::config(p.to_string()),
                RunError::Config(c) => Failure::config(c),
            })?;
            emit(emit_report(&outcome.report, report).trim_end());
            let _ = outcome.stack.shutdown();
            if outcome.report.passed {
                Ok(())
            } else {
                Err(Failure(EXIT_EXPECT_FAILED, format!("{} expect(s) failed", outcome.report.failed_expects())))
            }
        }
        Command::Bench { scenario, mode, iterations, out, stack, warmup, summary, cfd, baseline } => {
            let scenario = Scenario::from_file(&scenario).map_err(|e| Failure::config(e.to_string()))?;
            let config = load_stack(stack.as_deref())?;
            let options = BenchOptions { iterations, warmup };
            let mut report =
                bench::run_bench(&scenario, &config, mode, &options).map_err(|e| Failure::config(e.to_string()))?;
            if let Some(path) = baseline {
                let base = read_summary(&path)?;
                let cmp = bench::compare_reports(&report, &base).map_err(|e| Failure::config(e.to_string()))?;
                report.overhead_ratio = Some(cmp.overhead_ratio);
            }
            write(&out, &report.to_csv())?;
            if let Some(path) = summary {
                write(&path, &report.summary_json())?;
            }
            if let Some(path) = cfd {
                write(&path, &report.cfd_csv())?;
            }
            emit(&format!(
                "{} samples over {} hooks, weighted mean {:.3} us",
                report.samples.len(),
                report.hooks.len(),
                report.weighted_mean_us
            ));
            if let Some(r) = report.overhead_ratio {
                emit(&format!("overhead {:.2}%", r * 100.0));
            }
            Ok(())
        }
        Command::Compare { enabled, disabled } => {
            let cmp = bench::compare_reports(&read_summary(&enabled)?, &read_summary(&disabled)?)
                .map_err(|e| Failure::config(e.to_string()))?;
            emit(&serde_json::to_string_pretty(&cmp).expect("comparison serializes"));
            Ok(())
        }
        Command::CallModule { module, bundle, stack } => {
            let text = match bundle.strip_prefix('@') {
                Some(path) => {
                    fs::read_to_string(path).map_err(|e| Failure::config(format!("cannot read {path}: {e}")))?
                }
                None => bundle,
            };
            let json: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Failure::config(format!("invalid bundle: {e}")))?;
            let request =
                Bundle::from_plain_json(&json).map_err(|e| Failure::config(format!("invalid bundle: {e}")))?;
            let config = load_stack(stack.as_deref())?;
            let manifest = load_manifest(&module)?;
            let stack = Stack::boot(&config, Some(&manifest), BootOptions::default())
                .map_err(|e| Failure::config(e.to_string()))?;
            let result = stack.call_module(&Credentials::new(SHELL_UID, 0), &request);
            let _ = stack.shutdown();
            match result {
                Ok(response) => {
                    emit(&serde_json::to_string_pretty(&response.to_plain_json()).expect("bundle serializes"));
                    Ok(())
                }
                Err(e) => Err(Failure(EXIT_EXPECT_FAILED, e.to_string())),
            }
        }
    }
}

fn main() -> ExitCode {
    init_logging();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("monitord: {msg}");
            ExitCode::from(code)
        }
    }
}
