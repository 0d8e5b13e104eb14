use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mmhcl_core::harness::{self, Command, RunConfig, RunError};
use mmhcl_core::Execution;

/// Heterogeneous-category multimodal learning experiments.
#[derive(Debug, Parser)]
#[command(name = "mmhcl", version)]
struct Cli {
    /// gen-data, train, eval, ablate, sweep-k or dump-uncertainty.
    #[arg(value_parser = parse_command)]
    command: Command,

    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set train.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Parent directory for run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,

    /// Exit with status 3 when a threshold in `eval.checks` is missed.
    #[arg(long)]
    check: bool,

    /// Disable the thread pool. Results are identical either way.
    #[arg(long)]
    sequential: bool,
}

fn parse_command(s: &str) -> Result<Command, String> {
    s.parse().map_err(|e: mmhcl_core::Error| e.to_string())
}

fn load_config(cli: &Cli) -> Result<RunConfig, RunError> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
    .map_err(RunError::Config)?;
    let mut cfg = base.with_overrides(&cli.overrides).map_err(RunError::Config)?;
    cfg.execution = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let mut result = load_config(&cli).and_then(|cfg| harness::run(cli.command, &cfg, &cli.out));
    if !cli.check {
        if let Ok(o) = &mut result {
            o.manifest.checks.clear();
        }
    }
    let code = harness::exit_code(&result);
    let report = match &result {
        Ok(o) => serde_json::json!({
            "status": if code == 0 { "ok" } else { "check-failed" },
            "exit_code": code,
            "run_dir": o.run_dir,
            "outputs": o.manifest.outputs,
            "checks": o.manifest.checks,
        }),
        Err(e) => {
            eprintln!("error: {e}");
            e.report()
        }
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    ExitCode::from(code as u8)
}
