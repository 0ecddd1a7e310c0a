use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use schlogl_cli::config::ScenarioConfig;
use schlogl_cli::scenario::{self, EXIT_CONFIG};

#[derive(Parser)]
#[command(name = "schlogl-cli", about = "Stabilization experiments for the Schlögl equation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write trace/summary artifacts
    Run { config: PathBuf },
    /// Tabulate final norms, decay rates, costs and saturation duty of runs
    Compare {
        traces: Vec<PathBuf>,
        /// write the table here instead of stdout
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Poincaré, gain-inequality and scheme-order suites
    Diagnose {
        config: PathBuf,
        /// absorbing radius D entering the saturation threshold C_u*
        #[arg(long, default_value_t = 1.0)]
        absorbing_radius: f64,
    },
    /// Parse and validate a configuration
    Validate { config: PathBuf },
}

fn load(path: &PathBuf) -> Result<ScenarioConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    ScenarioConfig::from_toml(&text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.cmd {
        Cmd::Run { config } => match load(&config) {
            Err(e) => {
                eprintln!("{e}");
                EXIT_CONFIG
            }
            Ok(cfg) => match scenario::run_scenario(&cfg) {
                Ok(outcome) => {
                    println!(
                        "{}: |z(T)|_H = {:.6e} (|z0|_H = {:.6e}), J = {:.6e}, artifacts in {}",
                        outcome.summary.controller,
                        outcome.summary.final_norm_h,
                        outcome.summary.initial_norm_h,
                        outcome.summary.cost_total,
                        outcome.out_dir.display()
                    );
                    for w in &outcome.summary.warnings {
                        eprintln!("warning: {w}");
                    }
                    if let Some(t) = outcome.summary.blow_up_time {
                        eprintln!("solution blew up at t = {t:.6}; partial trace kept");
                    }
                    outcome.exit_code
                }
                Err(e) => {
                    eprintln!("{e}");
                    EXIT_CONFIG
                }
            },
        },
        Cmd::Compare { traces, output } => match scenario::compare(&traces) {
            Ok(table) => {
                match output {
                    Some(path) => {
                        if let Err(e) = std::fs::write(&path, &table) {
                            eprintln!("cannot write {}: {e}", path.display());
                            return ExitCode::from(1);
                        }
                    }
                    None => print!("{table}"),
                }
                0
            }
            Err(e) => {
                eprintln!("{e}");
                EXIT_CONFIG
            }
        },
        Cmd::Diagnose {
            config,
            absorbing_radius,
        } => match load(&config).map_err(anyhow::Error::msg).and_then(|cfg| {
            let report = scenario::diagnose(&cfg, absorbing_radius)?;
            let dir = PathBuf::from(&cfg.output.dir);
            std::fs::create_dir_all(&dir)?;
            let path = dir.join("diagnostics.json");
            serde_json::to_writer_pretty(std::fs::File::create(&path)?, &report)?;
            println!("diagnostics written to {}", path.display());
            Ok(())
        }) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("{e}");
                EXIT_CONFIG
            }
        },
        Cmd::Validate { config } => match load(&config).map_err(|e| e.to_string()).and_then(|cfg| cfg.validate()) {
            Ok(()) => {
                println!("{}: ok", config.display());
                0
            }
            Err(e) => {
                eprintln!("{}: invalid\n{e}", config.display());
                EXIT_CONFIG
            }
        },
    };
    ExitCode::from(code as u8)
}
