use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use urbanvit::config::PipelineConfig;
use urbanvit::pipeline::{render_report, Pipeline, StageSelector};
use urbanvit::synth::{generate_city, SynthSpec};
use urbanvit::Error;

#[derive(Parser)]
#[command(
    name = "urbanvit",
    version,
    about = "District-level urban vitality from satellite imagelets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one pipeline stage, or all of them.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "all")]
        stage: String,
        /// Override a config value, e.g. `--set eval.k=10`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write imagelet PNGs with a manifest.
        #[arg(long)]
        emit_pngs: bool,
    },
    /// Check a configuration and list every problem.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Re-render the scatter plot of a stored evaluation report.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic city bundle.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Configuration and usage problems exit with 2, everything else with 1.
fn fail(e: Error, usage: bool) -> ExitCode {
    error!("{e}");
    eprintln!("error: {e}");
    let usage = usage || matches!(e, Error::MissingArtifact { .. });
    ExitCode::from(if usage { 2 } else { 1 })
}

fn load_config(
    config: &PathBuf,
    set: &[String],
    out: Option<PathBuf>,
    seed: Option<u64>,
    pngs: bool,
) -> Result<PipelineConfig, Error> {
    let mut set = set.to_vec();
    if let Some(s) = seed {
        set.push(format!("seed={s}"));
    }
    if pngs {
        set.push("emit_pngs=true".to_string());
    }
    let mut cfg = PipelineConfig::load(config, &set)?;
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("URBANVIT_LOG", "info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            stage,
            set,
            out,
            seed,
            emit_pngs,
        } => {
            let sel: StageSelector = match stage.parse() {
                Ok(s) => s,
                Err(e) => return fail(e, true),
            };
            let cfg = match load_config(&config, &set, out, seed, emit_pngs) {
                Ok(c) => c,
                Err(e) => return fail(e, true),
            };
            match Pipeline::new(&cfg).run(sel) {
                Ok(outcomes) => {
                    for o in outcomes {
                        println!(
                            "{}: {} ({} files)",
                            o.stage,
                            if o.skipped { "up to date" } else { "done" },
                            o.outputs.len()
                        );
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e, false),
            }
        }
        Command::Validate { config, set } => match load_config(&config, &set, None, None, false) {
            Ok(_) => {
                println!("{}: ok", config.display());
                ExitCode::SUCCESS
            }
            Err(e) => fail(e, true),
        },
        Command::Report { input, out } => {
            let run = || -> Result<(), Error> {
                let text = std::fs::read_to_string(&input)
                    .map_err(|e| Error::Format(format!("{}: {e}", input.display())))?;
                let svg = render_report(&text)?;
                std::fs::write(&out, svg)
                    .map_err(|e| Error::Format(format!("{}: {e}", out.display())))
            };
            match run() {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(e, false),
            }
        }
        Command::Synth { spec, out } => {
            let spec = match spec {
                Some(p) => match std::fs::read_to_string(&p) {
                    Ok(t) => SynthSpec::from_toml(&t),
                    Err(e) => Err(Error::Format(format!("{}: {e}", p.display()))),
                },
                None => Ok(SynthSpec::default()),
            };
            let spec = match spec {
                Ok(s) => s,
                Err(e) => return fail(e, true),
            };
            match generate_city(&spec, &out) {
                Ok(b) => {
                    println!(
                        "{} cities, {} districts written to {}",
                        b.cities.len(),
                        b.truth.len(),
                        out.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e, false),
            }
        }
    }
}
