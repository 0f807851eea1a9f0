use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dln_cli::{core_exit_code, execute, output, presets, CliError, ExperimentConfig, EXIT_OK};

#[derive(Parser)]
#[command(name = "dln-lab", version, about = "Deep linear network experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write its outputs.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for sweeps; 0 uses all cores.
        #[arg(long, env = "DLN_LAB_JOBS", default_value_t = 0)]
        jobs: usize,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// List the built-in presets.
    Presets,
    /// Print a preset as a config file.
    Preset { name: String },
    /// Parse and validate a config without running it.
    Validate { config: PathBuf },
}

fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    ExperimentConfig::from_json(&text)
}

fn run(config: &Path, out: &Path, jobs: usize, seed_override: Option<u64>) -> Result<i32, CliError> {
    let mut cfg = load(config)?;
    if let Some(s) = seed_override {
        cfg.seed = s;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Validation(format!("jobs: {e}")))?;
    let outcome = pool.install(|| execute(&cfg));
    output::write_outputs(out, &cfg, &outcome)?;
    for c in &outcome.artifacts.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("wrote {}", out.display());
    match &outcome.error {
        Some(e) => {
            eprintln!("error: {e}");
            Ok(core_exit_code(e))
        }
        None => Ok(EXIT_OK),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            jobs,
            seed_override,
        } => run(&config, &out, jobs, seed_override),
        Command::Presets => {
            print!("{}", presets::list_presets());
            Ok(EXIT_OK)
        }
        Command::Preset { name } => presets::find(&name).map(|p| {
            println!("{}", p.json);
            EXIT_OK
        }),
        Command::Validate { config } => load(&config).map(|cfg| {
            println!("ok: {} ({:?})", cfg.kind.name(), config);
            EXIT_OK
        }),
    };
    let code = result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        e.exit_code()
    });
    ExitCode::from(code as u8)
}
