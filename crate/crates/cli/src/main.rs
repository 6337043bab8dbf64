use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use turnpike_core::system::PRESET_NAMES;
use turnpike_lab::{parse, run_experiment, validate};

/// Exit status for configs that do not validate.
const EXIT_INVALID: u8 = 2;
/// Exit status for solver and I/O failures during a run.
const EXIT_RUNTIME: u8 = 1;

#[derive(Parser)]
#[command(name = "turnpike-lab", version, about = "Turnpike and economic MPC experiments on gridded optimal control problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its datasets plus a manifest.
    Run {
        config: PathBuf,
        /// Worker threads for sweeps (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// Output directory; overrides `output.dir` and `TURNPIKE_LAB_OUT`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config and print one diagnostic per problem.
    Validate { config: PathBuf },
    /// Built-in systems.
    Preset {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    List,
}

fn read_config(path: &Path) -> Result<String, ExitCode> {
    std::fs::read_to_string(path).map_err(|e| {
        eprintln!("{}: cannot read config: {e}", path.display());
        ExitCode::from(EXIT_INVALID)
    })
}

/// `--out`, then `output.dir`, then `$TURNPIKE_LAB_OUT/<config stem>`, then
/// `turnpike-out/<config stem>`.
fn output_dir(flag: Option<PathBuf>, from_config: Option<PathBuf>, config: &Path) -> PathBuf {
    if let Some(dir) = flag.or(from_config) {
        return dir;
    }
    let root = std::env::var_os("TURNPIKE_LAB_OUT").map_or_else(|| PathBuf::from("turnpike-out"), PathBuf::from);
    let stem = config.file_stem().map_or_else(|| "experiment".into(), |s| s.to_owned());
    root.join(stem)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Preset { action: PresetAction::List } => {
            for name in PRESET_NAMES {
                println!("{name}");
            }
            ExitCode::SUCCESS
        }
        Command::Validate { config } => {
            let text = match read_config(&config) {
                Ok(t) => t,
                Err(code) => return code,
            };
            let diags = validate(&text);
            for d in &diags {
                eprintln!("{}: {d}", config.display());
            }
            if diags.is_empty() {
                println!("{}: ok", config.display());
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_INVALID)
            }
        }
        Command::Run { config: path, jobs, out } => {
            let text = match read_config(&path) {
                Ok(t) => t,
                Err(code) => return code,
            };
            let config = match parse(&text) {
                Ok(c) => c,
                Err(diags) => {
                    for d in &diags {
                        eprintln!("{}: {d}", path.display());
                    }
                    return ExitCode::from(EXIT_INVALID);
                }
            };
            let dir = output_dir(out, config.output.clone(), &path);
            let pool = match rayon::ThreadPoolBuilder::new().num_threads(jobs.unwrap_or(0)).build() {
                Ok(p) => p,
                Err(e) => {
                    eprintln!("error: cannot start worker pool: {e}");
                    return ExitCode::from(EXIT_RUNTIME);
                }
            };
            match pool.install(|| run_experiment(&config, &dir)) {
                Ok(manifest) => {
                    println!("wrote {} files to {}", manifest.files.len(), dir.display());
                    println!("manifest: {}", manifest.path.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_RUNTIME)
                }
            }
        }
    }
}
