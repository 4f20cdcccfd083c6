use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use poisonbench_cli::config::RunConfig;
use poisonbench_cli::plot::{render, PlotKind};
use poisonbench_cli::protocol::{eval_checkpoint, output_root, run_protocol};
use poisonbench_cli::sweep::{parse_grid, sweep};
use poisonbench_cli::{CliError, RunManifest, OUT_ENV};

#[derive(Parser)]
#[command(name = "poisonbench", version, about = "Poisoning and unlearning experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the attack, training, unlearning and evaluation steps of one config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output root (default: $POISONBENCH_OUT, then the config, then ./runs).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the config's global seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Keep only these methods (repeatable).
        #[arg(long)]
        method: Vec<String>,
    },
    /// Run a config template over a parameter grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// TOML file mapping dotted config keys to arrays of values.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        method: Vec<String>,
    },
    /// Re-evaluate a checkpoint against the data of an existing run.
    Eval {
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render figures from one or more manifests.
    Plot {
        #[arg(long)]
        kind: String,
        /// SVG file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
    },
    /// Print a manifest.
    Inspect {
        manifest: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn apply_overrides(mut cfg: RunConfig, seed: Option<u64>, methods: &[String]) -> Result<RunConfig, CliError> {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if !methods.is_empty() {
        for want in methods {
            if !cfg.unlearn.methods.iter().any(|m| m.name() == want) {
                return Err(CliError::Config(format!("method filter {want} matches no configured method")));
            }
        }
        cfg.unlearn.methods.retain(|m| methods.iter().any(|w| w == m.name()));
    }
    Ok(cfg)
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("manifest.json")
    } else {
        p.to_path_buf()
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            method,
        } => {
            let cfg = apply_overrides(RunConfig::load(&config)?, seed, &method)?;
            let root = output_root(out.as_deref(), Some(&cfg));
            let m = run_protocol(&cfg, &root)?;
            print!("{}", m.render());
            println!("manifest: {}", m.run_dir.join("manifest.json").display());
        }
        Command::Sweep {
            config,
            grid,
            out,
            jobs,
            seed,
            method,
        } => {
            let text = fs::read_to_string(&config)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", config.display())))?;
            let template: toml::Table = toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
            let gtext = fs::read_to_string(&grid)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", grid.display())))?;
            let grid = parse_grid(&gtext)?;
            let out_dir = template
                .get("output_dir")
                .and_then(|v| v.as_str())
                .map(PathBuf::from);
            let root = match (out, std::env::var_os(OUT_ENV), out_dir) {
                (Some(o), _, _) => o,
                (None, Some(e), _) => PathBuf::from(e),
                (None, None, Some(d)) => d,
                _ => PathBuf::from("runs"),
            };
            let filter = |c: RunConfig| apply_overrides(c, seed, &method);
            let results = sweep(&template, &grid, &root, jobs, &filter)?;
            let failed = results.iter().filter(|r| r.outcome.is_err()).count();
            println!(
                "{} points, {} failed, summary {}",
                results.len(),
                failed,
                root.join("summary.csv").display()
            );
            for r in results.iter().filter(|r| r.outcome.is_err()) {
                eprintln!("{}: {}", r.hash, r.outcome.as_ref().unwrap_err());
            }
            if failed > 0 {
                return Err(CliError::step("sweep", format!("{failed} points failed")));
            }
        }
        Command::Eval { manifest, checkpoint } => {
            let m = RunManifest::read(&manifest_path(&manifest))?;
            let row = eval_checkpoint(&m, &checkpoint)?;
            println!("{}", serde_json::to_string_pretty(&row).expect("rows serialize"));
        }
        Command::Plot { kind, out, manifests } => {
            let kind: PlotKind = kind.parse()?;
            let ms = manifests
                .iter()
                .map(|p| RunManifest::read(&manifest_path(p)))
                .collect::<Result<Vec<_>, _>>()?;
            let svg = render(kind, &ms)?;
            fs::write(&out, svg).map_err(|e| CliError::step("plot", e))?;
        }
        Command::Inspect { manifest, json } => {
            let m = RunManifest::read(&manifest_path(&manifest))?;
            if json {
                println!("{}", serde_json::to_string_pretty(&m).expect("manifests serialize"));
            } else {
                print!("{}", m.render());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("poisonbench: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
