use std::path::PathBuf;
use std::process::ExitCode;

use canonix::databench::Pairing;
use canonix_cli::commands::{self, ConfigSource, EvalArgs, TrainArgs};
use canonix_cli::experiment::RunControl;
use canonix_cli::manifest::{OutputLock, RunManifest};
use clap::{Args, Parser, Subcommand};

/// Probabilistic affine canonicalization: data, training, evaluation and self-checks.
#[derive(Parser)]
#[command(name = "canonix", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config (JSON). Missing keys take benchmark defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in config: benchmark or smoke.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn source(&self) -> ConfigSource {
        ConfigSource {
            path: self.config.clone(),
            preset: self.preset.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the glyph dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the baseline classifier and the canonicalizer.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also train one variant per ablation toggle and write ablation.csv.
        #[arg(long)]
        ablate: bool,
        /// Continue stages found in --out.
        #[arg(long)]
        resume: bool,
        #[arg(long, hide = true)]
        stop_after_epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on the test set and optional orbit sets.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Add the roto-scaled orbit set.
        #[arg(long)]
        orbit: bool,
        /// Add the shear-then-orbit set.
        #[arg(long)]
        sheared_orbit: bool,
        /// Posterior samples per prediction.
        #[arg(long)]
        samples: Option<usize>,
        /// Comma-separated sample counts written to sweep.csv.
        #[arg(long, value_delimiter = ',')]
        sweep_samples: Option<Vec<usize>>,
        #[arg(long)]
        pairing: Option<Pairing>,
    },
    /// Rectify images with a checkpoint and report the regressed components.
    Canonicalize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// PGM or PPM images.
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Write an untrained canonicalizer checkpoint.
    Init {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the property suites and print a per-suite table.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run only these suites.
        #[arg(long = "suite")]
        suites: Vec<String>,
        /// Write the run manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Print the resolved config as JSON.
    ShowConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn set_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("CANONIX_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| format!("CANONIX_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn run(cli: Cli, argv: Vec<String>) -> canonix::Result<ExitCode> {
    match cli.command {
        Command::GenData { cfg, out } => commands::gen_data(&cfg.source(), &out, argv)?,
        Command::Train {
            cfg,
            data,
            out,
            ablate,
            resume,
            stop_after_epochs,
        } => commands::train(
            &cfg.source(),
            TrainArgs {
                data: &data,
                out: &out,
                ablate,
                resume,
                control: RunControl { stop_after_epochs },
            },
            argv,
        )?,
        Command::Eval {
            cfg,
            checkpoint,
            data,
            out,
            orbit,
            sheared_orbit,
            samples,
            sweep_samples,
            pairing,
        } => commands::eval(
            &cfg.source(),
            EvalArgs {
                checkpoint: &checkpoint,
                data: &data,
                out: &out,
                orbit,
                sheared_orbit,
                samples,
                sweep: sweep_samples,
                pairing,
            },
            argv,
        )?,
        Command::Canonicalize { checkpoint, out, images } => commands::canonicalize(&checkpoint, &images, &out, argv)?,
        Command::Init { cfg, out } => commands::init(&cfg.source(), &out, argv)?,
        Command::Selfcheck {
            seed,
            suites,
            out,
            inject_fault,
        } => {
            let inject = match inject_fault.as_deref() {
                None => false,
                Some("tanh") => true,
                Some(other) => return Err(canonix::Error::Config(format!("unknown fault {other:?}"))),
            };
            let lock = out.as_deref().map(OutputLock::acquire).transpose()?;
            let manifest = RunManifest::start(argv, String::new(), seed);
            let reports = commands::selfcheck(seed, &suites, inject)?;
            print!("{}", canonix::verify::selfcheck::format_table(&reports));
            if let Some(dir) = &out {
                manifest.finish(dir)?;
            }
            drop(lock);
            if reports.iter().any(|r| !r.passed()) {
                let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
                eprintln!("error: self-check failed: {}", failed.join(", "));
                return Ok(ExitCode::from(2));
            }
        }
        Command::ShowConfig { cfg } => print!("{}", commands::show_config(&cfg.source())?),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: {first}");
            for l in msg.lines().skip(1).filter(|l| !l.trim().is_empty()) {
                eprintln!("  {}", l.trim());
            }
            return ExitCode::from(1);
        }
    };
    if let Err(e) = set_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli, argv) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
