use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use localctl::Error;
use localctl_cli::{
    cmd_ablate, cmd_dataset, cmd_eval, cmd_generate, cmd_train, Outcome, RunConfig,
};

/// Local-control guidance for a miniature diffusion model.
///
/// Settings come from built-in defaults, then the `--config` file, then
/// `--set section.key=value` overrides, then the dedicated flags below.
#[derive(Parser)]
#[command(name = "localctl", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set guidance.beta=0.9`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Maximum worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default configuration as TOML.
    Defaults,
    /// Write the dataset manifest and preview renders.
    Dataset {
        #[arg(long)]
        count: Option<u64>,
    },
    /// Train the base denoiser, then the control branch.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        base_steps: Option<u64>,
        #[arg(long)]
        control_steps: Option<u64>,
    },
    /// Sample images with diagnostics and run manifests.
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        prompt: Option<String>,
        /// naive | noise_mask | feature_mask | full_method
        #[arg(long)]
        mode: Option<String>,
        /// Components for full_method, e.g. `rdloss+ftr+fmc`.
        #[arg(long)]
        toggles: Option<String>,
        /// Edge condition (PNG or PGM).
        #[arg(long)]
        condition: Option<PathBuf>,
        /// Control mask (PNG or PGM).
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Use a built-in prompt, condition and mask instead.
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Run the component ablation sweep.
    Ablate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        rows: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Score existing images against a scenario.
    Eval {
        #[arg(long, default_value = "circle_and_square")]
        scenario: String,
        images: Vec<PathBuf>,
    },
}

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = RunConfig::from_toml_with(&text, &cli.overrides)?;
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Dataset { count: Some(n) } => cfg.data.previews = *n,
        Command::Train {
            base_steps,
            control_steps,
            ..
        } => {
            if let Some(n) = base_steps {
                cfg.train.base_steps = *n;
            }
            if let Some(n) = control_steps {
                cfg.train.control_steps = *n;
            }
        }
        Command::Generate {
            checkpoint,
            prompt,
            mode,
            toggles,
            condition,
            mask,
            seeds,
            ..
        } => {
            let s = &mut cfg.sample;
            if let Some(v) = checkpoint {
                s.checkpoint = v.clone();
            }
            if let Some(v) = prompt {
                s.prompt = v.clone();
            }
            if let Some(v) = mode {
                s.mode = v.clone();
            }
            if let Some(v) = toggles {
                s.toggles = v.clone();
            }
            if let Some(v) = condition {
                s.condition = Some(v.clone());
            }
            if let Some(v) = mask {
                s.mask = Some(v.clone());
            }
            if let Some(v) = seeds {
                s.seeds = v.clone();
            }
        }
        Command::Ablate {
            checkpoint,
            rows,
            seeds,
        } => {
            if let Some(v) = checkpoint {
                cfg.eval.checkpoint = v.clone();
            }
            if let Some(v) = rows {
                cfg.eval.rows = v.clone();
            }
            if let Some(v) = seeds {
                cfg.eval.seeds = v.clone();
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<Outcome, Error> {
    if let Command::Defaults = cli.command {
        print!("{}", RunConfig::default().to_toml());
        return Ok(Outcome::default());
    }
    let cfg = load_config(cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let log = |line: String| eprintln!("{line}");
    match &cli.command {
        Command::Defaults => unreachable!(),
        Command::Dataset { .. } => cmd_dataset(&cfg),
        Command::Train { resume, .. } => cmd_train(&cfg, resume.as_deref(), log),
        Command::Generate { scenario, .. } => cmd_generate(&cfg, scenario.as_deref()),
        Command::Ablate { .. } => cmd_ablate(&cfg, log),
        Command::Eval { scenario, images } => cmd_eval(&cfg, images, scenario),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            for p in &out.written {
                println!("{}", p.display());
            }
            if out.failures > 0 {
                eprintln!("{} run(s) failed; see the written reports", out.failures);
                ExitCode::from(EXIT_PARTIAL)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            })
        }
    }
}
