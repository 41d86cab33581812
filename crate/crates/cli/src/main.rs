mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Seeded counterfactual experiments on pixel normalization.
///
/// Settings come from `--config` (a JSON experiment config or a bare
/// blueprint); any flag given on the command line overrides the matching
/// config field. Outputs go to `<out>/images`, `<out>/tables` and
/// `<out>/meta.json`; a one-line JSON summary is printed on stdout.
///
/// Exit status: 0 success, 1 usage error, 2 runtime error.
#[derive(Parser, Debug)]
#[command(name = "normdid", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Experiment config or blueprint JSON.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for forging, latent draws and ACE batches.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Preset name or blueprint path.
    #[arg(long, global = true)]
    pub blueprint: Option<String>,
    /// Weight bundle directory, used instead of forging.
    #[arg(long, global = true)]
    pub bundle: Option<PathBuf>,
    #[arg(long, global = true)]
    pub n_samples: Option<usize>,
    /// Analysis layer; must match the model.
    #[arg(long, global = true)]
    pub layer: Option<usize>,
    /// Target class; repeatable.
    #[arg(long = "class", global = true)]
    pub classes: Vec<String>,
    /// Comma-separated ascending ablation sizes.
    #[arg(long, global = true, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// Worker threads; defaults to available parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a weight bundle from a blueprint.
    Forge,
    /// Render one latent, optionally with units ablated.
    Render {
        /// Index of the latent in the seeded draw sequence.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Comma-separated analysis units to ablate.
        #[arg(long, value_delimiter = ',')]
        ablate: Vec<usize>,
    },
    /// Per-unit ACE table and histograms.
    Ace {
        #[arg(long, default_value_t = 0.01)]
        hist_threshold: f64,
        #[arg(long, default_value_t = 0.5)]
        hist_clamp: f64,
        #[arg(long, default_value_t = 0.01)]
        hist_bin: f64,
    },
    /// Four-scenario difference-in-differences run.
    Did {
        /// Units to ablate; defaults to the class's top ACE units.
        #[arg(long, value_delimiter = ',')]
        units: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        top: usize,
    },
    /// Area-drop curve over `ks`.
    Curve {
        /// Replay β from the unablated run.
        #[arg(long)]
        fixed_beta: bool,
    },
    /// Class frequency and mean area over a seeded corpus of `n_samples`.
    Stats,
    /// Iterative ablation until no class emerges.
    Clean {
        #[arg(long, default_value_t = 4)]
        max_rounds: usize,
    },
    /// Start the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nSee `normdid --help`.");
            ExitCode::from(1)
        }
        Err(commands::Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
